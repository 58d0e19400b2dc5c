// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.

#pragma once

#include "revq/analysis.hpp"
#include "revq/core.hpp"
#include "revq/data.hpp"
#include "revq/experiments.hpp"
#include "revq/gradcheck.hpp"
#include "revq/loss.hpp"
#include "revq/optim.hpp"
#include "revq/quantizer.hpp"
#include "revq/rectifier.hpp"
#include "revq/trainer.hpp"
