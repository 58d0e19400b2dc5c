// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <concepts>

#include "revq/core.hpp"

namespace revq {

template <std::floating_point T>
struct LossResult {
  double value = 0.0;
  TokenBatch<T> grad;  // dL / d z_rect
};

/// Latent-space l2 objective: mean over samples of the summed squared
/// residual ||z_e - z_rect||^2. Gradient wrt z_rect is 2 (z_rect - z_e) / batch.
template <std::floating_point T>
LossResult<T> revq_loss(const TokenBatch<T>& target, const TokenBatch<T>& output) {
  if (!target.same_layout(output)) throw ConfigError("loss operands have different layouts");
  LossResult<T> res;
  res.grad = TokenBatch<T>(output.batch, output.tokens, output.dim);
  if (output.batch == 0) return res;
  const double inv = 1.0 / static_cast<double>(output.batch);
  double total = 0.0;
  for (std::size_t i = 0; i < output.values.size(); ++i) {
    const double r = static_cast<double>(output.values[i]) - static_cast<double>(target.values[i]);
    total += r * r;
    res.grad.values[i] = static_cast<T>(2.0 * r * inv);
  }
  res.value = total * inv;
  return res;
}

/// Per-sample summed squared residual, accumulated in double.
template <std::floating_point T>
std::vector<double> per_sample_sq_error(const TokenBatch<T>& target, const TokenBatch<T>& output) {
  if (!target.same_layout(output)) throw ConfigError("operands have different layouts");
  std::vector<double> out(output.batch, 0.0);
  const std::size_t stride = output.tokens * output.dim;
  for (std::size_t n = 0; n < output.batch; ++n) {
    double acc = 0.0;
    for (std::size_t i = n * stride; i < (n + 1) * stride; ++i) {
      const double r = static_cast<double>(output.values[i]) - static_cast<double>(target.values[i]);
      acc += r * r;
    }
    out[n] = acc;
  }
  return out;
}

}  // namespace revq
