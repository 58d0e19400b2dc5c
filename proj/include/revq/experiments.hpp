// SPDX-License-Identifier: Apache-2.0
//
// The two 2-D toy studies: single- vs multi-group quantization on
// SymmetricPairs, and training with vs without non-activation reset on
// Clusters. Shared by the CLI and the acceptance suite.

#pragma once

#include <cstdint>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "revq/data.hpp"
#include "revq/trainer.hpp"

namespace revq {

struct ToyVariant {
  std::string name;
  double final_error = 0.0;
  double utilization = 0.0;
  std::vector<EpochReport> log;
};

struct ToyComparison {
  ToyVariant baseline;  // single-group, or reset off
  ToyVariant improved;  // channel multi-group, or reset on
  double ratio() const {
    return improved.final_error > 0 ? baseline.final_error / improved.final_error
                                    : std::numeric_limits<double>::infinity();
  }
};

struct MultigroupSetup {
  std::size_t samples = 512;
  std::size_t codes = 4;
  TrainConfig train = [] {
    TrainConfig c;
    c.epochs = 40;
    c.batch_size = 64;
    c.quantizer_lr = 5e-2;
    c.final_lr = 5e-4;
    return c;
  }();
};

struct ResetSetup {
  std::size_t samples = 4096;
  std::size_t codes = 64;
  ToyOptions data{};  // 64 clusters by default
  TrainConfig train = [] {
    TrainConfig c;
    c.epochs = 50;
    c.batch_size = 128;
    c.init = CodebookInit::Gaussian;
    c.init_std = 0.1;
    return c;
  }();
};

inline ToyVariant run_toy_variant(std::string name, const TokenBatch<float>& groups,
                                  std::size_t codes, bool shared, const TrainConfig& cfg) {
  auto res = train(groups, codes, shared, Rectifier(groups.tokens, groups.dim), cfg);
  ToyVariant v{std::move(name), 0.0, 0.0, std::move(res.log)};
  if (!v.log.empty()) {
    v.final_error = v.log.back().qua_loss;
    v.utilization = v.log.back().utilization_overall;
  }
  return v;
}

/// Each 2-D point is 2 tokens of dim 1. Single-group quantizes both
/// coordinates (two spatial positions) with one shared codebook; channel
/// multi-group gives each coordinate its own codebook.
inline ToyComparison run_multigroup_experiment(std::uint64_t seed, const MultigroupSetup& setup = {}) {
  const auto data = gen_toy2d(ToyKind::SymmetricPairs, setup.samples, seed);
  TrainConfig cfg = setup.train;
  cfg.seed = seed;

  const auto as_positions = data.reshaped({2, 1, 1});
  const auto single_groups = reshape_to_groups(as_positions, GroupSpec::spatial(as_positions.shape(), 2));
  const auto multi_groups = reshape_to_groups(data, GroupSpec::channel(data.shape(), 2));

  ToyComparison out;
  out.baseline = run_toy_variant("single_group", single_groups, setup.codes, true, cfg);
  out.improved = run_toy_variant("multi_group", multi_groups, setup.codes, false, cfg);
  return out;
}

/// One token per point (d = 2) and a Gaussian-initialized codebook
/// concentrated near the origin, trained with and without reset.
inline ToyComparison run_reset_experiment(std::uint64_t seed, const ResetSetup& setup = {}) {
  const auto data = gen_toy2d(ToyKind::Clusters, setup.samples, seed, setup.data);
  const auto groups = reshape_to_groups(data, GroupSpec::spatial(data.shape(), 1));
  TrainConfig cfg = setup.train;
  cfg.seed = seed;

  ToyComparison out;
  cfg.reset_enabled = false;
  out.baseline = run_toy_variant("reset_off", groups, setup.codes, false, cfg);
  cfg.reset_enabled = true;
  out.improved = run_toy_variant("reset_on", groups, setup.codes, false, cfg);
  return out;
}

/// Per-epoch trajectories: epoch,variant,qua_loss,dec_loss,utilization,reset_count
inline void write_trajectory_csv(std::ostream& os, const ToyComparison& cmp) {
  os << "epoch,variant,qua_loss,dec_loss,utilization,reset_count\n";
  os.precision(17);
  for (const auto* v : {&cmp.baseline, &cmp.improved}) {
    for (const auto& r : v->log) {
      os << r.epoch << ',' << v->name << ',' << r.qua_loss << ',' << r.dec_loss << ','
         << r.utilization_overall << ',' << r.reset_count << '\n';
    }
  }
}

}  // namespace revq
