// SPDX-License-Identifier: Apache-2.0
//
// Verification oracles and empirical-law tooling: the split-mean lower bound
// behind the reset strategy, the log-log codebook scaling-law fit and the
// minimum-codebook search that produces its data points.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "revq/core.hpp"
#include "revq/rectifier.hpp"
#include "revq/trainer.hpp"

namespace revq {

struct SplitBound {
  double single = 0.0;  // sum ||z_i - mean(all)||^2
  double split = 0.0;   // same, each subset about its own mean
  bool holds = true;
};

/// `vectors` is m x dim row-major; `in_first[i]` puts row i in subset 1.
inline SplitBound split_mean_bound_check(std::span<const double> vectors, std::size_t dim,
                                         std::span<const std::uint8_t> in_first) {
  if (dim == 0 || vectors.size() % dim != 0) throw ConfigError("split bound: bad vector layout");
  const std::size_t m = vectors.size() / dim;
  if (m < 2 || in_first.size() != m) throw ConfigError("split bound: need m >= 2 and one flag per row");
  std::vector<double> all(dim, 0.0), first(dim, 0.0), second(dim, 0.0);
  std::size_t m1 = 0;
  for (std::size_t i = 0; i < m; ++i) {
    auto& side = in_first[i] ? first : second;
    m1 += in_first[i] ? 1 : 0;
    for (std::size_t k = 0; k < dim; ++k) {
      all[k] += vectors[i * dim + k];
      side[k] += vectors[i * dim + k];
    }
  }
  const std::size_t m2 = m - m1;
  if (m1 == 0 || m2 == 0) throw ConfigError("split bound: both subsets must be non-empty");
  for (std::size_t k = 0; k < dim; ++k) {
    all[k] /= static_cast<double>(m);
    first[k] /= static_cast<double>(m1);
    second[k] /= static_cast<double>(m2);
  }
  SplitBound b;
  for (std::size_t i = 0; i < m; ++i) {
    const auto& own = in_first[i] ? first : second;
    for (std::size_t k = 0; k < dim; ++k) {
      const double x = vectors[i * dim + k];
      b.single += (x - all[k]) * (x - all[k]);
      b.split += (x - own[k]) * (x - own[k]);
    }
  }
  b.holds = b.split <= b.single + 1e-9;
  return b;
}

struct ScalingPoint {
  double tokens = 0.0;  // B
  double codes = 0.0;   // minimum codebook size M
};

/// log10(M) = slope * log10(B) + intercept.
struct LogLinearFit {
  double slope = 0.0;
  double intercept = 0.0;

  double predict(double tokens) const { return std::pow(10.0, slope * std::log10(tokens) + intercept); }
};

/// Ordinary least squares in log10-log10 space.
inline LogLinearFit fit_scaling_law(std::span<const ScalingPoint> points) {
  if (points.size() < 2) throw ConfigError("scaling fit needs at least 2 points");
  double sx = 0, sy = 0;
  for (const auto& p : points) {
    if (!(p.tokens > 0 && p.codes > 0)) throw ConfigError("scaling fit needs positive values");
    sx += std::log10(p.tokens);
    sy += std::log10(p.codes);
  }
  const double n = static_cast<double>(points.size());
  const double mx = sx / n, my = sy / n;
  double sxx = 0, sxy = 0;
  for (const auto& p : points) {
    const double dx = std::log10(p.tokens) - mx;
    sxx += dx * dx;
    sxy += dx * (std::log10(p.codes) - my);
  }
  if (sxx <= 1e-300) throw ConfigError("scaling fit is degenerate: all token lengths are equal");
  LogLinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  return f;
}

struct SearchPoint {
  std::size_t codes = 0;
  double mse = 0.0;  // converged quantizer error per scalar
};

struct CodebookSearch {
  std::optional<std::size_t> codes;  // smallest passing grid entry
  std::vector<SearchPoint> trials;
};

/// Trains a quantizer-only model (no rectifier) at each codebook size in
/// `grid` and returns the first whose converged per-scalar quantization MSE
/// is below `threshold`.
inline CodebookSearch min_codebook_search(const TokenBatch<float>& groups, double threshold,
                                          std::span<const std::size_t> grid,
                                          const TrainConfig& cfg) {
  if (!std::is_sorted(grid.begin(), grid.end())) throw ConfigError("codebook grid must be ascending");
  CodebookSearch out;
  const double scalars = static_cast<double>(groups.tokens * groups.dim);
  for (std::size_t n : grid) {
    auto res = train(groups, n, false, Rectifier(groups.tokens, groups.dim), cfg);
    const double qua = res.log.empty() ? evaluate<float>(groups, res.codebook, res.rectifier).qua_loss
                                       : res.log.back().qua_loss;
    const double mse = qua / scalars;
    out.trials.push_back({n, mse});
    if (mse < threshold) {
      out.codes = n;
      break;
    }
  }
  return out;
}

struct SweepResult {
  std::size_t tokens = 0;
  CodebookSearch search;
};

/// Runs min_codebook_search for each token length, channel-splitting `data`.
inline std::vector<SweepResult> scaling_sweep(const LatentTensor& data,
                                              std::span<const std::size_t> token_lengths,
                                              double threshold, std::span<const std::size_t> grid,
                                              const TrainConfig& cfg) {
  std::vector<SweepResult> out;
  for (std::size_t b : token_lengths) {
    const auto spec = GroupSpec::channel(data.shape(), b);
    out.push_back({b, min_codebook_search(reshape_to_groups(data, spec), threshold, grid, cfg)});
  }
  return out;
}

/// Points of a sweep that found a passing codebook size.
inline std::vector<ScalingPoint> sweep_points(const std::vector<SweepResult>& sweep) {
  std::vector<ScalingPoint> pts;
  for (const auto& s : sweep) {
    if (s.search.codes) {
      pts.push_back({static_cast<double>(s.tokens), static_cast<double>(*s.search.codes)});
    }
  }
  return pts;
}

}  // namespace revq
