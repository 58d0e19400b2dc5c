// SPDX-License-Identifier: Apache-2.0
//
// AdamW with decoupled weight decay, a row-sparse variant for codebooks and
// the exponential learning-rate schedule.

#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <vector>

#include "revq/core.hpp"

namespace revq {

struct AdamHyper {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <std::floating_point T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  std::uint64_t step = 0;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, T{0}), v(n, T{0}) {}
};

namespace detail {

template <std::floating_point T>
void adam_update(T& p, T g, T& m, T& v, std::uint64_t step, const AdamHyper& h) {
  double pd = static_cast<double>(p);
  pd -= h.lr * h.weight_decay * pd;
  const double gd = static_cast<double>(g);
  const double md = h.beta1 * static_cast<double>(m) + (1.0 - h.beta1) * gd;
  const double vd = h.beta2 * static_cast<double>(v) + (1.0 - h.beta2) * gd * gd;
  m = static_cast<T>(md);
  v = static_cast<T>(vd);
  const double t = static_cast<double>(step);
  const double mhat = md / (1.0 - std::pow(h.beta1, t));
  const double vhat = vd / (1.0 - std::pow(h.beta2, t));
  pd -= h.lr * mhat / (std::sqrt(vhat) + h.epsilon);
  p = static_cast<T>(pd);
}

}  // namespace detail

/// One AdamW step: p <- p - lr*wd*p, then the bias-corrected Adam update.
template <std::floating_point T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state,
               const AdamHyper& h) {
  if (params.size() != grads.size() || state.m.size() != params.size()) {
    throw ConfigError("adam: parameter, gradient and moment sizes differ");
  }
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    detail::adam_update(params[i], grads[i], state.m[i], state.v[i], state.step, h);
  }
}

/// Per-row Adam state for codebooks: rows are only stepped when active, so a
/// code with no assignment keeps its value and moments bit-for-bit.
template <std::floating_point T>
struct RowAdamState {
  std::size_t row_dim = 0;
  std::vector<T> m;
  std::vector<T> v;
  std::vector<std::uint64_t> steps;

  RowAdamState() = default;
  RowAdamState(std::size_t rows, std::size_t dim)
      : row_dim(dim), m(rows * dim, T{0}), v(rows * dim, T{0}), steps(rows, 0) {}

  void reset_row(std::size_t r) {
    steps[r] = 0;
    std::fill(m.begin() + static_cast<std::ptrdiff_t>(r * row_dim),
              m.begin() + static_cast<std::ptrdiff_t>((r + 1) * row_dim), T{0});
    std::fill(v.begin() + static_cast<std::ptrdiff_t>(r * row_dim),
              v.begin() + static_cast<std::ptrdiff_t>((r + 1) * row_dim), T{0});
  }
};

template <std::floating_point T>
void adam_step_rows(std::span<T> params, std::span<const T> grads,
                    std::span<const std::uint8_t> active, RowAdamState<T>& state,
                    const AdamHyper& h) {
  if (params.size() != grads.size() || state.m.size() != params.size() ||
      active.size() * state.row_dim != params.size()) {
    throw ConfigError("adam: row layout mismatch");
  }
  for (std::size_t r = 0; r < active.size(); ++r) {
    if (!active[r]) continue;
    const std::uint64_t step = ++state.steps[r];
    for (std::size_t i = r * state.row_dim; i < (r + 1) * state.row_dim; ++i) {
      detail::adam_update(params[i], grads[i], state.m[i], state.v[i], step, h);
    }
  }
}

/// Exponential decay: multiplier(epoch) = gamma^epoch.
struct ExponentialSchedule {
  double gamma = 1.0;

  double multiplier(std::size_t epoch) const {
    return std::pow(gamma, static_cast<double>(epoch));
  }

  /// Gamma that takes `base` to `final_lr` at the last of `epochs` epochs.
  static ExponentialSchedule spanning(double base, double final_lr, std::size_t epochs) {
    if (epochs <= 1 || base <= 0 || final_lr <= 0) return {1.0};
    return {std::pow(final_lr / base, 1.0 / static_cast<double>(epochs - 1))};
  }
};

}  // namespace revq
