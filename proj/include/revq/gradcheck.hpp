// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference verification of the rectifier's analytic
// gradients under the latent l2 objective.

#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "revq/loss.hpp"
#include "revq/rectifier.hpp"

namespace revq {

/// Gradients of the objective, one vector per rectifier parameter (in
/// parameters() order) plus the gradient wrt the rectifier input.
template <std::floating_point T>
struct GradientSet {
  std::vector<std::vector<T>> params;
  std::vector<T> input;
};

template <std::floating_point T>
GradientSet<T> analytic_gradients(BasicRectifier<T>& rect, const TokenBatch<T>& input,
                                  const TokenBatch<T>& target) {
  rect.zero_grad();
  const auto out = rect.forward(input);
  const auto loss = revq_loss(target, out);
  const auto din = rect.backward(loss.grad);
  GradientSet<T> g;
  for (const auto* p : rect.parameters()) g.params.push_back(p->grad);
  g.input = din.values;
  return g;
}

template <std::floating_point T>
GradientSet<T> numeric_gradients(BasicRectifier<T>& rect, const TokenBatch<T>& input,
                                 const TokenBatch<T>& target, double step) {
  auto objective = [&](const TokenBatch<T>& x) { return revq_loss(target, rect.apply(x)).value; };
  GradientSet<T> g;
  for (auto* p : rect.parameters()) {
    std::vector<T> grad(p->size());
    for (std::size_t i = 0; i < p->size(); ++i) {
      const T saved = p->value[i];
      p->value[i] = static_cast<T>(saved + step);
      const double up = objective(input);
      p->value[i] = static_cast<T>(saved - step);
      const double down = objective(input);
      p->value[i] = saved;
      grad[i] = static_cast<T>((up - down) / (2.0 * step));
    }
    g.params.push_back(std::move(grad));
  }
  TokenBatch<T> x = input;
  g.input.resize(x.values.size());
  for (std::size_t i = 0; i < x.values.size(); ++i) {
    const T saved = x.values[i];
    x.values[i] = static_cast<T>(saved + step);
    const double up = objective(x);
    x.values[i] = static_cast<T>(saved - step);
    const double down = objective(x);
    x.values[i] = saved;
    g.input[i] = static_cast<T>((up - down) / (2.0 * step));
  }
  return g;
}

struct GradientMismatch {
  std::string tensor;  // parameter name path or "input"
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradientReport {
  double max_rel_error = 0.0;
  GradientMismatch worst;
  std::vector<GradientMismatch> failures;
  std::size_t checked = 0;
  bool passed = true;
};

struct GradientCheckOptions {
  double tolerance = 1e-3;
  double step = 1e-5;
  double floor = 1e-6;  // denominator floor for near-zero gradients
};

inline double relative_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

template <std::floating_point T>
GradientReport compare_gradients(const std::vector<std::string>& names, const GradientSet<T>& analytic,
                                 const GradientSet<T>& numeric, const GradientCheckOptions& opt) {
  GradientReport rep;
  auto visit = [&](const std::string& name, const std::vector<T>& a, const std::vector<T>& n) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double e = relative_error(a[i], n[i], opt.floor);
      ++rep.checked;
      GradientMismatch m{name, i, static_cast<double>(a[i]), static_cast<double>(n[i]), e};
      if (rep.checked == 1 || e > rep.max_rel_error) {
        rep.max_rel_error = e;
        rep.worst = m;
      }
      if (!(e < opt.tolerance)) {
        rep.passed = false;
        rep.failures.push_back(m);
      }
    }
  };
  for (std::size_t p = 0; p < analytic.params.size(); ++p) {
    visit(names.at(p), analytic.params[p], numeric.params.at(p));
  }
  visit("input", analytic.input, numeric.input);
  return rep;
}

/// Parameter names made unique by their position, e.g. "3:weight".
template <std::floating_point T>
std::vector<std::string> parameter_names(const BasicRectifier<T>& rect) {
  std::vector<std::string> names;
  std::size_t i = 0;
  for (const auto* p : rect.parameters()) names.push_back(std::to_string(i++) + ":" + p->name);
  return names;
}

template <std::floating_point T>
GradientReport gradient_check(BasicRectifier<T>& rect, const TokenBatch<T>& input,
                              const TokenBatch<T>& target, const GradientCheckOptions& opt = {}) {
  const auto analytic = analytic_gradients(rect, input, target);
  const auto numeric = numeric_gradients(rect, input, target, opt.step);
  return compare_gradients(parameter_names(rect), analytic, numeric, opt);
}

}  // namespace revq
