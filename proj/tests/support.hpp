// SPDX-License-Identifier: Apache-2.0
//
// Hand-rolled random generators and small helpers shared by the test files.

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "revq/revq.hpp"

namespace revq::testing {

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  double normal(double mean = 0.0, double std = 1.0) { return std::normal_distribution<double>(mean, std)(rng_); }
  std::size_t index(std::size_t lo, std::size_t hi) {  // inclusive
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }
  bool coin() { return index(0, 1) == 1; }

  std::vector<float> floats(std::size_t n, double lo = -2.0, double hi = 2.0) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(uniform(lo, hi));
    return v;
  }
  std::vector<double> doubles(std::size_t n, double lo = -2.0, double hi = 2.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = uniform(lo, hi);
    return v;
  }

  LatentTensor latents(LatentShape shape, std::size_t batch) {
    return LatentTensor(shape, batch, floats(batch * shape.size()));
  }

  template <std::floating_point T>
  TokenBatch<T> tokens(std::size_t batch, std::size_t t, std::size_t d, double lo = -1.0, double hi = 1.0) {
    TokenBatch<T> out(batch, t, d);
    for (auto& x : out.values) x = static_cast<T>(uniform(lo, hi));
    return out;
  }

  MultiCodebook codebook(std::size_t books, std::size_t codes, std::size_t dim) {
    MultiCodebook cb(books, codes, dim);
    for (auto& v : cb.entries()) v = static_cast<float>(uniform(-2.0, 2.0));
    for (auto& c : cb.counts()) c = index(0, 5);
    return cb;
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

/// Divisors of n in ascending order.
inline std::vector<std::size_t> divisors(std::size_t n) {
  std::vector<std::size_t> out;
  for (std::size_t k = 1; k <= n; ++k) {
    if (n % k == 0) out.push_back(k);
  }
  return out;
}

/// A small random rectifier of either architecture.
template <std::floating_point T>
BasicRectifier<T> random_rectifier(Gen& g, std::size_t tokens, std::size_t dim, bool attention,
                                   std::uint64_t seed) {
  RectifierOptions opt;
  opt.arch = attention ? RectifierArch::Attention : RectifierArch::Mlp;
  opt.layers = g.index(1, 2);
  opt.hidden = g.index(2, 6);
  opt.head_dim = g.index(1, 4);
  opt.activation = static_cast<Activation>(g.index(0, 2));
  opt.seed = seed;
  auto rect = make_rectifier<T>(tokens, dim, opt);
  // Perturb every parameter so biases and norm scales are not at their
  // special initial values.
  for (auto* p : rect.parameters()) {
    for (auto& v : p->value) v = static_cast<T>(static_cast<double>(v) + g.uniform(-0.3, 0.3));
  }
  return rect;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
  static std::uint64_t counter = 0;
  const auto base = std::filesystem::temp_directory_path() /
                    ("revq_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::remove_all(base);
  std::filesystem::create_directories(base);
  return base;
}

}  // namespace revq::testing
