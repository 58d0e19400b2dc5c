// SPDX-License-Identifier: Apache-2.0
//
// Latent ingestion (RVQL files), dataset standardization and the synthetic
// generators used by the toy experiments and tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "revq/binary_io.hpp"
#include "revq/core.hpp"

namespace revq {

// ---------------------------------------------------------------------------
// RVQL: "RVQL", version u32, num_samples u64, H u32, W u32, D u32, then
// num_samples * H*W*D little-endian f32.

inline constexpr std::uint32_t kLatentFormatVersion = 1;

inline std::vector<char> encode_latents(const LatentTensor& z) {
  binary::Writer w;
  w.magic("RVQL");
  w.u32(kLatentFormatVersion);
  w.u64(z.batch());
  w.u32(z.shape().height);
  w.u32(z.shape().width);
  w.u32(z.shape().channels);
  for (float v : z.data()) w.f32(v);
  return w.bytes();
}

inline LatentTensor decode_latents(const std::vector<char>& bytes, const std::string& context) {
  binary::Reader r(bytes, context);
  r.expect_magic("RVQL");
  r.expect_version(kLatentFormatVersion);
  const std::uint64_t n = r.u64();
  LatentShape shape;
  shape.height = r.u32();
  shape.width = r.u32();
  shape.channels = r.u32();
  const std::uint64_t per_sample = shape.size() * 4;
  if (per_sample > 0 && n > r.remaining() / per_sample) {
    throw FormatError(FormatErrorKind::Truncated,
                      context + ": expected " + std::to_string(r.position() + n * per_sample) +
                          " bytes, file has " + std::to_string(bytes.size()));
  }
  std::vector<float> data(n * shape.size());
  for (auto& v : data) {
    v = r.f32();
    if (!std::isfinite(v)) {
      throw FormatError(FormatErrorKind::NonFinite,
                        context + ": non-finite scalar at payload index " +
                            std::to_string(&v - data.data()));
    }
  }
  return LatentTensor(shape, n, std::move(data));
}

inline void write_latents(const std::string& path, const LatentTensor& z) {
  binary::save_file(path, encode_latents(z));
}

inline LatentTensor read_latents(const std::string& path) {
  return decode_latents(binary::load_file(path), path);
}

// ---------------------------------------------------------------------------
// Standardization

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;
  friend bool operator==(const NormStats&, const NormStats&) = default;
};

inline constexpr double kStdFloor = 1e-6;

/// Per-feature mean and population standard deviation over the dataset.
inline NormStats compute_normalization(const LatentTensor& z) {
  if (z.batch() < 2) throw ConfigError("normalization needs at least 2 samples");
  const std::size_t dim = z.sample_size();
  NormStats s{std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0)};
  for (std::size_t n = 0; n < z.batch(); ++n) {
    const auto x = z.sample(n);
    for (std::size_t i = 0; i < dim; ++i) s.mean[i] += x[i];
  }
  const double inv = 1.0 / static_cast<double>(z.batch());
  for (auto& m : s.mean) m *= inv;
  for (std::size_t n = 0; n < z.batch(); ++n) {
    const auto x = z.sample(n);
    for (std::size_t i = 0; i < dim; ++i) {
      const double d = x[i] - s.mean[i];
      s.std[i] += d * d;
    }
  }
  for (auto& v : s.std) v = std::max(std::sqrt(v * inv), kStdFloor);
  return s;
}

inline LatentTensor normalize(const LatentTensor& z, const NormStats& s) {
  if (s.mean.size() != z.sample_size() || s.std.size() != z.sample_size()) {
    throw ConfigError("normalization stats do not match latent size");
  }
  LatentTensor out = z;
  for (std::size_t n = 0; n < z.batch(); ++n) {
    auto x = out.sample(n);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = static_cast<float>((static_cast<double>(x[i]) - s.mean[i]) / s.std[i]);
    }
  }
  return out;
}

inline LatentTensor denormalize(const LatentTensor& z, const NormStats& s) {
  if (s.mean.size() != z.sample_size() || s.std.size() != z.sample_size()) {
    throw ConfigError("normalization stats do not match latent size");
  }
  LatentTensor out = z;
  for (std::size_t n = 0; n < z.batch(); ++n) {
    auto x = out.sample(n);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = static_cast<float>(static_cast<double>(x[i]) * s.std[i] + s.mean[i]);
    }
  }
  return out;
}

inline void write_norm_stats(const std::string& path, const NormStats& s) {
  nlohmann::json j{{"mean", s.mean}, {"std", s.std}};
  std::ofstream os(path);
  if (!os) throw FormatError(FormatErrorKind::Io, "cannot open '" + path + "' for writing");
  os << j.dump() << "\n";
}

inline NormStats read_norm_stats(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError(FormatErrorKind::Io, "cannot open '" + path + "'");
  try {
    const auto j = nlohmann::json::parse(is);
    return {j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::Truncated, path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Synthetic data

enum class ToyKind { SymmetricPairs, Clusters };

struct ToyOptions {
  std::size_t clusters = 64;   // Clusters: number of blobs
  double spacing = 1.0;        // Clusters: grid pitch between blob centres
  double blob_std = 0.05;      // Clusters: per-coordinate blob std
  double pair_noise = 0.1;     // SymmetricPairs: per-coordinate jitter
};

/// 2-D toy data (H = W = 1, D = 2).
///
/// SymmetricPairs: x and y are drawn independently around two different
/// centre sets, {-2, 0, 2} for x and {-1, 1, 3} for y. A codebook shared by
/// both coordinates has to cover all six values, one per coordinate only
/// three.
///
/// Clusters: `clusters` Gaussian blobs on a centred square grid, samples
/// assigned round-robin.
inline LatentTensor gen_toy2d(ToyKind kind, std::size_t n, std::uint64_t seed,
                              const ToyOptions& opt = {}) {
  if (n == 0) throw ConfigError("toy dataset needs at least one sample");
  std::mt19937_64 rng(seed);
  std::vector<float> data(2 * n);
  if (kind == ToyKind::SymmetricPairs) {
    static constexpr double xs[] = {-2.0, 0.0, 2.0};
    static constexpr double ys[] = {-1.0, 1.0, 3.0};
    std::uniform_int_distribution<int> pick(0, 2);
    std::normal_distribution<double> jitter(0.0, opt.pair_noise);
    for (std::size_t i = 0; i < n; ++i) {
      const double x = xs[pick(rng)] + jitter(rng);
      const double y = ys[pick(rng)] + jitter(rng);
      data[2 * i] = static_cast<float>(x);
      data[2 * i + 1] = static_cast<float>(y);
    }
  } else {
    if (opt.clusters == 0) throw ConfigError("cluster count must be positive");
    const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(opt.clusters))));
    const double half = 0.5 * static_cast<double>(side - 1);
    std::normal_distribution<double> blob(0.0, opt.blob_std);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = i % opt.clusters;
      const double cx = (static_cast<double>(c % side) - half) * opt.spacing;
      const double cy = (static_cast<double>(c / side) - half) * opt.spacing;
      data[2 * i] = static_cast<float>(cx + blob(rng));
      data[2 * i + 1] = static_cast<float>(cy + blob(rng));
    }
  }
  return LatentTensor({1, 1, 2}, n, std::move(data));
}

/// Centres of the Clusters generator, in generator order.
inline std::vector<std::pair<double, double>> toy_cluster_centers(const ToyOptions& opt) {
  const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(opt.clusters))));
  const double half = 0.5 * static_cast<double>(side - 1);
  std::vector<std::pair<double, double>> out;
  for (std::size_t c = 0; c < opt.clusters; ++c) {
    out.emplace_back((static_cast<double>(c % side) - half) * opt.spacing,
                     (static_cast<double>(c / side) - half) * opt.spacing);
  }
  return out;
}

/// Samples around `clusters` random corners of the {-1, +1}^dim hypercube.
/// Any group of d coordinates sees at most min(2^d, clusters) distinct
/// centres, so the codebook size needed for a fixed error grows as groups
/// get wider.
inline LatentTensor gen_corner_clusters(std::size_t n, std::uint32_t dim, std::size_t clusters,
                                        double noise_std, std::uint64_t seed) {
  if (n == 0 || dim == 0 || clusters == 0) throw ConfigError("corner clusters: empty request");
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::vector<float> centers(clusters * dim);
  for (auto& c : centers) c = coin(rng) ? 1.0f : -1.0f;
  std::normal_distribution<double> noise(0.0, noise_std);
  std::vector<float> data(n * dim);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % clusters;
    for (std::size_t k = 0; k < dim; ++k) {
      data[i * dim + k] = static_cast<float>(centers[c * dim + k] + noise(rng));
    }
  }
  return LatentTensor({1, 1, dim}, n, std::move(data));
}

/// Element-wise i.i.d. N(0, variance) perturbation.
inline LatentTensor add_gaussian_noise(const LatentTensor& z, double variance, std::uint64_t seed) {
  if (variance < 0) throw ConfigError("noise variance must be non-negative");
  LatentTensor out = z;
  if (variance == 0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, std::sqrt(variance));
  for (auto& v : out.data()) v = static_cast<float>(static_cast<double>(v) + noise(rng));
  return out;
}

}  // namespace revq
