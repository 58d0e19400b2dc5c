// SPDX-License-Identifier: Apache-2.0
//
// Multi-group nearest-neighbour quantization, non-activation reset and the
// RVQC codebook checkpoint format.

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "revq/binary_io.hpp"
#include "revq/core.hpp"
#include "revq/parallel.hpp"

namespace revq {

/// B independent codebooks of N codes x d dims plus per-code activation
/// counters. A single codebook shared by every group models the
/// single-group quantizer.
template <std::floating_point T>
class BasicMultiCodebook {
 public:
  BasicMultiCodebook() = default;
  BasicMultiCodebook(std::size_t codebooks, std::size_t codes, std::size_t dim)
      : codebooks_(codebooks),
        codes_(codes),
        dim_(dim),
        entries_(codebooks * codes * dim, T{0}),
        counts_(codebooks * codes, 0) {
    if (codebooks == 0 || codes == 0 || dim == 0) {
      throw ConfigError("codebook dimensions must be positive");
    }
  }

  std::size_t num_codebooks() const { return codebooks_; }
  std::size_t codes_per_group() const { return codes_; }
  std::size_t dim() const { return dim_; }

  /// Codebook used for token group `g` (0 when shared).
  std::size_t codebook_for(std::size_t g) const { return codebooks_ == 1 ? 0 : g; }

  std::span<T> entries() { return entries_; }
  std::span<const T> entries() const { return entries_; }
  std::span<T> codebook(std::size_t g) {
    return std::span<T>(entries_).subspan(g * codes_ * dim_, codes_ * dim_);
  }
  std::span<const T> codebook(std::size_t g) const {
    return std::span<const T>(entries_).subspan(g * codes_ * dim_, codes_ * dim_);
  }
  std::span<T> code(std::size_t g, std::size_t i) { return codebook(g).subspan(i * dim_, dim_); }
  std::span<const T> code(std::size_t g, std::size_t i) const {
    return codebook(g).subspan(i * dim_, dim_);
  }

  std::span<std::uint64_t> counts() { return counts_; }
  std::span<const std::uint64_t> counts() const { return counts_; }
  std::span<std::uint64_t> counts(std::size_t g) {
    return std::span<std::uint64_t>(counts_).subspan(g * codes_, codes_);
  }
  std::span<const std::uint64_t> counts(std::size_t g) const {
    return std::span<const std::uint64_t>(counts_).subspan(g * codes_, codes_);
  }
  void clear_counts() { std::fill(counts_.begin(), counts_.end(), 0); }

  /// Throws unless this codebook can quantize `tokens` groups of `dim`.
  void check_compatible(std::size_t tokens, std::size_t dim) const {
    if (dim != dim_) {
      throw ConfigError("group dim " + std::to_string(dim) + " != codebook dim " +
                        std::to_string(dim_));
    }
    if (codebooks_ != 1 && codebooks_ != tokens) {
      throw ConfigError(std::to_string(tokens) + " token groups cannot use " +
                        std::to_string(codebooks_) + " codebooks");
    }
  }

  friend bool operator==(const BasicMultiCodebook&, const BasicMultiCodebook&) = default;

 private:
  std::size_t codebooks_ = 0;
  std::size_t codes_ = 0;
  std::size_t dim_ = 0;
  std::vector<T> entries_;
  std::vector<std::uint64_t> counts_;
};

using MultiCodebook = BasicMultiCodebook<float>;

struct Assignment {
  std::size_t index = 0;
  double sq_dist = 0.0;
};

template <std::floating_point T>
double squared_distance(std::span<const T> a, std::span<const T> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += diff * diff;
  }
  return acc;
}

/// Nearest code under squared Euclidean distance; ties go to the lowest index.
template <std::floating_point T>
Assignment quantize_vector(std::span<const T> z, std::span<const T> codebook, std::size_t dim) {
  if (dim == 0 || codebook.empty()) throw ConfigError("empty codebook");
  if (z.size() != dim || codebook.size() % dim != 0) {
    throw ConfigError("vector dim " + std::to_string(z.size()) + " does not match codebook dim " +
                      std::to_string(dim));
  }
  Assignment best{0, std::numeric_limits<double>::infinity()};
  const std::size_t n = codebook.size() / dim;
  for (std::size_t j = 0; j < n; ++j) {
    const double d = squared_distance<T>(z, codebook.subspan(j * dim, dim));
    if (d < best.sq_dist) best = {j, d};
  }
  return best;
}

template <std::floating_point T>
struct QuantizationResult {
  std::vector<std::uint32_t> indices;  // batch x B
  TokenBatch<T> quantized;             // group view of Z_q
  std::vector<double> sq_error;        // per sample, summed over groups

  double mean_sq_error() const {
    if (sq_error.empty()) return 0.0;
    double s = 0.0;
    for (double e : sq_error) s += e;
    return s / static_cast<double>(sq_error.size());
  }
};

/// Quantizes every group against its own codebook. When `counts` is
/// non-empty it receives one increment per assignment (layout B' x N, where
/// B' is the number of codebooks). Results do not depend on the worker count.
template <std::floating_point T>
QuantizationResult<T> quantize_groups(const TokenBatch<T>& groups, const BasicMultiCodebook<T>& cb,
                                      std::span<std::uint64_t> counts = {}) {
  cb.check_compatible(groups.tokens, groups.dim);
  if (!counts.empty() && counts.size() != cb.counts().size()) {
    throw ConfigError("count buffer does not match codebook");
  }
  QuantizationResult<T> res;
  res.indices.assign(groups.rows(), 0);
  res.quantized = TokenBatch<T>(groups.batch, groups.tokens, groups.dim);
  res.sq_error.assign(groups.batch, 0.0);

  const std::size_t workers = worker_count();
  std::vector<std::vector<std::uint64_t>> local(
      counts.empty() ? 0 : workers, std::vector<std::uint64_t>(counts.size(), 0));

  parallel_chunks(groups.batch, 64, workers, [&](std::size_t w, std::size_t begin, std::size_t end) {
    for (std::size_t n = begin; n < end; ++n) {
      double err = 0.0;
      for (std::size_t g = 0; g < groups.tokens; ++g) {
        const std::size_t book = cb.codebook_for(g);
        const auto a = quantize_vector<T>(groups.token(n, g), cb.codebook(book), cb.dim());
        res.indices[n * groups.tokens + g] = static_cast<std::uint32_t>(a.index);
        const auto code = cb.code(book, a.index);
        std::copy(code.begin(), code.end(), res.quantized.token(n, g).begin());
        err += a.sq_dist;
        if (!local.empty()) ++local[w][book * cb.codes_per_group() + a.index];
      }
      res.sq_error[n] = err;
    }
  });
  for (const auto& l : local) {
    for (std::size_t i = 0; i < l.size(); ++i) counts[i] += l[i];
  }
  return res;
}

/// Quantizes a latent batch, incrementing the codebook's activation counters.
inline QuantizationResult<float> quantize_batch(const LatentTensor& z, MultiCodebook& cb,
                                                const GroupSpec& spec) {
  const auto groups = reshape_to_groups(z, spec);
  return quantize_groups<float>(groups, cb, cb.counts());
}

struct Utilization {
  std::vector<double> per_codebook;
  double overall = 0.0;
  double min_group = 0.0;
};

/// Fraction of codes with a non-zero count, per codebook and overall.
inline Utilization utilization(std::span<const std::uint64_t> counts, std::size_t codes_per_group) {
  Utilization u;
  if (codes_per_group == 0 || counts.empty()) return u;
  const std::size_t books = counts.size() / codes_per_group;
  std::size_t active_total = 0;
  u.min_group = 1.0;
  for (std::size_t g = 0; g < books; ++g) {
    std::size_t active = 0;
    for (std::size_t i = 0; i < codes_per_group; ++i) active += counts[g * codes_per_group + i] > 0;
    active_total += active;
    const double frac = static_cast<double>(active) / static_cast<double>(codes_per_group);
    u.per_codebook.push_back(frac);
    u.min_group = std::min(u.min_group, frac);
  }
  u.overall = static_cast<double>(active_total) / static_cast<double>(counts.size());
  return u;
}

template <std::floating_point T>
Utilization utilization(const BasicMultiCodebook<T>& cb) {
  return utilization(cb.counts(), cb.codes_per_group());
}

/// Non-activation reset of codebook `g` from its current counters.
///
/// Codes are ranked by ascending count (stable, so ties keep index order).
/// The r never-activated codes at ranks 1..r are moved onto the codes at
/// ranks N..N+1-r plus i.i.d. Gaussian noise of std `epsilon_sigma`,
/// truncated at 3 sigma per coordinate so a reset code always lies within
/// 3 sigma sqrt(d) of its source. r is
/// clamped to floor(N/2) so no source is itself overwritten. Counters are
/// left untouched. Returns the number of codes reset.
template <std::floating_point T>
std::size_t reset_codebook(BasicMultiCodebook<T>& cb, std::size_t g, double epsilon_sigma,
                           std::mt19937_64& rng, std::vector<std::size_t>* reset_indices = nullptr) {
  const std::size_t n = cb.codes_per_group();
  const auto counts = cb.counts(g);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return counts[a] < counts[b]; });
  std::size_t r = 0;
  while (r < n && counts[order[r]] == 0) ++r;
  if (r > n / 2) {
    std::cerr << "revq: codebook " << g << " has " << r << " inactive codes, resetting " << n / 2
              << "\n";
    r = n / 2;
  }
  std::normal_distribution<double> noise(0.0, epsilon_sigma);
  for (std::size_t u = 0; u < r; ++u) {
    const auto src = cb.code(g, order[n - 1 - u]);
    auto dst = cb.code(g, order[u]);
    for (std::size_t k = 0; k < cb.dim(); ++k) {
      double eps = 0.0;
      if (epsilon_sigma > 0) {
        do eps = noise(rng);
        while (std::abs(eps) > 3.0 * epsilon_sigma);
      }
      dst[k] = static_cast<T>(static_cast<double>(src[k]) + eps);
    }
    if (reset_indices) reset_indices->push_back(order[u]);
  }
  return r;
}

/// Initializes each codebook from randomly drawn group vectors of `groups`.
/// Draws without replacement when enough candidates exist, otherwise with
/// replacement. A shared codebook draws from every (sample, group) pair.
template <std::floating_point T>
void sample_init(BasicMultiCodebook<T>& cb, const TokenBatch<T>& groups, std::uint64_t seed) {
  if (groups.batch == 0) throw ConfigError("cannot initialize a codebook from an empty dataset");
  cb.check_compatible(groups.tokens, groups.dim);
  std::mt19937_64 rng(seed);
  const std::size_t n = cb.codes_per_group();
  const bool shared = cb.num_codebooks() == 1 && groups.tokens > 1;
  for (std::size_t book = 0; book < cb.num_codebooks(); ++book) {
    const std::size_t pool = shared ? groups.rows() : groups.batch;
    std::vector<std::size_t> picks;
    if (pool >= n) {
      std::vector<std::size_t> all(pool);
      std::iota(all.begin(), all.end(), std::size_t{0});
      std::shuffle(all.begin(), all.end(), rng);
      picks.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n));
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, pool - 1);
      for (std::size_t i = 0; i < n; ++i) picks.push_back(pick(rng));
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto src = shared ? groups.row(picks[i]) : groups.token(picks[i], book);
      std::copy(src.begin(), src.end(), cb.code(book, i).begin());
    }
  }
}

/// Initializes every entry i.i.d. from N(mean, std^2).
template <std::floating_point T>
void gaussian_init(BasicMultiCodebook<T>& cb, double mean, double std, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(mean, std);
  for (auto& v : cb.entries()) v = static_cast<T>(dist(rng));
}

// ---------------------------------------------------------------------------
// RVQC checkpoint: "RVQC", version u32, B u32, N u32, d u32,
// B*N*d f32 entries, B*N u64 counts. All little-endian.

inline constexpr std::uint32_t kCodebookFormatVersion = 1;

inline std::vector<char> encode_codebook(const MultiCodebook& cb) {
  binary::Writer w;
  w.magic("RVQC");
  w.u32(kCodebookFormatVersion);
  w.u32(static_cast<std::uint32_t>(cb.num_codebooks()));
  w.u32(static_cast<std::uint32_t>(cb.codes_per_group()));
  w.u32(static_cast<std::uint32_t>(cb.dim()));
  for (float v : cb.entries()) w.f32(v);
  for (auto c : cb.counts()) w.u64(c);
  return w.bytes();
}

inline MultiCodebook decode_codebook(const std::vector<char>& bytes, const std::string& context) {
  binary::Reader r(bytes, context);
  r.expect_magic("RVQC");
  r.expect_version(kCodebookFormatVersion);
  const std::size_t books = r.u32(), codes = r.u32(), dim = r.u32();
  if (books == 0 || codes == 0 || dim == 0) {
    throw FormatError(FormatErrorKind::Truncated, context + ": zero codebook dimension");
  }
  // Division keeps corrupt headers from overflowing the size computation.
  const std::uint64_t rows = std::uint64_t{books} * codes;
  if (rows > r.remaining() / 8 || dim > (r.remaining() - rows * 8) / 4 / rows) {
    throw FormatError(FormatErrorKind::Truncated,
                      context + ": header promises " + std::to_string(books) + "x" + std::to_string(codes) +
                          "x" + std::to_string(dim) + " entries, file has " + std::to_string(bytes.size()) +
                          " bytes");
  }
  MultiCodebook cb(books, codes, dim);
  for (auto& v : cb.entries()) {
    v = r.f32();
    if (!std::isfinite(v)) throw FormatError(FormatErrorKind::NonFinite, context + ": codebook entry");
  }
  for (auto& c : cb.counts()) c = r.u64();
  return cb;
}

inline void write_codebook(const std::string& path, const MultiCodebook& cb) {
  binary::save_file(path, encode_codebook(cb));
}

inline MultiCodebook read_codebook(const std::string& path) {
  return decode_codebook(binary::load_file(path), path);
}

}  // namespace revq
