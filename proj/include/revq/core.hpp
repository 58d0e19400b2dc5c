// SPDX-License-Identifier: Apache-2.0
//
// Shared domain types: latent tensors, token-group layouts and the error
// hierarchy used across the library.

#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace revq {

/// Invalid shapes, hyperparameters or mismatched components.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An operation was called out of order (e.g. backward before forward).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class FormatErrorKind { BadMagic, UnsupportedVersion, Truncated, NonFinite, Io };

inline const char* to_string(FormatErrorKind kind) {
  switch (kind) {
    case FormatErrorKind::BadMagic: return "bad magic";
    case FormatErrorKind::UnsupportedVersion: return "unsupported version";
    case FormatErrorKind::Truncated: return "truncated";
    case FormatErrorKind::NonFinite: return "non-finite payload";
    case FormatErrorKind::Io: return "i/o error";
  }
  return "unknown";
}

/// Failure while reading or writing one of the binary/JSON file formats.
class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  FormatErrorKind kind() const noexcept { return kind_; }

 private:
  FormatErrorKind kind_;
};

/// Logical (H, W, D) layout of one latent sample, stored row-major.
struct LatentShape {
  std::uint32_t height = 1;
  std::uint32_t width = 1;
  std::uint32_t channels = 1;

  std::size_t positions() const { return std::size_t{height} * width; }
  std::size_t size() const { return positions() * channels; }
  friend bool operator==(const LatentShape&, const LatentShape&) = default;
};

inline std::string to_string(const LatentShape& s) {
  return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.channels);
}

/// A batch of continuous latent samples. Scalars are always finite.
class LatentTensor {
 public:
  LatentTensor() = default;

  LatentTensor(LatentShape shape, std::size_t batch)
      : shape_(shape), batch_(batch), data_(batch * shape.size(), 0.0f) {}

  LatentTensor(LatentShape shape, std::size_t batch, std::vector<float> data)
      : shape_(shape), batch_(batch), data_(std::move(data)) {
    if (data_.size() != batch_ * shape_.size()) {
      throw ConfigError("latent data length " + std::to_string(data_.size()) + " != batch " +
                        std::to_string(batch_) + " x " + to_string(shape_));
    }
    for (float v : data_) {
      if (!std::isfinite(v)) throw ConfigError("latent data contains a non-finite value");
    }
  }

  const LatentShape& shape() const { return shape_; }
  std::size_t batch() const { return batch_; }
  std::size_t sample_size() const { return shape_.size(); }

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }

  std::span<const float> sample(std::size_t i) const {
    return std::span<const float>(data_).subspan(i * sample_size(), sample_size());
  }
  std::span<float> sample(std::size_t i) {
    return std::span<float>(data_).subspan(i * sample_size(), sample_size());
  }

  /// Same scalars under a different logical shape of equal size.
  LatentTensor reshaped(LatentShape shape) const {
    if (shape.size() != shape_.size()) {
      throw ConfigError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    LatentTensor out = *this;
    out.shape_ = shape;
    return out;
  }

  friend bool operator==(const LatentTensor&, const LatentTensor&) = default;

 private:
  LatentShape shape_{};
  std::size_t batch_ = 0;
  std::vector<float> data_;
};

/// Dense batch x tokens x dim block of token vectors.
template <std::floating_point T>
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t tokens = 0;
  std::size_t dim = 0;
  std::vector<T> values;

  TokenBatch() = default;
  TokenBatch(std::size_t b, std::size_t t, std::size_t d, T fill = T{0})
      : batch(b), tokens(t), dim(d), values(b * t * d, fill) {}

  std::size_t rows() const { return batch * tokens; }
  bool same_layout(const TokenBatch& o) const {
    return batch == o.batch && tokens == o.tokens && dim == o.dim;
  }

  std::span<T> row(std::size_t r) { return std::span<T>(values).subspan(r * dim, dim); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(values).subspan(r * dim, dim);
  }
  std::span<T> token(std::size_t sample, std::size_t t) { return row(sample * tokens + t); }
  std::span<const T> token(std::size_t sample, std::size_t t) const {
    return row(sample * tokens + t);
  }
  std::span<const T> sample(std::size_t s) const {
    return std::span<const T>(values).subspan(s * tokens * dim, tokens * dim);
  }
  std::span<T> sample(std::size_t s) {
    return std::span<T>(values).subspan(s * tokens * dim, tokens * dim);
  }

  template <std::floating_point U>
  TokenBatch<U> cast() const {
    TokenBatch<U> out(batch, tokens, dim);
    for (std::size_t i = 0; i < values.size(); ++i) out.values[i] = static_cast<U>(values[i]);
    return out;
  }

  friend bool operator==(const TokenBatch&, const TokenBatch&) = default;
};

enum class SplitAxis { Spatial, Channel };

inline const char* to_string(SplitAxis axis) {
  return axis == SplitAxis::Spatial ? "spatial" : "channel";
}

/// How one latent sample is cut into B token groups of d scalars each.
///
/// Spatial: group i holds S/B consecutive spatial positions (all channels).
/// Channel: the D channels are cut into B/k contiguous slices, and each slice
/// is further cut into k runs of S/k positions (k = secondary split). Inside a
/// group the scalars are ordered position-major, channel-minor.
class GroupSpec {
 public:
  static GroupSpec spatial(LatentShape shape, std::size_t groups) {
    const std::size_t s = shape.positions();
    if (groups == 0 || s % groups != 0) {
      throw ConfigError("spatial split: " + std::to_string(groups) + " groups do not divide " +
                        std::to_string(s) + " positions");
    }
    GroupSpec g(shape, SplitAxis::Spatial, groups, shape.size() / groups, 1);
    const std::size_t per = s / groups;
    for (std::size_t grp = 0; grp < groups; ++grp) {
      for (std::size_t e = 0; e < g.group_dim_; ++e) {
        g.offsets_.push_back(static_cast<std::uint32_t>(grp * per * shape.channels + e));
      }
    }
    return g;
  }

  /// secondary_split == 0 picks B/D when B > D, otherwise 1.
  static GroupSpec channel(LatentShape shape, std::size_t groups, std::size_t secondary_split = 0) {
    const std::size_t d_ch = shape.channels;
    const std::size_t s = shape.positions();
    if (groups == 0) throw ConfigError("channel split: zero groups");
    std::size_t k = secondary_split;
    if (k == 0) k = groups > d_ch ? groups / d_ch : 1;
    if (groups % k != 0) {
      throw ConfigError("channel split: secondary split " + std::to_string(k) +
                        " does not divide " + std::to_string(groups) + " groups");
    }
    const std::size_t slices = groups / k;
    if (d_ch % slices != 0) {
      throw ConfigError("channel split: " + std::to_string(slices) +
                        " channel slices do not divide " + std::to_string(d_ch) + " channels");
    }
    if (s % k != 0) {
      throw ConfigError("channel split: secondary split " + std::to_string(k) +
                        " does not divide " + std::to_string(s) + " positions");
    }
    const std::size_t ch_per = d_ch / slices;
    const std::size_t pos_per = s / k;
    GroupSpec g(shape, SplitAxis::Channel, groups, ch_per * pos_per, k);
    for (std::size_t slice = 0; slice < slices; ++slice) {
      for (std::size_t sub = 0; sub < k; ++sub) {
        for (std::size_t p = sub * pos_per; p < (sub + 1) * pos_per; ++p) {
          for (std::size_t c = slice * ch_per; c < (slice + 1) * ch_per; ++c) {
            g.offsets_.push_back(static_cast<std::uint32_t>(p * d_ch + c));
          }
        }
      }
    }
    return g;
  }

  const LatentShape& shape() const { return shape_; }
  SplitAxis axis() const { return axis_; }
  std::size_t num_groups() const { return groups_; }
  std::size_t group_dim() const { return group_dim_; }
  std::size_t secondary_split() const { return secondary_; }

  /// Offset inside a flattened (H, W, D) sample of element e of group g.
  std::size_t source_offset(std::size_t g, std::size_t e) const {
    return offsets_[g * group_dim_ + e];
  }
  std::span<const std::uint32_t> offsets() const { return offsets_; }

  friend bool operator==(const GroupSpec&, const GroupSpec&) = default;

 private:
  GroupSpec(LatentShape shape, SplitAxis axis, std::size_t groups, std::size_t dim,
            std::size_t secondary)
      : shape_(shape), axis_(axis), groups_(groups), group_dim_(dim), secondary_(secondary) {
    offsets_.reserve(shape.size());
  }

  LatentShape shape_;
  SplitAxis axis_;
  std::size_t groups_;
  std::size_t group_dim_;
  std::size_t secondary_;
  std::vector<std::uint32_t> offsets_;
};

inline TokenBatch<float> reshape_to_groups(const LatentTensor& z, const GroupSpec& spec) {
  if (z.shape() != spec.shape()) {
    throw ConfigError("latent shape " + to_string(z.shape()) + " does not match group spec shape " +
                      to_string(spec.shape()));
  }
  TokenBatch<float> out(z.batch(), spec.num_groups(), spec.group_dim());
  const auto offsets = spec.offsets();
  for (std::size_t n = 0; n < z.batch(); ++n) {
    const auto src = z.sample(n);
    auto dst = out.sample(n);
    for (std::size_t i = 0; i < offsets.size(); ++i) dst[i] = src[offsets[i]];
  }
  return out;
}

inline LatentTensor merge_groups(const TokenBatch<float>& groups, const GroupSpec& spec) {
  if (groups.tokens != spec.num_groups() || groups.dim != spec.group_dim()) {
    throw ConfigError("token layout does not match group spec");
  }
  LatentTensor out(spec.shape(), groups.batch);
  const auto offsets = spec.offsets();
  for (std::size_t n = 0; n < groups.batch; ++n) {
    const auto src = groups.sample(n);
    auto dst = out.sample(n);
    for (std::size_t i = 0; i < offsets.size(); ++i) dst[offsets[i]] = src[i];
  }
  return out;
}

/// Rows of `all` picked by `samples`, in that order.
template <std::floating_point T>
TokenBatch<T> gather_samples(const TokenBatch<T>& all, std::span<const std::size_t> samples) {
  TokenBatch<T> out(samples.size(), all.tokens, all.dim);
  const std::size_t stride = all.tokens * all.dim;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto src = all.sample(samples[i]);
    std::copy(src.begin(), src.end(), out.values.begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  return out;
}

}  // namespace revq
