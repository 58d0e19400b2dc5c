// SPDX-License-Identifier: Apache-2.0
//
// Post-quantization rectifier: a stack of per-token affine maps,
// nonlinearities, RMS normalization, single-head token attention and
// residual wrappers, each with a hand-derived backward pass.
//
// Layers map a TokenBatch (batch x tokens x dim) to a TokenBatch. forward()
// records what backward() needs; apply() is the cache-free const variant.
// backward() consumes the cache and accumulates into parameter gradients.

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "revq/binary_io.hpp"
#include "revq/core.hpp"

namespace revq {

enum class Activation : std::uint32_t { SiLU = 0, ReLU = 1, Tanh = 2 };

enum class LayerKind : std::uint32_t {
  Affine = 1,
  Nonlinearity = 2,
  RmsNorm = 3,
  TokenAttention = 4,
  Residual = 5,
};

template <std::floating_point T>
struct Parameter {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<T> value;
  std::vector<T> grad;

  Parameter() = default;
  Parameter(std::string n, std::vector<std::size_t> s) : name(std::move(n)), shape(std::move(s)) {
    std::size_t count = 1;
    for (auto d : shape) count *= d;
    value.assign(count, T{0});
    grad.assign(count, T{0});
  }
  std::size_t size() const { return value.size(); }
};

namespace detail {

template <std::floating_point T>
void uniform_fill(std::vector<T>& v, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& x : v) x = static_cast<T>(dist(rng));
}

// y[r] = W x[r] (+ b). W is out x in, row-major.
template <std::floating_point T>
void matvec_rows(const TokenBatch<T>& x, const std::vector<T>& w, const std::vector<T>* b,
                 std::size_t out, TokenBatch<T>& y) {
  const std::size_t in = x.dim;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto xr = x.row(r);
    auto yr = y.row(r);
    for (std::size_t o = 0; o < out; ++o) {
      T acc = b ? (*b)[o] : T{0};
      const T* wr = w.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) acc += wr[i] * xr[i];
      yr[o] = acc;
    }
  }
}

// grad_w += dy^T x, grad_x (if given) += dy W.
template <std::floating_point T>
void matvec_rows_backward(const TokenBatch<T>& x, const TokenBatch<T>& dy, const std::vector<T>& w,
                          std::vector<T>& grad_w, std::vector<T>* grad_b, TokenBatch<T>* dx) {
  const std::size_t in = x.dim, out = dy.dim;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto xr = x.row(r);
    const auto gr = dy.row(r);
    for (std::size_t o = 0; o < out; ++o) {
      const T g = gr[o];
      if (grad_b) (*grad_b)[o] += g;
      T* gw = grad_w.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) gw[i] += g * xr[i];
      if (dx) {
        auto dr = dx->row(r);
        const T* wr = w.data() + o * in;
        for (std::size_t i = 0; i < in; ++i) dr[i] += g * wr[i];
      }
    }
  }
}

template <std::floating_point T>
T sigmoid(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

}  // namespace detail

template <std::floating_point T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual LayerKind kind() const = 0;
  virtual std::size_t in_dim() const = 0;
  virtual std::size_t out_dim() const = 0;

  virtual TokenBatch<T> forward(const TokenBatch<T>& x) = 0;
  virtual TokenBatch<T> apply(const TokenBatch<T>& x) const = 0;
  virtual TokenBatch<T> backward(const TokenBatch<T>& grad_out) = 0;

  virtual void collect(std::vector<Parameter<T>*>& out) = 0;
  virtual void collect(std::vector<const Parameter<T>*>& out) const = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;

  /// Writes this layer's type tag and dimensions (RVQR descriptor).
  virtual void describe(binary::Writer& w) const = 0;

 protected:
  void check_input(const TokenBatch<T>& x) const {
    if (x.dim != in_dim()) {
      throw ConfigError("layer expects dim " + std::to_string(in_dim()) + ", got " +
                        std::to_string(x.dim));
    }
  }
  template <class Cache>
  static const Cache& require_cache(const std::optional<Cache>& cache, const TokenBatch<T>& grad,
                                    std::size_t out_dim) {
    if (!cache) throw StateError("backward called without a matching forward");
    const auto& in = cache->input;
    if (grad.batch != in.batch || grad.tokens != in.tokens || grad.dim != out_dim) {
      throw StateError("upstream gradient layout does not match the cached forward");
    }
    return *cache;
  }
};

template <std::floating_point T>
class AffineLayer final : public Layer<T> {
 public:
  AffineLayer(std::size_t in, std::size_t out)
      : weight_("weight", {out, in}), bias_("bias", {out}), in_(in), out_(out) {}

  void init_uniform(std::mt19937_64& rng) {
    detail::uniform_fill(weight_.value, 1.0 / std::sqrt(static_cast<double>(in_)), rng);
    std::fill(bias_.value.begin(), bias_.value.end(), T{0});
  }

  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }

  LayerKind kind() const override { return LayerKind::Affine; }
  std::size_t in_dim() const override { return in_; }
  std::size_t out_dim() const override { return out_; }

  TokenBatch<T> forward(const TokenBatch<T>& x) override {
    auto y = apply(x);
    cache_.emplace(Cache{x});
    return y;
  }

  TokenBatch<T> apply(const TokenBatch<T>& x) const override {
    this->check_input(x);
    TokenBatch<T> y(x.batch, x.tokens, out_);
    detail::matvec_rows<T>(x, weight_.value, &bias_.value, out_, y);
    return y;
  }

  TokenBatch<T> backward(const TokenBatch<T>& dy) override {
    const auto& c = this->require_cache(cache_, dy, out_);
    TokenBatch<T> dx(dy.batch, dy.tokens, in_);
    detail::matvec_rows_backward<T>(c.input, dy, weight_.value, weight_.grad, &bias_.grad, &dx);
    cache_.reset();
    return dx;
  }

  void collect(std::vector<Parameter<T>*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }
  void collect(std::vector<const Parameter<T>*>& out) const override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<AffineLayer>(*this); }
  void describe(binary::Writer& w) const override {
    w.u32(static_cast<std::uint32_t>(kind()));
    w.u32(static_cast<std::uint32_t>(in_));
    w.u32(static_cast<std::uint32_t>(out_));
  }

 private:
  struct Cache {
    TokenBatch<T> input;
  };
  Parameter<T> weight_;
  Parameter<T> bias_;
  std::size_t in_, out_;
  std::optional<Cache> cache_;
};

template <std::floating_point T>
class NonlinearityLayer final : public Layer<T> {
 public:
  NonlinearityLayer(Activation act, std::size_t dim) : act_(act), dim_(dim) {}

  Activation activation() const { return act_; }
  LayerKind kind() const override { return LayerKind::Nonlinearity; }
  std::size_t in_dim() const override { return dim_; }
  std::size_t out_dim() const override { return dim_; }

  TokenBatch<T> forward(const TokenBatch<T>& x) override {
    auto y = apply(x);
    cache_.emplace(Cache{x});
    return y;
  }

  TokenBatch<T> apply(const TokenBatch<T>& x) const override {
    this->check_input(x);
    TokenBatch<T> y = x;
    for (auto& v : y.values) v = eval(v);
    return y;
  }

  TokenBatch<T> backward(const TokenBatch<T>& dy) override {
    const auto& c = this->require_cache(cache_, dy, dim_);
    TokenBatch<T> dx = dy;
    for (std::size_t i = 0; i < dx.values.size(); ++i) dx.values[i] *= derivative(c.input.values[i]);
    cache_.reset();
    return dx;
  }

  void collect(std::vector<Parameter<T>*>&) override {}
  void collect(std::vector<const Parameter<T>*>&) const override {}
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<NonlinearityLayer>(*this);
  }
  void describe(binary::Writer& w) const override {
    w.u32(static_cast<std::uint32_t>(kind()));
    w.u32(static_cast<std::uint32_t>(act_));
    w.u32(static_cast<std::uint32_t>(dim_));
  }

 private:
  T eval(T x) const {
    switch (act_) {
      case Activation::SiLU: return x * detail::sigmoid(x);
      case Activation::ReLU: return x > T{0} ? x : T{0};
      case Activation::Tanh: return std::tanh(x);
    }
    return x;
  }
  T derivative(T x) const {
    switch (act_) {
      case Activation::SiLU: {
        const T s = detail::sigmoid(x);
        return s * (T{1} + x * (T{1} - s));
      }
      case Activation::ReLU: return x > T{0} ? T{1} : T{0};
      case Activation::Tanh: {
        const T t = std::tanh(x);
        return T{1} - t * t;
      }
    }
    return T{1};
  }

  struct Cache {
    TokenBatch<T> input;
  };
  Activation act_;
  std::size_t dim_;
  std::optional<Cache> cache_;
};

/// y = scale * x / sqrt(mean(x^2) + eps), per token.
template <std::floating_point T>
class RmsNormLayer final : public Layer<T> {
 public:
  static constexpr double kEpsilon = 1e-6;

  explicit RmsNormLayer(std::size_t dim) : scale_("scale", {dim}), dim_(dim) {
    std::fill(scale_.value.begin(), scale_.value.end(), T{1});
  }

  Parameter<T>& scale() { return scale_; }
  LayerKind kind() const override { return LayerKind::RmsNorm; }
  std::size_t in_dim() const override { return dim_; }
  std::size_t out_dim() const override { return dim_; }

  TokenBatch<T> forward(const TokenBatch<T>& x) override {
    Cache c{x, {}};
    auto y = compute(x, &c.inv_rms);
    cache_.emplace(std::move(c));
    return y;
  }

  TokenBatch<T> apply(const TokenBatch<T>& x) const override { return compute(x, nullptr); }

  TokenBatch<T> backward(const TokenBatch<T>& dy) override {
    const auto& c = this->require_cache(cache_, dy, dim_);
    TokenBatch<T> dx(dy.batch, dy.tokens, dim_);
    for (std::size_t r = 0; r < dy.rows(); ++r) {
      const auto x = c.input.row(r);
      const auto g = dy.row(r);
      auto out = dx.row(r);
      const T inv = c.inv_rms[r];
      // dxhat = g * scale; dx = inv * (dxhat - xhat * mean(dxhat * xhat))
      T dot = 0;
      for (std::size_t i = 0; i < dim_; ++i) {
        const T xhat = x[i] * inv;
        scale_.grad[i] += g[i] * xhat;
        dot += g[i] * scale_.value[i] * xhat;
      }
      dot /= static_cast<T>(dim_);
      for (std::size_t i = 0; i < dim_; ++i) {
        out[i] = inv * (g[i] * scale_.value[i] - x[i] * inv * dot);
      }
    }
    cache_.reset();
    return dx;
  }

  void collect(std::vector<Parameter<T>*>& out) override { out.push_back(&scale_); }
  void collect(std::vector<const Parameter<T>*>& out) const override { out.push_back(&scale_); }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<RmsNormLayer>(*this); }
  void describe(binary::Writer& w) const override {
    w.u32(static_cast<std::uint32_t>(kind()));
    w.u32(static_cast<std::uint32_t>(dim_));
  }

 private:
  TokenBatch<T> compute(const TokenBatch<T>& x, std::vector<T>* inv_out) const {
    this->check_input(x);
    TokenBatch<T> y(x.batch, x.tokens, dim_);
    if (inv_out) inv_out->resize(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const auto xr = x.row(r);
      auto yr = y.row(r);
      T ms = 0;
      for (T v : xr) ms += v * v;
      ms /= static_cast<T>(dim_);
      const T inv = T{1} / std::sqrt(ms + static_cast<T>(kEpsilon));
      if (inv_out) (*inv_out)[r] = inv;
      for (std::size_t i = 0; i < dim_; ++i) yr[i] = scale_.value[i] * xr[i] * inv;
    }
    return y;
  }

  struct Cache {
    TokenBatch<T> input;
    std::vector<T> inv_rms;
  };
  Parameter<T> scale_;
  std::size_t dim_;
  std::optional<Cache> cache_;
};

/// Single-head softmax attention across the tokens of each sample:
/// Q = X Wq^T, K = X Wk^T, V = X Wv^T, A = softmax(Q K^T / sqrt(h)),
/// Y = (A V) Wo^T + bo.
template <std::floating_point T>
class TokenAttentionLayer final : public Layer<T> {
 public:
  TokenAttentionLayer(std::size_t dim, std::size_t head_dim)
      : wq_("wq", {head_dim, dim}),
        wk_("wk", {head_dim, dim}),
        wv_("wv", {head_dim, dim}),
        wo_("wo", {dim, head_dim}),
        bo_("bo", {dim}),
        dim_(dim),
        head_(head_dim) {
    if (dim == 0 || head_dim == 0) throw ConfigError("attention dims must be positive");
  }

  void init_uniform(std::mt19937_64& rng) {
    const double bin = 1.0 / std::sqrt(static_cast<double>(dim_));
    detail::uniform_fill(wq_.value, bin, rng);
    detail::uniform_fill(wk_.value, bin, rng);
    detail::uniform_fill(wv_.value, bin, rng);
    detail::uniform_fill(wo_.value, 1.0 / std::sqrt(static_cast<double>(head_)), rng);
    std::fill(bo_.value.begin(), bo_.value.end(), T{0});
  }

  std::size_t head_dim() const { return head_; }
  LayerKind kind() const override { return LayerKind::TokenAttention; }
  std::size_t in_dim() const override { return dim_; }
  std::size_t out_dim() const override { return dim_; }

  TokenBatch<T> forward(const TokenBatch<T>& x) override {
    Cache c;
    auto y = compute(x, &c);
    c.input = x;
    cache_.emplace(std::move(c));
    return y;
  }

  TokenBatch<T> apply(const TokenBatch<T>& x) const override { return compute(x, nullptr); }

  /// Attention weights (batch x tokens x tokens) for inspection.
  std::vector<T> attention_weights(const TokenBatch<T>& x) const {
    Cache c;
    compute(x, &c);
    return c.attn;
  }

  TokenBatch<T> backward(const TokenBatch<T>& dy) override {
    const auto& c = this->require_cache(cache_, dy, dim_);
    const std::size_t b = dy.batch, t = dy.tokens, h = head_;
    const T scale = T{1} / std::sqrt(static_cast<T>(h));

    // Output projection.
    TokenBatch<T> d_o(b, t, h);
    detail::matvec_rows_backward<T>(c.o, dy, wo_.value, wo_.grad, &bo_.grad, &d_o);

    TokenBatch<T> dq(b, t, h), dk(b, t, h), dv(b, t, h);
    std::vector<T> da(t * t), ds(t * t);
    for (std::size_t n = 0; n < b; ++n) {
      const T* a = c.attn.data() + n * t * t;
      // dA = dO V^T, dV = A^T dO
      for (std::size_t i = 0; i < t; ++i) {
        const auto doi = d_o.token(n, i);
        for (std::size_t j = 0; j < t; ++j) {
          const auto vj = c.v.token(n, j);
          T acc = 0;
          for (std::size_t k = 0; k < h; ++k) acc += doi[k] * vj[k];
          da[i * t + j] = acc;
          auto dvj = dv.token(n, j);
          for (std::size_t k = 0; k < h; ++k) dvj[k] += a[i * t + j] * doi[k];
        }
      }
      // Softmax backward: dS = A * (dA - rowsum(dA * A))
      for (std::size_t i = 0; i < t; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < t; ++j) dot += da[i * t + j] * a[i * t + j];
        for (std::size_t j = 0; j < t; ++j) ds[i * t + j] = a[i * t + j] * (da[i * t + j] - dot);
      }
      // S = Q K^T * scale
      for (std::size_t i = 0; i < t; ++i) {
        auto dqi = dq.token(n, i);
        const auto qi = c.q.token(n, i);
        for (std::size_t j = 0; j < t; ++j) {
          const T g = ds[i * t + j] * scale;
          const auto kj = c.k.token(n, j);
          auto dkj = dk.token(n, j);
          for (std::size_t k = 0; k < h; ++k) {
            dqi[k] += g * kj[k];
            dkj[k] += g * qi[k];
          }
        }
      }
    }
    TokenBatch<T> dx(b, t, dim_);
    detail::matvec_rows_backward<T>(c.input, dq, wq_.value, wq_.grad, nullptr, &dx);
    detail::matvec_rows_backward<T>(c.input, dk, wk_.value, wk_.grad, nullptr, &dx);
    detail::matvec_rows_backward<T>(c.input, dv, wv_.value, wv_.grad, nullptr, &dx);
    cache_.reset();
    return dx;
  }

  void collect(std::vector<Parameter<T>*>& out) override {
    for (auto* p : {&wq_, &wk_, &wv_, &wo_, &bo_}) out.push_back(p);
  }
  void collect(std::vector<const Parameter<T>*>& out) const override {
    for (auto* p : {&wq_, &wk_, &wv_, &wo_, &bo_}) out.push_back(p);
  }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<TokenAttentionLayer>(*this);
  }
  void describe(binary::Writer& w) const override {
    w.u32(static_cast<std::uint32_t>(kind()));
    w.u32(static_cast<std::uint32_t>(dim_));
    w.u32(static_cast<std::uint32_t>(head_));
  }

 private:
  struct Cache {
    TokenBatch<T> input, q, k, v, o;
    std::vector<T> attn;  // batch x tokens x tokens
  };

  TokenBatch<T> compute(const TokenBatch<T>& x, Cache* cache) const {
    this->check_input(x);
    const std::size_t b = x.batch, t = x.tokens, h = head_;
    const T scale = T{1} / std::sqrt(static_cast<T>(h));
    TokenBatch<T> q(b, t, h), k(b, t, h), v(b, t, h), o(b, t, h);
    detail::matvec_rows<T>(x, wq_.value, nullptr, h, q);
    detail::matvec_rows<T>(x, wk_.value, nullptr, h, k);
    detail::matvec_rows<T>(x, wv_.value, nullptr, h, v);
    std::vector<T> attn(b * t * t);
    for (std::size_t n = 0; n < b; ++n) {
      T* a = attn.data() + n * t * t;
      for (std::size_t i = 0; i < t; ++i) {
        const auto qi = q.token(n, i);
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < t; ++j) {
          const auto kj = k.token(n, j);
          T s = 0;
          for (std::size_t c = 0; c < h; ++c) s += qi[c] * kj[c];
          a[i * t + j] = s * scale;
          mx = std::max(mx, a[i * t + j]);
        }
        T sum = 0;
        for (std::size_t j = 0; j < t; ++j) {
          a[i * t + j] = std::exp(a[i * t + j] - mx);
          sum += a[i * t + j];
        }
        auto oi = o.token(n, i);
        for (std::size_t j = 0; j < t; ++j) {
          a[i * t + j] /= sum;
          const auto vj = v.token(n, j);
          for (std::size_t c = 0; c < h; ++c) oi[c] += a[i * t + j] * vj[c];
        }
      }
    }
    TokenBatch<T> y(b, t, dim_);
    detail::matvec_rows<T>(o, wo_.value, &bo_.value, dim_, y);
    if (cache) {
      cache->q = std::move(q);
      cache->k = std::move(k);
      cache->v = std::move(v);
      cache->o = std::move(o);
      cache->attn = std::move(attn);
    }
    return y;
  }

  Parameter<T> wq_, wk_, wv_, wo_, bo_;
  std::size_t dim_, head_;
  std::optional<Cache> cache_;
};

/// y = x + body(x).
template <std::floating_point T>
class ResidualLayer final : public Layer<T> {
 public:
  explicit ResidualLayer(std::size_t dim) : dim_(dim) {}

  ResidualLayer(const ResidualLayer& o) : dim_(o.dim_), recorded_(o.recorded_) {
    for (const auto& l : o.body_) body_.push_back(l->clone());
  }
  ResidualLayer& operator=(const ResidualLayer&) = delete;

  void add(std::unique_ptr<Layer<T>> layer) {
    const std::size_t expected = body_.empty() ? dim_ : body_.back()->out_dim();
    if (layer->in_dim() != expected) {
      throw ConfigError("residual body: layer input dim " + std::to_string(layer->in_dim()) +
                        " != " + std::to_string(expected));
    }
    body_.push_back(std::move(layer));
  }
  /// Throws unless the body maps dim -> dim.
  void seal() const {
    const std::size_t out = body_.empty() ? dim_ : body_.back()->out_dim();
    if (out != dim_) throw ConfigError("residual body must preserve the token dim");
  }
  const std::vector<std::unique_ptr<Layer<T>>>& body() const { return body_; }

  LayerKind kind() const override { return LayerKind::Residual; }
  std::size_t in_dim() const override { return dim_; }
  std::size_t out_dim() const override { return dim_; }

  TokenBatch<T> forward(const TokenBatch<T>& x) override {
    this->check_input(x);
    seal();
    TokenBatch<T> h = x;
    for (auto& l : body_) h = l->forward(h);
    for (std::size_t i = 0; i < h.values.size(); ++i) h.values[i] += x.values[i];
    recorded_ = true;
    return h;
  }

  TokenBatch<T> apply(const TokenBatch<T>& x) const override {
    this->check_input(x);
    seal();
    TokenBatch<T> h = x;
    for (const auto& l : body_) h = l->apply(h);
    for (std::size_t i = 0; i < h.values.size(); ++i) h.values[i] += x.values[i];
    return h;
  }

  TokenBatch<T> backward(const TokenBatch<T>& dy) override {
    if (!recorded_) throw StateError("backward called without a matching forward");
    TokenBatch<T> g = dy;
    for (auto it = body_.rbegin(); it != body_.rend(); ++it) g = (*it)->backward(g);
    for (std::size_t i = 0; i < g.values.size(); ++i) g.values[i] += dy.values[i];
    recorded_ = false;
    return g;
  }

  void collect(std::vector<Parameter<T>*>& out) override {
    for (auto& l : body_) l->collect(out);
  }
  void collect(std::vector<const Parameter<T>*>& out) const override {
    for (const auto& l : body_) static_cast<const Layer<T>&>(*l).collect(out);
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ResidualLayer>(*this); }
  void describe(binary::Writer& w) const override {
    w.u32(static_cast<std::uint32_t>(kind()));
    w.u32(static_cast<std::uint32_t>(dim_));
    w.u32(static_cast<std::uint32_t>(body_.size()));
    for (const auto& l : body_) l->describe(w);
  }

 private:
  std::size_t dim_;
  std::vector<std::unique_ptr<Layer<T>>> body_;
  bool recorded_ = false;
};

/// The rectifier g: B tokens of dim d in, the same layout out.
template <std::floating_point T>
class BasicRectifier {
 public:
  BasicRectifier() = default;
  BasicRectifier(std::size_t tokens, std::size_t dim) : tokens_(tokens), dim_(dim) {}

  BasicRectifier(const BasicRectifier& o) : tokens_(o.tokens_), dim_(o.dim_) {
    for (const auto& l : o.layers_) layers_.push_back(l->clone());
  }
  BasicRectifier& operator=(const BasicRectifier& o) {
    if (this != &o) *this = BasicRectifier(o);
    return *this;
  }
  BasicRectifier(BasicRectifier&&) noexcept = default;
  BasicRectifier& operator=(BasicRectifier&&) noexcept = default;

  std::size_t tokens() const { return tokens_; }
  std::size_t dim() const { return dim_; }
  bool empty() const { return layers_.empty(); }
  const std::vector<std::unique_ptr<Layer<T>>>& layers() const { return layers_; }

  void add(std::unique_ptr<Layer<T>> layer) {
    if (layer->in_dim() != dim_ || layer->out_dim() != dim_) {
      throw ConfigError("rectifier layers must map dim " + std::to_string(dim_) + " to itself");
    }
    if (auto* res = dynamic_cast<ResidualLayer<T>*>(layer.get())) res->seal();
    layers_.push_back(std::move(layer));
  }

  TokenBatch<T> forward(const TokenBatch<T>& zq) {
    check_layout(zq);
    TokenBatch<T> h = zq;
    for (auto& l : layers_) h = l->forward(h);
    forwarded_ = true;
    return h;
  }

  TokenBatch<T> apply(const TokenBatch<T>& zq) const {
    check_layout(zq);
    TokenBatch<T> h = zq;
    for (const auto& l : layers_) h = l->apply(h);
    return h;
  }

  /// Accumulates parameter gradients and returns dL/dz_q.
  TokenBatch<T> backward(const TokenBatch<T>& upstream) {
    if (!forwarded_) throw StateError("rectifier backward called without a matching forward");
    check_layout(upstream);
    TokenBatch<T> g = upstream;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    forwarded_ = false;
    return g;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& l : layers_) l->collect(out);
    return out;
  }
  std::vector<const Parameter<T>*> parameters() const {
    std::vector<const Parameter<T>*> out;
    for (const auto& l : layers_) static_cast<const Layer<T>&>(*l).collect(out);
    return out;
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->size();
    return n;
  }
  void zero_grad() {
    for (auto* p : parameters()) std::fill(p->grad.begin(), p->grad.end(), T{0});
  }

 private:
  void check_layout(const TokenBatch<T>& x) const {
    if (x.tokens != tokens_ || x.dim != dim_) {
      throw ConfigError("rectifier expects " + std::to_string(tokens_) + " tokens of dim " +
                        std::to_string(dim_) + ", got " + std::to_string(x.tokens) + " x " +
                        std::to_string(x.dim));
    }
  }

  std::size_t tokens_ = 0;
  std::size_t dim_ = 0;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
  bool forwarded_ = false;
};

using Rectifier = BasicRectifier<float>;

enum class RectifierArch { None, Mlp, Attention };

inline const char* to_string(RectifierArch a) {
  switch (a) {
    case RectifierArch::None: return "none";
    case RectifierArch::Mlp: return "mlp";
    case RectifierArch::Attention: return "attn";
  }
  return "none";
}

struct RectifierOptions {
  RectifierArch arch = RectifierArch::Attention;
  std::size_t layers = 3;
  std::size_t hidden = 0;    // 0: 4 x dim
  std::size_t head_dim = 32;
  Activation activation = Activation::SiLU;
  std::uint64_t seed = 0;
};

/// Builds the desk-scale rectifier.
///   mlp:  layers x Residual(RMSNorm, Affine(d,h), act, Affine(h,d))
///   attn: layers x [Residual(RMSNorm, TokenAttention), Residual(mlp body)]
template <std::floating_point T>
BasicRectifier<T> make_rectifier(std::size_t tokens, std::size_t dim, const RectifierOptions& opt) {
  BasicRectifier<T> rect(tokens, dim);
  if (opt.arch == RectifierArch::None) return rect;
  std::mt19937_64 rng(opt.seed);
  const std::size_t hidden = opt.hidden ? opt.hidden : 4 * dim;
  auto mlp_block = [&] {
    auto res = std::make_unique<ResidualLayer<T>>(dim);
    res->add(std::make_unique<RmsNormLayer<T>>(dim));
    auto up = std::make_unique<AffineLayer<T>>(dim, hidden);
    up->init_uniform(rng);
    res->add(std::move(up));
    res->add(std::make_unique<NonlinearityLayer<T>>(opt.activation, hidden));
    auto down = std::make_unique<AffineLayer<T>>(hidden, dim);
    down->init_uniform(rng);
    res->add(std::move(down));
    return res;
  };
  for (std::size_t l = 0; l < opt.layers; ++l) {
    if (opt.arch == RectifierArch::Attention) {
      auto res = std::make_unique<ResidualLayer<T>>(dim);
      res->add(std::make_unique<RmsNormLayer<T>>(dim));
      auto attn = std::make_unique<TokenAttentionLayer<T>>(dim, opt.head_dim);
      attn->init_uniform(rng);
      res->add(std::move(attn));
      rect.add(std::move(res));
    }
    rect.add(mlp_block());
  }
  return rect;
}

// ---------------------------------------------------------------------------
// RVQR checkpoint: "RVQR", version u32, tokens u32, dim u32, layer count u32,
// pre-order layer descriptors (tag u32 then dims), then every parameter as
// little-endian f32 in descriptor order.

inline constexpr std::uint32_t kRectifierFormatVersion = 1;

inline std::vector<char> encode_rectifier(const Rectifier& rect) {
  binary::Writer w;
  w.magic("RVQR");
  w.u32(kRectifierFormatVersion);
  w.u32(static_cast<std::uint32_t>(rect.tokens()));
  w.u32(static_cast<std::uint32_t>(rect.dim()));
  w.u32(static_cast<std::uint32_t>(rect.layers().size()));
  for (const auto& l : rect.layers()) l->describe(w);
  for (const auto* p : rect.parameters()) {
    for (float v : p->value) w.f32(v);
  }
  return w.bytes();
}

namespace detail {

inline std::unique_ptr<Layer<float>> read_layer(binary::Reader& r, int depth) {
  if (depth > 32) throw FormatError(FormatErrorKind::Truncated, r.context() + ": nesting too deep");
  // Parameters follow the descriptors, so a layer can never need more floats
  // than there are bytes left.
  const auto fits = [&](std::size_t floats) {
    if (floats > r.remaining() / 4) {
      throw FormatError(FormatErrorKind::Truncated,
                        r.context() + ": layer needs " + std::to_string(floats * 4) + " parameter bytes, " +
                            std::to_string(r.remaining()) + " remain");
    }
  };
  const auto tag = static_cast<LayerKind>(r.u32());
  switch (tag) {
    case LayerKind::Affine: {
      const std::size_t in = r.u32(), out = r.u32();
      fits(in * out + out);
      return std::make_unique<AffineLayer<float>>(in, out);
    }
    case LayerKind::Nonlinearity: {
      const auto act = r.u32();
      const std::size_t dim = r.u32();
      if (act > 2) break;
      return std::make_unique<NonlinearityLayer<float>>(static_cast<Activation>(act), dim);
    }
    case LayerKind::RmsNorm: {
      const std::size_t dim = r.u32();
      fits(dim);
      return std::make_unique<RmsNormLayer<float>>(dim);
    }
    case LayerKind::TokenAttention: {
      const std::size_t dim = r.u32(), head = r.u32();
      fits(4 * dim * head + dim);
      return std::make_unique<TokenAttentionLayer<float>>(dim, head);
    }
    case LayerKind::Residual: {
      const std::size_t dim = r.u32(), count = r.u32();
      auto res = std::make_unique<ResidualLayer<float>>(dim);
      for (std::size_t i = 0; i < count; ++i) res->add(read_layer(r, depth + 1));
      res->seal();
      return res;
    }
  }
  throw FormatError(FormatErrorKind::BadMagic, r.context() + ": unknown layer descriptor");
}

}  // namespace detail

inline Rectifier decode_rectifier(const std::vector<char>& bytes, const std::string& context) {
  binary::Reader r(bytes, context);
  r.expect_magic("RVQR");
  r.expect_version(kRectifierFormatVersion);
  const std::size_t tokens = r.u32(), dim = r.u32(), count = r.u32();
  Rectifier rect(tokens, dim);
  try {
    for (std::size_t i = 0; i < count; ++i) rect.add(detail::read_layer(r, 0));
  } catch (const ConfigError& e) {
    throw FormatError(FormatErrorKind::Truncated, context + ": inconsistent layer stack: " + e.what());
  }
  for (auto* p : rect.parameters()) {
    r.require(p->size() * 4, "rectifier parameters");
    for (auto& v : p->value) {
      v = r.f32();
      if (!std::isfinite(v)) throw FormatError(FormatErrorKind::NonFinite, context + ": parameter");
    }
  }
  return rect;
}

inline void write_rectifier(const std::string& path, const Rectifier& rect) {
  binary::save_file(path, encode_rectifier(rect));
}

inline Rectifier read_rectifier(const std::string& path) {
  return decode_rectifier(binary::load_file(path), path);
}

}  // namespace revq
