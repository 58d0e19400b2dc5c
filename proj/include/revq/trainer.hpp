// SPDX-License-Identifier: Apache-2.0
//
// The quantize-then-rectify optimization loop. One epoch: for every
// minibatch quantize, rectify, take the latent l2 loss and update both the
// rectifier and the selected codebook entries; after the last batch apply
// the non-activation reset to every codebook.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "revq/core.hpp"
#include "revq/loss.hpp"
#include "revq/optim.hpp"
#include "revq/quantizer.hpp"
#include "revq/rectifier.hpp"

namespace revq {

/// Loss became NaN/Inf during training.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class CodebookInit { FromData, Gaussian };

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 256;
  double quantizer_lr = 1e-2;
  double final_lr = 1e-4;
  double lr_decay_gamma = 0.0;  // 0: derived so the last epoch runs at final_lr
  double rectifier_lr_fraction = 0.05;
  double weight_decay_rectifier = 1e-4;
  double weight_decay_codebook = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;
  bool reset_enabled = true;
  double reset_epsilon_sigma = 1e-2;
  CodebookInit init = CodebookInit::FromData;
  double init_std = 1.0;  // Gaussian init only

  void validate() const {
    if (!(quantizer_lr > 0)) throw ConfigError("quantizer_lr must be > 0");
    if (!(rectifier_lr_fraction > 0 && rectifier_lr_fraction <= 1)) {
      throw ConfigError("rectifier_lr_fraction must be in (0, 1]");
    }
    if (!(lr_decay_gamma == 0 || (lr_decay_gamma > 0 && lr_decay_gamma <= 1))) {
      throw ConfigError("lr_decay_gamma must be in (0, 1]");
    }
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (reset_epsilon_sigma < 0) throw ConfigError("reset_epsilon_sigma must be >= 0");
  }

  ExponentialSchedule schedule() const {
    if (lr_decay_gamma > 0) return {lr_decay_gamma};
    return ExponentialSchedule::spanning(quantizer_lr, final_lr, epochs);
  }
};

struct Evaluation {
  double qua_loss = 0.0;  // mean per-sample squared quantization error
  double dec_loss = 0.0;  // mean per-sample squared error after the rectifier
  Utilization utilization;
};

/// Full pass without touching the codebook counters or rectifier caches.
template <std::floating_point T>
Evaluation evaluate(const TokenBatch<T>& groups, const BasicMultiCodebook<T>& cb,
                    const BasicRectifier<T>& rect, std::size_t batch_size = 256) {
  Evaluation ev;
  std::vector<std::uint64_t> counts(cb.counts().size(), 0);
  double qua = 0.0, dec = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < groups.batch; begin += batch_size) {
    const std::size_t end = std::min(groups.batch, begin + batch_size);
    idx.resize(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    const auto chunk = gather_samples<T>(groups, idx);
    const auto q = quantize_groups(chunk, cb, counts);
    for (double e : q.sq_error) qua += e;
    if (rect.empty()) {
      for (double e : q.sq_error) dec += e;
    } else {
      for (double e : per_sample_sq_error(chunk, rect.apply(q.quantized))) dec += e;
    }
  }
  if (groups.batch > 0) {
    ev.qua_loss = qua / static_cast<double>(groups.batch);
    ev.dec_loss = dec / static_cast<double>(groups.batch);
  }
  ev.utilization = utilization(counts, cb.codes_per_group());
  return ev;
}

/// dL/dC: the upstream gradient at every quantized token is added to the code
/// it selected. `active` marks codes that received at least one assignment.
template <std::floating_point T>
void scatter_code_gradients(const TokenBatch<T>& grad_zq, std::span<const std::uint32_t> indices,
                            const BasicMultiCodebook<T>& cb, std::vector<T>& grad_entries,
                            std::vector<std::uint8_t>& active) {
  grad_entries.assign(cb.entries().size(), T{0});
  active.assign(cb.num_codebooks() * cb.codes_per_group(), 0);
  const std::size_t d = cb.dim();
  for (std::size_t r = 0; r < grad_zq.rows(); ++r) {
    const std::size_t g = r % grad_zq.tokens;
    const std::size_t row = cb.codebook_for(g) * cb.codes_per_group() + indices[r];
    active[row] = 1;
    const auto src = grad_zq.row(r);
    for (std::size_t k = 0; k < d; ++k) grad_entries[row * d + k] += src[k];
  }
}

/// Optimizer state carried across epochs.
struct TrainState {
  RowAdamState<float> codebook_opt;
  std::vector<AdamState<float>> rectifier_opt;
  std::mt19937_64 rng;
  std::size_t epoch = 0;

  TrainState(const MultiCodebook& cb, const Rectifier& rect, std::uint64_t seed)
      : codebook_opt(cb.num_codebooks() * cb.codes_per_group(), cb.dim()), rng(seed) {
    for (const auto* p : rect.parameters()) rectifier_opt.emplace_back(p->size());
  }
};

struct StepResult {
  double loss = 0.0;       // rectified loss before the update
  double qua_error = 0.0;  // summed per-sample quantization error of the batch
};

/// One optimizer step on `batch` at quantizer learning rate `lr`.
inline StepResult train_step(const TokenBatch<float>& batch, MultiCodebook& cb, Rectifier& rect,
                             TrainState& st, const TrainConfig& cfg, double lr) {
  const auto q = quantize_groups<float>(batch, cb, cb.counts());
  const bool has_rect = !rect.empty();
  const auto out = has_rect ? rect.forward(q.quantized) : q.quantized;
  const auto loss = revq_loss(batch, out);
  if (!std::isfinite(loss.value)) {
    throw TrainingDiverged("loss became non-finite at epoch " + std::to_string(st.epoch) +
                           " (lr " + std::to_string(lr) +
                           "); lower the learning rate or normalize the latents");
  }
  StepResult res{loss.value, 0.0};
  for (double e : q.sq_error) res.qua_error += e;

  TokenBatch<float> grad_zq;
  if (has_rect) {
    rect.zero_grad();
    grad_zq = rect.backward(loss.grad);
  } else {
    grad_zq = loss.grad;
  }

  std::vector<float> code_grad;
  std::vector<std::uint8_t> active;
  scatter_code_gradients<float>(grad_zq, q.indices, cb, code_grad, active);
  const AdamHyper cb_hyper{lr, cfg.weight_decay_codebook, cfg.beta1, cfg.beta2, cfg.adam_epsilon};
  adam_step_rows<float>(cb.entries(), code_grad, active, st.codebook_opt, cb_hyper);

  if (has_rect) {
    const AdamHyper r_hyper{lr * cfg.rectifier_lr_fraction, cfg.weight_decay_rectifier, cfg.beta1,
                            cfg.beta2, cfg.adam_epsilon};
    auto params = rect.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      adam_step<float>(params[i]->value, params[i]->grad, st.rectifier_opt[i], r_hyper);
    }
  }
  return res;
}

struct EpochReport {
  std::size_t epoch = 0;
  // Evaluated on the full training set after the epoch's reset.
  double qua_loss = 0.0;
  double dec_loss = 0.0;
  double utilization_overall = 0.0;
  double utilization_min_group = 0.0;
  // Running statistics collected while the epoch trained.
  double train_qua_loss = 0.0;
  double train_dec_loss = 0.0;
  double train_utilization = 0.0;
  double lr = 0.0;
  std::size_t reset_count = 0;
  double wall_ms = 0.0;
};

inline EpochReport train_epoch(const TokenBatch<float>& data, MultiCodebook& cb, Rectifier& rect,
                               const TrainConfig& cfg, TrainState& st) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  EpochReport rep;
  rep.epoch = st.epoch;
  rep.lr = cfg.quantizer_lr * cfg.schedule().multiplier(st.epoch);
  cb.clear_counts();

  std::vector<std::size_t> order(data.batch);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), st.rng);

  double qua = 0.0, dec = 0.0;
  for (std::size_t begin = 0; begin < data.batch; begin += cfg.batch_size) {
    const std::size_t end = std::min(data.batch, begin + cfg.batch_size);
    const auto batch = gather_samples<float>(
        data, std::span<const std::size_t>(order).subspan(begin, end - begin));
    const auto step = train_step(batch, cb, rect, st, cfg, rep.lr);
    qua += step.qua_error;
    dec += step.loss * static_cast<double>(end - begin);
  }
  if (data.batch > 0) {
    rep.train_qua_loss = qua / static_cast<double>(data.batch);
    rep.train_dec_loss = dec / static_cast<double>(data.batch);
  }
  rep.train_utilization = utilization(cb).overall;

  if (cfg.reset_enabled) {
    std::vector<std::size_t> moved;
    for (std::size_t g = 0; g < cb.num_codebooks(); ++g) {
      moved.clear();
      rep.reset_count += reset_codebook(cb, g, cfg.reset_epsilon_sigma, st.rng, &moved);
      for (auto i : moved) st.codebook_opt.reset_row(g * cb.codes_per_group() + i);
    }
  }

  const auto ev = evaluate<float>(data, cb, rect, cfg.batch_size);
  rep.qua_loss = ev.qua_loss;
  rep.dec_loss = ev.dec_loss;
  rep.utilization_overall = ev.utilization.overall;
  rep.utilization_min_group = ev.utilization.min_group;
  rep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  ++st.epoch;
  return rep;
}

struct TrainResult {
  MultiCodebook codebook;
  Rectifier rectifier;
  std::vector<EpochReport> log;
};

using EpochCallback =
    std::function<void(const EpochReport&, const MultiCodebook&, const Rectifier&)>;

/// Initializes a codebook (N codes; one shared codebook when `shared`) and
/// runs cfg.epochs epochs. `on_epoch` fires after each epoch's reset.
inline TrainResult train(const TokenBatch<float>& data, std::size_t codes, bool shared,
                         Rectifier rectifier, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (rectifier.tokens() != data.tokens || rectifier.dim() != data.dim) {
    throw ConfigError("rectifier layout does not match the token groups");
  }
  MultiCodebook cb(shared ? 1 : data.tokens, codes, data.dim);
  if (cfg.init == CodebookInit::FromData) {
    sample_init<float>(cb, data, cfg.seed);
  } else {
    gaussian_init<float>(cb, 0.0, cfg.init_std, cfg.seed);
  }
  TrainResult res{std::move(cb), std::move(rectifier), {}};
  TrainState st(res.codebook, res.rectifier, cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    res.log.push_back(train_epoch(data, res.codebook, res.rectifier, cfg, st));
    if (on_epoch) on_epoch(res.log.back(), res.codebook, res.rectifier);
  }
  return res;
}

}  // namespace revq
