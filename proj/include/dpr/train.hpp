// SPDX-License-Identifier: Apache-2.0
//
// Optimization loop: seeded window shuffling, Adam with bias correction,
// validation-based early stopping, and deterministic multi-worker batch
// sharding (per-shard tapes, gradients merged in fixed shard order).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "dpr/data.hpp"
#include "dpr/model.hpp"

namespace dpr {

struct TrainConfig {
  double lr = 1e-3;
  int batch_size = 32;
  int patience = 10;
  int max_epochs = 100;
  double lambda_orth = 1e-4;
  std::uint64_t seed = 1;
  double grad_clip = 0.0;       // 0 = off
  double stop_train_loss = 0.0;  // stop once the epoch-mean prediction MSE falls below; 0 = off

  void validate() const {
    if (lr <= 0) throw ConfigError("train: lr must be positive");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (patience < 1) throw ConfigError("train: patience must be >= 1");
    if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
    if (lambda_orth < 0) throw ConfigError("train: lambda_orth must be >= 0");
    if (grad_clip < 0) throw ConfigError("train: grad_clip must be >= 0");
  }
};

/// Worker cap from DPR_THREADS (default 1; sharding changes nothing about the
/// math, only how the batch is partitioned).
inline int worker_count() {
  if (const char* env = std::getenv("DPR_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return std::min(n, 64);
  }
  return 1;
}

/// L_total = mean squared error + lambda * penalty.
template <typename S>
Tensor<S> total_loss(const Tensor<S>& pred, const Tensor<S>& target, const Tensor<S>& penalty,
                     double lambda_orth) {
  return add(mse_loss(pred, target), scale(penalty, lambda_orth));
}

template <typename S>
struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<S>> m, v;

  static AdamState init(std::vector<std::pair<std::string, Tensor<S>>>& params) {
    AdamState st;
    for (auto& [name, p] : params) {
      st.m.emplace_back(static_cast<std::size_t>(p.size()), S(0));
      st.v.emplace_back(static_cast<std::size_t>(p.size()), S(0));
    }
    return st;
  }
};

/// One bias-corrected Adam update over the parameter list (fixed order).
template <typename S>
void adam_step(std::vector<std::pair<std::string, Tensor<S>>>& params, AdamState<S>& state, double lr) {
  if (state.m.size() != params.size()) throw ContractError("adam_step: state/parameter list mismatch");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, double(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& [name, p] = params[k];
    auto& g = p.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    auto& vals = p.values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      double gi = double(g[i]);
      if (!std::isfinite(gi)) throw NumericError("adam_step: non-finite gradient in " + name);
      double mi = state.beta1 * double(m[i]) + (1.0 - state.beta1) * gi;
      double vi = state.beta2 * double(v[i]) + (1.0 - state.beta2) * gi * gi;
      m[i] = static_cast<S>(mi);
      v[i] = static_cast<S>(vi);
      double mhat = mi / bc1;
      double vhat = vi / bc2;
      vals[i] -= static_cast<S>(lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

/// Scale gradients so the global L2 norm is at most `max_norm`.
template <typename S>
void clip_gradients(std::vector<std::pair<std::string, Tensor<S>>>& params, double max_norm) {
  double total = 0;
  for (auto& [name, p] : params)
    for (S g : p.grad()) total += double(g) * double(g);
  total = std::sqrt(total);
  if (total <= max_norm || total == 0) return;
  double f = max_norm / total;
  for (auto& [name, p] : params)
    for (auto& g : p.grad()) g = static_cast<S>(double(g) * f);
}

/// Stride-1 sliding windows, fully contained in one frame: window w covers
/// rows [w, w+lookback) with target rows [w+lookback, w+lookback+horizon).
struct WindowSampler {
  Index lookback = 96;
  Index horizon = 96;

  Index count(const SeriesFrame& frame) const {
    return std::max<Index>(0, frame.rows() - lookback - horizon + 1);
  }

  template <typename S>
  void fill(const SeriesFrame& frame, std::span<const Index> starts, Tensor<S>& x, Tensor<S>& y) const {
    const Index B = static_cast<Index>(starts.size()), C = frame.cols();
    x = Tensor<S>(Shape{B, lookback, C});
    y = Tensor<S>(Shape{B, horizon, C});
    for (Index b = 0; b < B; ++b) {
      Index s = starts[static_cast<std::size_t>(b)];
      for (Index t = 0; t < lookback; ++t)
        for (Index c = 0; c < C; ++c) x.data()[(b * lookback + t) * C + c] = static_cast<S>(frame.at(s + t, c));
      for (Index t = 0; t < horizon; ++t)
        for (Index c = 0; c < C; ++c)
          y.data()[(b * horizon + t) * C + c] = static_cast<S>(frame.at(s + lookback + t, c));
    }
  }
};

struct EarlyStopper {
  int patience = 10;
  double best = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int stale = 0;

  /// Returns true when `val` improves on the best seen so far.
  bool update(double val, int epoch) {
    if (val < best) {
      best = val;
      best_epoch = epoch;
      stale = 0;
      return true;
    }
    ++stale;
    return false;
  }
  bool should_stop() const { return stale >= patience; }
};

struct EpochStats {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_mse = 0.0;
  double orth_penalty = 0.0;
};

/// MSE/MAE over every stride-1 window of a (standardized) frame.
template <typename S>
std::pair<double, double> evaluate(DprNetModel<S>& model, const SeriesFrame& frame, int batch_size = 64) {
  WindowSampler sampler{model.cfg.lookback, model.cfg.horizon};
  const Index n = sampler.count(frame);
  if (n < 1) throw ConfigError("evaluate: split has no full windows (rows=" + std::to_string(frame.rows()) + ")");
  double se = 0, ae = 0;
  std::int64_t count = 0;
  ForwardCtx ctx;  // eval mode: no dropout
  for (Index at = 0; at < n; at += batch_size) {
    Index bs = std::min<Index>(batch_size, n - at);
    std::vector<Index> starts(static_cast<std::size_t>(bs));
    for (Index i = 0; i < bs; ++i) starts[static_cast<std::size_t>(i)] = at + i;
    Tensor<S> x, y;
    sampler.fill(frame, starts, x, y);
    auto out = model_forward(x, model, ctx);
    const S* p = out.forecast.data();
    const S* t = y.data();
    for (Index i = 0; i < y.size(); ++i) {
      double d = double(p[i]) - double(t[i]);
      se += d * d;
      ae += std::abs(d);
    }
    count += y.size();
  }
  return {se / double(count), ae / double(count)};
}

template <typename S>
struct TrainResult {
  DprNetModel<S> best_model;
  std::vector<EpochStats> history;
  int best_epoch = 0;
  double best_val_mse = 0.0;
  ChannelStats scaler;
};

namespace detail {

/// One optimization step over a batch, sharded across workers. Each shard has
/// its own tape; shard losses are weighted by shard size so the merged
/// gradient equals the full-batch gradient of mse + lambda*penalty.
template <typename S>
std::pair<double, double> batch_step(DprNetModel<S>& model,
                                     std::vector<std::pair<std::string, Tensor<S>>>& params,
                                     AdamState<S>& adam, const Tensor<S>& x, const Tensor<S>& y,
                                     const TrainConfig& tc, std::uint64_t step_key, int workers) {
  const Index B = x.extent(0);
  const Index T = x.extent(1), C = x.extent(2), H = y.extent(1);
  workers = std::max(1, std::min<int>(workers, static_cast<int>(B)));
  struct Shard {
    Tape<S> tape;
    double loss = 0, penalty = 0, weight = 0;
    std::exception_ptr error;
  };
  std::vector<Shard> shards(static_cast<std::size_t>(workers));
  for (auto& [name, p] : params) p.zero_grad();

  auto run_shard = [&](int w, Index lo, Index hi) {
    Shard& sh = shards[static_cast<std::size_t>(w)];
    try {
      Index rows = hi - lo;
      Tensor<S> xs(Shape{rows, T, C});
      Tensor<S> ys(Shape{rows, H, C});
      std::copy(x.data() + lo * T * C, x.data() + hi * T * C, xs.data());
      std::copy(y.data() + lo * H * C, y.data() + hi * H * C, ys.data());
      Rng drop_rng(mix64(mix64(tc.seed, step_key), static_cast<std::uint64_t>(w)));
      ForwardCtx ctx{true, &drop_rng};
      double weight = double(rows) / double(B);
      TapeScope<S> scope(sh.tape);
      auto out = model_forward(xs, model, ctx);
      auto loss = scale(total_loss(out.forecast, ys, out.penalty, tc.lambda_orth), weight);
      sh.loss = double(loss.item());
      sh.penalty = double(out.penalty.item()) * weight;
      sh.weight = weight;
      if (!std::isfinite(sh.loss)) throw NumericError("train: non-finite loss");
      sh.tape.backward_no_flush(loss);
    } catch (...) {
      sh.error = std::current_exception();
    }
  };

  if (workers == 1) {
    run_shard(0, 0, B);
  } else {
    std::vector<std::thread> threads;
    Index chunk = (B + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
      Index lo = std::min<Index>(B, w * chunk), hi = std::min<Index>(B, (w + 1) * chunk);
      if (lo >= hi) {
        shards[static_cast<std::size_t>(w)].weight = 0;
        continue;
      }
      threads.emplace_back(run_shard, w, lo, hi);
    }
    for (auto& t : threads) t.join();
  }
  double loss = 0, penalty = 0;
  for (auto& sh : shards) {
    if (sh.error) std::rethrow_exception(sh.error);
    loss += sh.loss;
    penalty += sh.penalty;
    if (sh.weight > 0) sh.tape.flush_leaf_grads();  // fixed shard order
  }
  if (tc.grad_clip > 0) clip_gradients(params, tc.grad_clip);
  adam_step(params, adam, tc.lr);
  return {loss, penalty};
}

}  // namespace detail

/// Full training protocol over raw (unstandardized) chronological splits.
/// Channels are standardized by train-split statistics; those statistics are
/// stored in the model so later consumers reproduce the same scale.
template <typename S>
TrainResult<S> train(DprNetModel<S>& model, const SplitFrames& splits, const TrainConfig& tc,
                     std::ostream* epoch_log = nullptr) {
  tc.validate();
  WindowSampler sampler{model.cfg.lookback, model.cfg.horizon};
  auto stats = channel_stats(splits.train);
  SeriesFrame train_frame = standardize(splits.train, stats);
  SeriesFrame val_frame = standardize(splits.val, stats);
  const Index n_train = sampler.count(train_frame);
  const Index n_val = sampler.count(val_frame);
  if (n_train < 1)
    throw ConfigError("train: train split has " + std::to_string(splits.train.rows()) +
                      " rows, too short for lookback+horizon");
  if (n_val < 1)
    throw ConfigError("train: val split has " + std::to_string(splits.val.rows()) +
                      " rows, too short for lookback+horizon");
  if (model.cfg.channels != train_frame.cols())
    throw ConfigError("train: model expects " + std::to_string(model.cfg.channels) + " channels, data has " +
                      std::to_string(train_frame.cols()));
  for (Index c = 0; c < train_frame.cols(); ++c) {
    model.scaler_mean.values()[static_cast<std::size_t>(c)] = static_cast<S>(stats.mean[static_cast<std::size_t>(c)]);
    model.scaler_std.values()[static_cast<std::size_t>(c)] = static_cast<S>(stats.std[static_cast<std::size_t>(c)]);
  }

  auto params = model.parameters();
  auto adam = AdamState<S>::init(params);
  EarlyStopper stopper{tc.patience};
  TrainResult<S> result;
  result.scaler = stats;
  result.best_model = model.clone();
  const int workers = worker_count();

  std::vector<Index> order(static_cast<std::size_t>(n_train));
  for (Index i = 0; i < n_train; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    Rng shuffle_rng(mix64(tc.seed, 0x3u * 1000003u + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    double loss_sum = 0, penalty_sum = 0;
    Index seen = 0;
    int step = 0;
    for (Index at = 0; at < n_train; at += tc.batch_size, ++step) {
      Index bs = std::min<Index>(tc.batch_size, n_train - at);
      Tensor<S> x, y;
      sampler.fill(train_frame, std::span<const Index>(order.data() + at, static_cast<std::size_t>(bs)), x, y);
      auto [loss, penalty] = detail::batch_step(model, params, adam, x, y, tc,
                                                static_cast<std::uint64_t>(epoch) * 0x10000u +
                                                    static_cast<std::uint64_t>(step),
                                                workers);
      loss_sum += loss * double(bs);
      penalty_sum += penalty * double(bs);
      seen += bs;
    }
    auto [val_mse, val_mae] = evaluate(model, val_frame);
    (void)val_mae;
    EpochStats row{epoch, loss_sum / double(seen), val_mse, penalty_sum / double(seen)};
    result.history.push_back(row);
    if (epoch_log) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", row.epoch, row.train_loss, row.val_mse,
                    row.orth_penalty);
      (*epoch_log) << buf;
    }
    if (stopper.update(val_mse, epoch)) result.best_model = model.clone();
    if (stopper.should_stop()) break;
    double train_pred_mse = row.train_loss - tc.lambda_orth * row.orth_penalty;
    if (tc.stop_train_loss > 0 && train_pred_mse < tc.stop_train_loss) break;
  }
  result.best_epoch = stopper.best_epoch;
  result.best_val_mse = stopper.best;
  return result;
}

}  // namespace dpr
