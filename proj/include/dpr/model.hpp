// SPDX-License-Identifier: Apache-2.0
//
// Minimalist channel-independent forecaster: RevIN -> overlapping patch
// embedding -> N pre-norm (MLP, adapter) residual blocks -> flattened linear
// head -> RevIN inverse. Every stage treats channels independently, so a
// channel's forecast is a function of that channel's history alone.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dpr/adapter.hpp"
#include "dpr/ops.hpp"

namespace dpr {

struct BackboneConfig {
  int lookback = 96;       // T
  int horizon = 96;        // H
  int channels = 1;        // C
  int patch_len = 16;      // P
  int patch_stride = 8;    // S
  int hidden_dim = 256;    // d
  int n_blocks = 2;
  int mlp_hidden = 0;      // 0 = expansion * hidden_dim
  double mlp_expansion = 2.0;
  double dropout = 0.1;
  bool use_adapter = true;
  DprConfig adapter;

  int resolved_mlp_hidden() const {
    return mlp_hidden > 0 ? mlp_hidden : static_cast<int>(mlp_expansion * hidden_dim);
  }
  /// Token count after replicate-padded patching of the lookback window.
  int token_count() const {
    return static_cast<int>((lookback - patch_len + patch_stride - 1) / patch_stride + 1);
  }
  void validate() const {
    if (lookback < 2) throw ConfigError("model: lookback must be >= 2");
    if (horizon < 1) throw ConfigError("model: horizon must be >= 1");
    if (channels < 1) throw ConfigError("model: channels must be >= 1");
    if (patch_len < 1 || patch_stride < 1) throw ConfigError("model: patch length/stride must be positive");
    if (lookback < patch_len)
      throw ConfigError("model: lookback " + std::to_string(lookback) + " shorter than patch length " +
                        std::to_string(patch_len));
    if (n_blocks < 1) throw ConfigError("model: need at least one block");
    if (dropout < 0 || dropout >= 1) throw ConfigError("model: dropout must be in [0,1)");
    if (use_adapter) {
      DprConfig a = adapter;
      a.hidden_dim = hidden_dim;
      a.validate();
    }
  }
};

/// Per-window normalization statistics, captured at normalize time. `scale`
/// is what the data was divided by (sigma + eps); denormalize multiplies by
/// the same value so the round trip is exact to rounding.
template <typename S>
struct RevInState {
  Tensor<S> mean;   // [B, C]
  Tensor<S> scale;  // [B, C]
};

template <typename S>
struct LayerNormParams {
  Tensor<S> gain, bias;
  static LayerNormParams init(Index d) {
    LayerNormParams p;
    p.gain = Tensor<S>(Shape{d}, S(1));
    p.bias = Tensor<S>(Shape{d}, S(0));
    p.gain.set_requires_grad(true);
    p.bias.set_requires_grad(true);
    return p;
  }
};

template <typename S>
struct MlpParams {
  Tensor<S> w1, b1, w2, b2;
};

template <typename S>
struct DprBlock {
  LayerNormParams<S> ln1;
  MlpParams<S> mlp;
  // present only when the adapter is enabled
  LayerNormParams<S> ln2;
  DprParams<S> adapter;
};

namespace detail {
template <typename S>
inline Tensor<S> uniform_param(Shape shape, std::uint64_t seed, const std::string& name, double bound) {
  Tensor<S> t(std::move(shape));
  Rng rng(name_seed(seed, name));
  for (auto& v : t.values()) v = static_cast<S>(rng.uniform(-bound, bound));
  t.set_requires_grad(true);
  return t;
}
}  // namespace detail

template <typename S>
struct DprNetModel {
  BackboneConfig cfg;
  Tensor<S> revin_gain, revin_bias;  // per-channel affine, identity at init
  Tensor<S> embed_w, embed_b;        // [P, d], [d]
  std::vector<DprBlock<S>> blocks;
  Tensor<S> head_w, head_b;          // [L*d, H], [H]
  // train-split standardization, stored for original-scale forecasts
  Tensor<S> scaler_mean, scaler_std;  // [C] buffers, not trained

  static DprNetModel init(BackboneConfig cfg, std::uint64_t seed) {
    cfg.adapter.hidden_dim = cfg.hidden_dim;
    cfg.validate();
    DprNetModel m;
    m.cfg = cfg;
    const Index C = cfg.channels, P = cfg.patch_len, d = cfg.hidden_dim;
    const Index L = cfg.token_count(), H = cfg.horizon;
    m.revin_gain = Tensor<S>(Shape{C}, S(1));
    m.revin_gain.set_requires_grad(true);
    m.revin_bias = Tensor<S>(Shape{C}, S(0));
    m.revin_bias.set_requires_grad(true);
    m.embed_w = detail::uniform_param<S>(Shape{P, d}, seed, "embed.weight", 1.0 / std::sqrt(double(P)));
    m.embed_b = Tensor<S>(Shape{d}, S(0));
    m.embed_b.set_requires_grad(true);
    const Index hidden = cfg.resolved_mlp_hidden();
    for (int b = 0; b < cfg.n_blocks; ++b) {
      std::string prefix = "blocks." + std::to_string(b) + ".";
      DprBlock<S> blk;
      blk.ln1 = LayerNormParams<S>::init(d);
      blk.mlp.w1 = detail::uniform_param<S>(Shape{d, hidden}, seed, prefix + "mlp.w1", 1.0 / std::sqrt(double(d)));
      blk.mlp.b1 = Tensor<S>(Shape{hidden}, S(0));
      blk.mlp.b1.set_requires_grad(true);
      blk.mlp.w2 = detail::uniform_param<S>(Shape{hidden, d}, seed, prefix + "mlp.w2", 1.0 / std::sqrt(double(hidden)));
      blk.mlp.b2 = Tensor<S>(Shape{d}, S(0));
      blk.mlp.b2.set_requires_grad(true);
      if (cfg.use_adapter) {
        blk.ln2 = LayerNormParams<S>::init(d);
        blk.adapter = DprParams<S>::init(m.cfg.adapter, seed, prefix + "dpr.");
      }
      m.blocks.push_back(std::move(blk));
    }
    m.head_w = detail::uniform_param<S>(Shape{L * d, H}, seed, "head.weight", 1.0 / std::sqrt(double(L * d)));
    m.head_b = Tensor<S>(Shape{H}, S(0));
    m.head_b.set_requires_grad(true);
    m.scaler_mean = Tensor<S>(Shape{C}, S(0));
    m.scaler_std = Tensor<S>(Shape{C}, S(1));
    return m;
  }

  /// Trainable parameters in fixed declaration order.
  void visit_params(const std::function<void(const std::string&, Tensor<S>&)>& fn) {
    fn("revin.gain", revin_gain);
    fn("revin.bias", revin_bias);
    fn("embed.weight", embed_w);
    fn("embed.bias", embed_b);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      std::string prefix = "blocks." + std::to_string(b) + ".";
      auto& blk = blocks[b];
      fn(prefix + "ln1.gain", blk.ln1.gain);
      fn(prefix + "ln1.bias", blk.ln1.bias);
      fn(prefix + "mlp.w1", blk.mlp.w1);
      fn(prefix + "mlp.b1", blk.mlp.b1);
      fn(prefix + "mlp.w2", blk.mlp.w2);
      fn(prefix + "mlp.b2", blk.mlp.b2);
      if (cfg.use_adapter) {
        fn(prefix + "ln2.gain", blk.ln2.gain);
        fn(prefix + "ln2.bias", blk.ln2.bias);
        blk.adapter.visit(prefix + "dpr.", fn);
      }
    }
    fn("head.weight", head_w);
    fn("head.bias", head_b);
  }

  std::vector<std::pair<std::string, Tensor<S>>> parameters() {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    visit_params([&](const std::string& n, Tensor<S>& t) { out.emplace_back(n, t); });
    return out;
  }

  Index param_count() {
    Index n = 0;
    visit_params([&](const std::string&, Tensor<S>& t) { n += t.size(); });
    return n;
  }

  DprNetModel clone() {
    DprNetModel copy = *this;
    // deep-copy every tensor so the clone is independent
    copy.blocks = blocks;
    auto deep = [](Tensor<S>& t) { t = t.clone(); };
    copy.visit_params([&](const std::string&, Tensor<S>& t) { deep(t); });
    copy.scaler_mean = scaler_mean.clone();
    copy.scaler_std = scaler_std.clone();
    return copy;
  }
};

/// Forward-pass context: dropout is active only in training mode.
struct ForwardCtx {
  bool training = false;
  Rng* dropout_rng = nullptr;
};

/// Per-(sample, channel) instance normalization with learnable affine.
/// x: [B, T, C]. Population std; the divisor (sigma + eps) is kept in the
/// state so the inverse is exact.
template <typename S>
std::pair<Tensor<S>, RevInState<S>> revin_normalize(const Tensor<S>& x, const Tensor<S>& gain,
                                                    const Tensor<S>& bias, double eps = 1e-5) {
  if (x.ndim() != 3) throw DimensionError("revin_normalize: input must be [B,T,C], got " + shape_str(x.shape()));
  const Index B = x.extent(0), T = x.extent(1), C = x.extent(2);
  if (T < 2) throw ConfigError("revin_normalize: window length must be >= 2");
  if (gain.size() != C || bias.size() != C)
    throw DimensionError("revin_normalize: affine params must have " + std::to_string(C) + " channels");
  RevInState<S> state{Tensor<S>(Shape{B, C}), Tensor<S>(Shape{B, C})};
  Tensor<S> out(x.shape());
  const S* px = x.data();
  const S* pg = gain.data();
  const S* pb = bias.data();
  S* po = out.data();
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c) {
      S mean = 0;
      for (Index t = 0; t < T; ++t) mean += px[(b * T + t) * C + c];
      mean /= static_cast<S>(T);
      S var = 0;
      for (Index t = 0; t < T; ++t) {
        S d = px[(b * T + t) * C + c] - mean;
        var += d * d;
      }
      var /= static_cast<S>(T);
      S scale_v = std::sqrt(var) + static_cast<S>(eps);
      state.mean.data()[b * C + c] = mean;
      state.scale.data()[b * C + c] = scale_v;
      for (Index t = 0; t < T; ++t)
        po[(b * T + t) * C + c] = (px[(b * T + t) * C + c] - mean) / scale_v * pg[c] + pb[c];
    }
  if (auto* tp = Tape<S>::active()) {
    int ix = tp->node_of(x), ig = tp->node_of(gain), ib = tp->node_of(bias);
    if (ix >= 0 || ig >= 0 || ib >= 0) {
      int io = tp->record(out);
      Tensor<S> cx = x, cgain = gain;
      RevInState<S> cs = state;
      tp->set_backward(io, [=](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        for (Index b = 0; b < B; ++b)
          for (Index c = 0; c < C; ++c) {
            S mean = cs.mean.data()[b * C + c];
            S scale_v = cs.scale.data()[b * C + c];
            for (Index tt = 0; tt < T; ++tt) {
              std::size_t i = static_cast<std::size_t>((b * T + tt) * C + c);
              S xh = (cx.data()[i] - mean) / scale_v;
              if (ig >= 0) t.adjoint(ig)[static_cast<std::size_t>(c)] += g[i] * xh;
              if (ib >= 0) t.adjoint(ib)[static_cast<std::size_t>(c)] += g[i];
              if (ix >= 0) t.adjoint(ix)[i] += g[i] * cgain.data()[c] / scale_v;
            }
          }
      });
    }
  }
  return {out, state};
}

/// Inverse of revin_normalize for the forecast window: undo the affine, then
/// re-apply the captured scale and mean. y: [B, H, C].
template <typename S>
Tensor<S> revin_denormalize(const Tensor<S>& y, const RevInState<S>& state, const Tensor<S>& gain,
                            const Tensor<S>& bias) {
  if (y.ndim() != 3) throw DimensionError("revin_denormalize: input must be [B,H,C], got " + shape_str(y.shape()));
  const Index B = y.extent(0), H = y.extent(1), C = y.extent(2);
  if (state.mean.shape() != Shape{B, C})
    throw ContractError("revin_denormalize: state shape " + shape_str(state.mean.shape()) +
                        " does not match input " + shape_str(y.shape()));
  if (gain.size() != C || bias.size() != C)
    throw DimensionError("revin_denormalize: affine params must have " + std::to_string(C) + " channels");
  Tensor<S> out(y.shape());
  const S* py = y.data();
  const S* pg = gain.data();
  const S* pb = bias.data();
  S* po = out.data();
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c) {
      S mean = state.mean.data()[b * C + c];
      S scale_v = state.scale.data()[b * C + c];
      for (Index h = 0; h < H; ++h)
        po[(b * H + h) * C + c] = (py[(b * H + h) * C + c] - pb[c]) / pg[c] * scale_v + mean;
    }
  if (auto* tp = Tape<S>::active()) {
    int iy = tp->node_of(y), ig = tp->node_of(gain), ib = tp->node_of(bias);
    if (iy >= 0 || ig >= 0 || ib >= 0) {
      int io = tp->record(out);
      Tensor<S> cy = y, cgain = gain, cbias = bias;
      RevInState<S> cs = state;
      tp->set_backward(io, [=](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        for (Index b = 0; b < B; ++b)
          for (Index c = 0; c < C; ++c) {
            S scale_v = cs.scale.data()[b * C + c];
            S gv = cgain.data()[c];
            for (Index h = 0; h < H; ++h) {
              std::size_t i = static_cast<std::size_t>((b * H + h) * C + c);
              if (iy >= 0) t.adjoint(iy)[i] += g[i] * scale_v / gv;
              if (ib >= 0) t.adjoint(ib)[static_cast<std::size_t>(c)] -= g[i] * scale_v / gv;
              if (ig >= 0)
                t.adjoint(ig)[static_cast<std::size_t>(c)] -=
                    g[i] * (cy.data()[i] - cbias.data()[c]) * scale_v / (gv * gv);
            }
          }
      });
    }
  }
  return out;
}

template <typename S>
Tensor<S> mlp_forward(const Tensor<S>& x, const MlpParams<S>& mlp, double dropout_rate, const ForwardCtx& ctx) {
  auto h = gelu(add_bias(matmul(x, mlp.w1), mlp.b1));
  if (ctx.training && dropout_rate > 0) {
    if (!ctx.dropout_rng) throw ContractError("mlp_forward: training mode needs a dropout rng");
    h = dropout(h, dropout_rate, *ctx.dropout_rng);
  }
  return add_bias(matmul(h, mlp.w2), mlp.b2);
}

template <typename S>
struct BlockOutput {
  Tensor<S> hidden;
  Tensor<S> penalty;  // scalar; zero tensor when the adapter is disabled
};

/// Z = H + MLP(LN(H)); out = Z + (DPR(LN(Z)) - LN(Z)). The adapter branch
/// adds only the modulation delta, so a zero-gain adapter leaves the block
/// output bit-identical to the adapter-free block.
template <typename S>
BlockOutput<S> block_forward(const Tensor<S>& h, DprBlock<S>& block, const BackboneConfig& cfg,
                             const ForwardCtx& ctx) {
  auto z = add(h, mlp_forward(layer_norm(h, block.ln1.gain, block.ln1.bias), block.mlp, cfg.dropout, ctx));
  if (!cfg.use_adapter) return {z, Tensor<S>::scalar(S(0))};
  auto zn = layer_norm(z, block.ln2.gain, block.ln2.bias);
  DprConfig acfg = cfg.adapter;
  acfg.hidden_dim = cfg.hidden_dim;
  auto adapted = dpr_forward(zn, block.adapter, acfg);
  auto out = add(z, sub(adapted.hidden, zn));
  return {out, adapted.penalty};
}

template <typename S>
struct ModelOutput {
  Tensor<S> forecast;  // [B, H, C]
  Tensor<S> penalty;   // scalar, sum of block penalties
};

/// Routing weights of the final block's adapter for each channel-independent
/// token sequence: [B*C, L, K]. Mirrors model_forward up to the last
/// adapter's routing stage; used for pattern-assignment analysis.
template <typename S>
Tensor<S> model_routing(const Tensor<S>& x, DprNetModel<S>& model) {
  const BackboneConfig& cfg = model.cfg;
  if (!cfg.use_adapter) throw ContractError("model_routing: model has no adapters");
  const Index B = x.extent(0), T = cfg.lookback, C = cfg.channels;
  ForwardCtx ctx;
  auto [xn, state] = revin_normalize(x, model.revin_gain, model.revin_bias);
  auto seqs = reshape(swap_last2(xn), {B * C, T});
  auto patches = patchify(seqs, cfg.patch_len, cfg.patch_stride);
  auto hidden = add_bias(matmul(patches, model.embed_w), model.embed_b);
  for (std::size_t b = 0; b + 1 < model.blocks.size(); ++b)
    hidden = block_forward(hidden, model.blocks[b], cfg, ctx).hidden;
  auto& last = model.blocks.back();
  auto z = add(hidden, mlp_forward(layer_norm(hidden, last.ln1.gain, last.ln1.bias), last.mlp, cfg.dropout, ctx));
  auto zn = layer_norm(z, last.ln2.gain, last.ln2.bias);
  DprConfig acfg = cfg.adapter;
  acfg.hidden_dim = cfg.hidden_dim;
  return route(perceive(zn, last.adapter, acfg), last.adapter, acfg).weights;
}

/// Whole-network forward: x [B, T, C] -> forecast [B, H, C].
template <typename S>
ModelOutput<S> model_forward(const Tensor<S>& x, DprNetModel<S>& model, const ForwardCtx& ctx = {}) {
  const BackboneConfig& cfg = model.cfg;
  if (x.ndim() != 3)
    throw DimensionError("model_forward: input must be [B,T,C], got " + shape_str(x.shape()));
  if (x.extent(1) != cfg.lookback)
    throw ConfigError("model_forward: time axis is " + std::to_string(x.extent(1)) + ", configured lookback is " +
                      std::to_string(cfg.lookback));
  if (x.extent(2) != cfg.channels)
    throw ConfigError("model_forward: channel axis is " + std::to_string(x.extent(2)) +
                      ", configured channels is " + std::to_string(cfg.channels));
  const Index B = x.extent(0), T = cfg.lookback, C = cfg.channels;
  const Index L = cfg.token_count(), d = cfg.hidden_dim, H = cfg.horizon;

  auto [xn, state] = revin_normalize(x, model.revin_gain, model.revin_bias);
  auto seqs = reshape(swap_last2(xn), {B * C, T});                       // channel-independent series
  auto patches = patchify(seqs, cfg.patch_len, cfg.patch_stride);       // [B*C, L, P]
  auto hidden = add_bias(matmul(patches, model.embed_w), model.embed_b);  // [B*C, L, d]

  Tensor<S> penalty = Tensor<S>::scalar(S(0));
  for (auto& blk : model.blocks) {
    auto out = block_forward(hidden, blk, cfg, ctx);
    hidden = out.hidden;
    penalty = add(penalty, out.penalty);
  }

  auto flat = reshape(hidden, {B * C, L * d});  // tokens-major, features inner
  auto decoded = add_bias(matmul(flat, model.head_w), model.head_b);  // [B*C, H]
  auto yn = swap_last2(reshape(decoded, {B, C, H}));                  // [B, H, C]
  auto y = revin_denormalize(yn, state, model.revin_gain, model.revin_bias);
  return {y, penalty};
}

}  // namespace dpr
