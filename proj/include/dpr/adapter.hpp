// SPDX-License-Identifier: Apache-2.0
//
// Perceive–Route–Modulate adapter: multi-scale depthwise perception of local
// context, cosine soft-routing over learned pattern centroids, and residual
// Hadamard recalibration h * (1 + gamma*m) with a zero-initialized gain, so a
// fresh adapter is an exact identity map.
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dpr/ops.hpp"
#include "dpr/rng.hpp"
#include "dpr/tensor.hpp"

namespace dpr {

enum class RoutingMode { kSoft, kHard };

struct DprConfig {
  int patterns = 8;              // K
  int hidden_dim = 256;          // d
  int context_dim = 0;           // d_c; 0 = max(16, d/4)
  std::vector<int> kernels = {3, 7};
  double lambda_orth = 1e-4;
  RoutingMode routing = RoutingMode::kSoft;
  bool multiscale = true;
  bool identity_init = true;  // false: random gain (ablation)

  int resolved_context_dim() const {
    return context_dim > 0 ? context_dim : std::max(16, hidden_dim / 4);
  }
  /// Kernel sizes actually used; multiscale off collapses perception to a
  /// single pointwise branch.
  std::vector<int> effective_kernels() const {
    return multiscale ? kernels : std::vector<int>{1};
  }
  int perception_width() const {
    return hidden_dim * static_cast<int>(effective_kernels().size());
  }

  void validate() const {
    if (patterns < 1) throw ConfigError("adapter: pattern count must be >= 1");
    if (hidden_dim < 1) throw ConfigError("adapter: hidden dim must be >= 1");
    if (resolved_context_dim() < 1) throw ConfigError("adapter: context dim must be >= 1");
    if (lambda_orth < 0) throw ConfigError("adapter: lambda_orth must be >= 0");
    for (int k : effective_kernels())
      if (k < 1 || k % 2 == 0)
        throw ConfigError("adapter: kernel sizes must be odd and positive, got " + std::to_string(k));
  }
};

/// Learnable state of one adapter.
template <typename S>
struct DprParams {
  Tensor<S> basis;                       // M [K, d]
  Tensor<S> centroids;                   // E [K, d_c]
  Tensor<S> proj_w;                      // W1 [d * n_k, d_c]
  Tensor<S> proj_b;                      // b1 [d_c]
  Tensor<S> log_tau;                     // tau = exp(log_tau) > 0 always
  Tensor<S> gain;                        // gamma
  std::vector<Tensor<S>> conv_kernels;   // one [d, k] per kernel size

  static DprParams init(const DprConfig& cfg, std::uint64_t seed, const std::string& prefix) {
    cfg.validate();
    const int K = cfg.patterns, d = cfg.hidden_dim, dc = cfg.resolved_context_dim();
    const int win = cfg.perception_width();
    DprParams p;
    auto uniform_fill = [&](Tensor<S>& t, const std::string& name, double bound) {
      Rng rng(name_seed(seed, prefix + name));
      for (auto& v : t.values()) v = static_cast<S>(rng.uniform(-bound, bound));
      t.set_requires_grad(true);
    };
    p.basis = Tensor<S>(Shape{K, d});
    uniform_fill(p.basis, "basis", 1.0 / std::sqrt(double(d)));
    p.centroids = Tensor<S>(Shape{K, dc});
    uniform_fill(p.centroids, "centroids", 1.0 / std::sqrt(double(dc)));
    p.proj_w = Tensor<S>(Shape{win, dc});
    uniform_fill(p.proj_w, "proj_w", 1.0 / std::sqrt(double(win)));
    p.proj_b = Tensor<S>(Shape{dc}, S(0));
    p.proj_b.set_requires_grad(true);
    p.log_tau = Tensor<S>::scalar(S(0));  // tau = 1
    p.log_tau.set_requires_grad(true);
    p.gain = Tensor<S>::scalar(S(0));
    if (!cfg.identity_init) {
      Rng rng(name_seed(seed, prefix + "gain"));
      p.gain.values()[0] = static_cast<S>(rng.uniform(-1.0, 1.0));
    }
    p.gain.set_requires_grad(true);
    for (int k : cfg.effective_kernels()) {
      Tensor<S> kernel(Shape{d, k});
      uniform_fill(kernel, "conv" + std::to_string(k), 1.0 / std::sqrt(double(k)));
      p.conv_kernels.push_back(kernel);
    }
    return p;
  }

  void visit(const std::string& prefix, const std::function<void(const std::string&, Tensor<S>&)>& fn) {
    fn(prefix + "basis", basis);
    fn(prefix + "centroids", centroids);
    fn(prefix + "proj_w", proj_w);
    fn(prefix + "proj_b", proj_b);
    fn(prefix + "log_tau", log_tau);
    fn(prefix + "gain", gain);
    for (auto& k : conv_kernels) fn(prefix + "conv" + std::to_string(k.extent(1)), k);
  }
};

/// Multi-scale local context: per-kernel depthwise convs in channel-first
/// layout, concatenated on the feature axis. [B,L,d] -> [B,L,d*n_k].
template <typename S>
Tensor<S> perceive(const Tensor<S>& h, const DprParams<S>& params, const DprConfig& cfg) {
  if (h.ndim() != 3) throw DimensionError("perceive: input must be [B,L,d], got " + shape_str(h.shape()));
  if (h.extent(2) != cfg.hidden_dim)
    throw ConfigError("perceive: feature dim " + std::to_string(h.extent(2)) + " != configured " +
                      std::to_string(cfg.hidden_dim));
  auto ht = swap_last2(h);  // [B, d, L]
  std::vector<Tensor<S>> branches;
  branches.reserve(params.conv_kernels.size());
  for (const auto& kernel : params.conv_kernels)
    branches.push_back(swap_last2(depthwise_conv1d(ht, kernel)));
  return branches.size() == 1 ? branches[0] : concat_lastdim(branches);
}

template <typename S>
struct Routing {
  Tensor<S> context;  // c [B, L, d_c]
  Tensor<S> weights;  // pi [B, L, K]
};

/// Context query + cosine soft routing. In hard mode the weights collapse to
/// the argmax one-hot (lowest index on ties) and carry no gradient.
template <typename S>
Routing<S> route(const Tensor<S>& z, const DprParams<S>& params, const DprConfig& cfg) {
  if (z.ndim() != 3) throw DimensionError("route: input must be [B,L,w], got " + shape_str(z.shape()));
  const Index B = z.extent(0), L = z.extent(1), W = z.extent(2);
  if (W != params.proj_w.extent(0))
    throw DimensionError("route: feature width " + std::to_string(W) + " != projection input " +
                         std::to_string(params.proj_w.extent(0)));
  const Index dc = params.proj_w.extent(1);
  const Index K = params.centroids.extent(0);
  auto flat = reshape(z, {B * L, W});
  auto context = gelu(add_bias(matmul(flat, params.proj_w), params.proj_b));  // [B*L, d_c]
  auto c_hat = l2_normalize_lastdim(context);
  auto e_hat = l2_normalize_lastdim(params.centroids);
  auto sims = matmul(c_hat, swap_last2(e_hat));                 // [B*L, K]
  auto scaled = scalar_mul(exp_elem(params.log_tau), sims);
  Tensor<S> pi = (cfg.routing == RoutingMode::kHard) ? one_hot_argmax_lastdim(scaled)
                                                     : softmax_lastdim(scaled);
  return Routing<S>{reshape(context, {B, L, dc}), reshape(pi, {B, L, K})};
}

/// Convex-combine the basis rows by the routing weights and recalibrate:
/// out = h * (1 + gamma * m). gamma = 0 multiplies by exactly 1.
template <typename S>
Tensor<S> modulate(const Tensor<S>& h, const Tensor<S>& pi, const DprParams<S>& params) {
  if (h.ndim() != 3 || pi.ndim() != 3 || h.extent(0) != pi.extent(0) || h.extent(1) != pi.extent(1))
    throw DimensionError("modulate: inconsistent shapes " + shape_str(h.shape()) + " vs " +
                         shape_str(pi.shape()));
  if (pi.extent(2) != params.basis.extent(0) || h.extent(2) != params.basis.extent(1))
    throw DimensionError("modulate: basis " + shape_str(params.basis.shape()) + " incompatible with " +
                         shape_str(h.shape()) + " and " + shape_str(pi.shape()));
  const Index B = h.extent(0), L = h.extent(1), d = h.extent(2), K = pi.extent(2);
  auto m = matmul(reshape(pi, {B * L, K}), params.basis);  // [B*L, d]
  auto scaling = add_const(scalar_mul(params.gain, reshape(m, {B, L, d})), 1.0);
  return mul(h, scaling);
}

/// (1/K) * ||Mhat Mhat^T - I||_F^2 with row-normalized Mhat.
template <typename S>
Tensor<S> orth_penalty(const Tensor<S>& basis) {
  if (basis.ndim() != 2) throw DimensionError("orth_penalty: basis must be [K,d], got " + shape_str(basis.shape()));
  const Index K = basis.extent(0);
  auto m_hat = l2_normalize_lastdim(basis);
  auto gram = matmul(m_hat, swap_last2(m_hat));
  auto dev = sub(gram, identity_matrix<S>(K));
  return scale(sum_squares(dev), 1.0 / static_cast<double>(K));
}

template <typename S>
struct DprOutput {
  Tensor<S> hidden;   // same shape as the input
  Tensor<S> penalty;  // scalar
};

/// Full adapter pass: perceive -> route -> modulate, plus the basis penalty.
template <typename S>
DprOutput<S> dpr_forward(const Tensor<S>& h, const DprParams<S>& params, const DprConfig& cfg) {
  auto z = perceive(h, params, cfg);
  auto routing = route(z, params, cfg);
  auto out = modulate(h, routing.weights, params);
  return DprOutput<S>{out, orth_penalty(params.basis)};
}

}  // namespace dpr
