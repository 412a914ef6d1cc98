// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor operations. Every op computes its value eagerly and,
// when a tape is active and an input is tracked, appends one backward rule.
// Outputs never alias inputs, so buffer identity doubles as node identity.
#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "dpr/rng.hpp"
#include "dpr/tensor.hpp"

namespace dpr {

namespace detail {

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<EMat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const EMat<S>>;

template <typename S>
inline void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// Rows = product of all leading extents, cols = last extent.
template <typename S>
inline std::pair<Index, Index> row_view(const Tensor<S>& t) {
  Index cols = t.extent(-1);
  return {t.size() / cols, cols};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<S> out(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (Index i = 0; i < a.size(); ++i) po[i] = pa[i] + pb[i];
  if (auto* tp = Tape<S>::active()) {
    int ia = tp->node_of(a), ib = tp->node_of(b);
    if (ia >= 0 || ib >= 0) {
      int io = tp->record(out);
      tp->set_backward(io, [=](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        if (ia >= 0) {
          auto& ga = t.adjoint(ia);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (ib >= 0) {
          auto& gb = t.adjoint(ib);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
      });
    }
  }
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<S> out(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (Index i = 0; i < a.size(); ++i) po[i] = pa[i] - pb[i];
  if (auto* tp = Tape<S>::active()) {
    int ia = tp->node_of(a), ib = tp->node_of(b);
    if (ia >= 0 || ib >= 0) {
      int io = tp->record(out);
      tp->set_backward(io, [=](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        if (ia >= 0) {
          auto& ga = t.adjoint(ia);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (ib >= 0) {
          auto& gb = t.adjoint(ib);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
      });
    }
  }
  return out;
}

/// Hadamard product.
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<S> out(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (Index i = 0; i < a.size(); ++i) po[i] = pa[i] * pb[i];
  if (auto* tp = Tape<S>::active()) {
    int ia = tp->node_of(a), ib = tp->node_of(b);
    if (ia >= 0 || ib >= 0) {
      int io = tp->record(out);
      Tensor<S> ca = a, cb = b;
      tp->set_backward(io, [=](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        if (ia >= 0) {
          auto& ga = t.adjoint(ia);
          const S* vb = cb.data();
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
        }
        if (ib >= 0) {
          auto& gb = t.adjoint(ib);
          const S* va = ca.data();
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
        }
      });
    }
  }
  return out;
}

/// out = c * x for a plain (non-learnable) constant c.
template <typename S>
Tensor<S> scale(const Tensor<S>& x, double c) {
  Tensor<S> out(x.shape());
  const S* px = x.data();
  S* po = out.data();
  const S sc = static_cast<S>(c);
  for (Index i = 0; i < x.size(); ++i) po[i] = sc * px[i];
  if (auto* tp = Tape<S>::active()) {
    int ix = tp->node_of(x);
    if (ix >= 0) {
      int io = tp->record(out);
      tp->set_backward(io, [=](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        auto& gx = t.adjoint(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += sc * g[i];
      });
    }
  }
  return out;
}

/// out = x + c elementwise, constant c.
template <typename S>
Tensor<S> add_const(const Tensor<S>& x, double c) {
  Tensor<S> out(x.shape());
  const S* px = x.data();
  S* po = out.data();
  const S sc = static_cast<S>(c);
  for (Index i = 0; i < x.size(); ++i) po[i] = px[i] + sc;
  if (auto* tp = Tape<S>::active()) {
    int ix = tp->node_of(x);
    if (ix >= 0) {
      int io = tp->record(out);
      tp->set_backward(io, [=](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        auto& gx = t.adjoint(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      });
    }
  }
  return out;
}

/// out = s * x where s is a learnable one-element tensor.
template <typename S>
Tensor<S> scalar_mul(const Tensor<S>& s, const Tensor<S>& x) {
  if (s.size() != 1) throw DimensionError("scalar_mul: scale must have one element, got " + shape_str(s.shape()));
  Tensor<S> out(x.shape());
  const S sv = s.item();
  const S* px = x.data();
  S* po = out.data();
  for (Index i = 0; i < x.size(); ++i) po[i] = sv * px[i];
  if (auto* tp = Tape<S>::active()) {
    int is = tp->node_of(s), ix = tp->node_of(x);
    if (is >= 0 || ix >= 0) {
      int io = tp->record(out);
      Tensor<S> cx = x;
      tp->set_backward(io, [=](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        if (is >= 0) {
          S acc = 0;
          const S* vx = cx.data();
          for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * vx[i];
          t.adjoint(is)[0] += acc;
        }
        if (ix >= 0) {
          auto& gx = t.adjoint(ix);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += sv * g[i];
        }
      });
    }
  }
  return out;
}

template <typename S>
Tensor<S> exp_elem(const Tensor<S>& x) {
  Tensor<S> out(x.shape());
  const S* px = x.data();
  S* po = out.data();
  for (Index i = 0; i < x.size(); ++i) po[i] = std::exp(px[i]);
  if (auto* tp = Tape<S>::active()) {
    int ix = tp->node_of(x);
    if (ix >= 0) {
      int io = tp->record(out);
      Tensor<S> co = out;
      tp->set_backward(io, [=](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        auto& gx = t.adjoint(ix);
        const S* vo = co.data();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * vo[i];
      });
    }
  }
  return out;
}

/// x + bias with bias broadcast over all leading axes (bias length = last extent).
template <typename S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& bias) {
  auto [rows, cols] = detail::row_view(x);
  if (bias.ndim() != 1 || bias.size() != cols)
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match last extent of " +
                         shape_str(x.shape()));
  Tensor<S> out(x.shape());
  const S* px = x.data();
  const S* pb = bias.data();
  S* po = out.data();
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) po[r * cols + c] = px[r * cols + c] + pb[c];
  if (auto* tp = Tape<S>::active()) {
    int ix = tp->node_of(x), ib = tp->node_of(bias);
    if (ix >= 0 || ib >= 0) {
      int io = tp->record(out);
      tp->set_backward(io, [=, rows = rows, cols = cols](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        if (ix >= 0) {
          auto& gx = t.adjoint(ix);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (ib >= 0) {
          auto& gb = t.adjoint(ib);
          for (Index r = 0; r < rows; ++r)
            for (Index c = 0; c < cols; ++c) gb[static_cast<std::size_t>(c)] += g[static_cast<std::size_t>(r * cols + c)];
        }
      });
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor<S> out(std::move(shape), x.values());
  if (auto* tp = Tape<S>::active()) {
    int ix = tp->node_of(x);
    if (ix >= 0) {
      int io = tp->record(out);
      tp->set_backward(io, [=](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        auto& gx = t.adjoint(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      });
    }
  }
  return out;
}

namespace detail {
template <typename S>
inline void swap_last2_raw(const S* src, S* dst, Index batch, Index rows, Index cols) {
  for (Index b = 0; b < batch; ++b) {
    const S* s = src + b * rows * cols;
    S* d = dst + b * rows * cols;
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) d[c * rows + r] = s[r * cols + c];
  }
}
}  // namespace detail

/// Transpose the trailing two axes (leading axes are batch).
template <typename S>
Tensor<S> swap_last2(const Tensor<S>& x) {
  if (x.ndim() < 2) throw DimensionError("swap_last2: need rank >= 2, got " + shape_str(x.shape()));
  Shape os = x.shape();
  std::swap(os[os.size() - 1], os[os.size() - 2]);
  Index rows = x.extent(-2), cols = x.extent(-1);
  Index batch = x.size() / (rows * cols);
  Tensor<S> out(os);
  detail::swap_last2_raw(x.data(), out.data(), batch, rows, cols);
  if (auto* tp = Tape<S>::active()) {
    int ix = tp->node_of(x);
    if (ix >= 0) {
      int io = tp->record(out);
      tp->set_backward(io, [=](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        auto& gx = t.adjoint(ix);
        // transpose of the gradient, accumulated
        for (Index b = 0; b < batch; ++b) {
          const S* gs = g.data() + b * rows * cols;
          S* gd = gx.data() + b * rows * cols;
          for (Index c = 0; c < cols; ++c)
            for (Index r = 0; r < rows; ++r) gd[r * cols + c] += gs[c * rows + r];
        }
      });
    }
  }
  return out;
}

template <typename S>
Tensor<S> concat_lastdim(const std::vector<Tensor<S>>& xs) {
  if (xs.empty()) throw ContractError("concat_lastdim: empty input list");
  Shape lead = xs[0].shape();
  lead.pop_back();
  Index total = 0;
  std::vector<Index> widths;
  for (const auto& x : xs) {
    Shape l = x.shape();
    Index w = l.back();
    l.pop_back();
    if (l != lead)
      throw DimensionError("concat_lastdim: leading shape mismatch " + shape_str(xs[0].shape()) + " vs " +
                           shape_str(x.shape()));
    widths.push_back(w);
    total += w;
  }
  Shape os = lead;
  os.push_back(total);
  Tensor<S> out(os);
  Index rows = shape_numel(lead);
  S* po = out.data();
  Index off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const S* px = xs[k].data();
    Index w = widths[k];
    for (Index r = 0; r < rows; ++r)
      std::copy(px + r * w, px + (r + 1) * w, po + r * total + off);
    off += w;
  }
  if (auto* tp = Tape<S>::active()) {
    std::vector<int> ids;
    bool any = false;
    for (const auto& x : xs) {
      ids.push_back(tp->node_of(x));
      any |= ids.back() >= 0;
    }
    if (any) {
      int io = tp->record(out);
      tp->set_backward(io, [=](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        Index o = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          Index w = widths[k];
          if (ids[k] >= 0) {
            auto& gx = t.adjoint(ids[k]);
            for (Index r = 0; r < rows; ++r)
              for (Index c = 0; c < w; ++c) gx[static_cast<std::size_t>(r * w + c)] += g[static_cast<std::size_t>(r * total + o + c)];
          }
          o += w;
        }
      });
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix multiply (batched, broadcasting batch extents)
// ---------------------------------------------------------------------------

namespace detail {

struct BatchPlan {
  Shape out_batch;
  std::vector<Index> a_stride, b_stride;  // in units of one matrix
  Index count = 1;

  std::pair<Index, Index> offsets(Index lin) const {
    Index ao = 0, bo = 0;
    for (int i = static_cast<int>(out_batch.size()) - 1; i >= 0; --i) {
      Index idx = lin % out_batch[static_cast<std::size_t>(i)];
      lin /= out_batch[static_cast<std::size_t>(i)];
      ao += idx * a_stride[static_cast<std::size_t>(i)];
      bo += idx * b_stride[static_cast<std::size_t>(i)];
    }
    return {ao, bo};
  }
};

template <typename S>
inline BatchPlan batch_plan(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  int na = a.ndim() - 2, nb = b.ndim() - 2;
  int n = std::max(na, nb);
  BatchPlan plan;
  plan.out_batch.assign(static_cast<std::size_t>(n), 1);
  for (int i = 0; i < n; ++i) {
    Index ea = (i - (n - na) >= 0) ? a.shape()[static_cast<std::size_t>(i - (n - na))] : 1;
    Index eb = (i - (n - nb) >= 0) ? b.shape()[static_cast<std::size_t>(i - (n - nb))] : 1;
    if (ea != eb && ea != 1 && eb != 1)
      throw DimensionError(std::string(op) + ": batch extents not broadcastable, " + shape_str(a.shape()) +
                           " vs " + shape_str(b.shape()));
    plan.out_batch[static_cast<std::size_t>(i)] = std::max(ea, eb);
  }
  plan.count = shape_numel(plan.out_batch);
  auto strides = [&](const Tensor<S>& t, int nt) {
    std::vector<Index> s(static_cast<std::size_t>(n), 0);
    Index acc = 1;
    for (int i = nt - 1; i >= 0; --i) {
      Index e = t.shape()[static_cast<std::size_t>(i)];
      int oi = i + (n - nt);
      s[static_cast<std::size_t>(oi)] = (e == 1) ? 0 : acc;
      acc *= e;
    }
    return s;
  };
  plan.a_stride = strides(a, na);
  plan.b_stride = strides(b, nb);
  return plan;
}

}  // namespace detail

/// Contraction out[...,m,n] = a[...,m,k] · b[...,k,n]; batch extents broadcast.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw DimensionError("matmul: need rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  Index m = a.extent(-2), k = a.extent(-1);
  Index k2 = b.extent(-2), n = b.extent(-1);
  if (k != k2)
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  auto plan = detail::batch_plan(a, b, "matmul");
  Shape os = plan.out_batch;
  os.push_back(m);
  os.push_back(n);
  Tensor<S> out(os);
  // a batched left operand against a plain matrix is a single flat GEMM
  const bool flat = (b.ndim() == 2);
  if (flat) {
    detail::ConstMatMap<S> A(a.data(), plan.count * m, k);
    detail::ConstMatMap<S> B(b.data(), k, n);
    detail::MatMap<S> C(out.data(), plan.count * m, n);
    C.noalias() = A * B;
  } else {
    for (Index i = 0; i < plan.count; ++i) {
      auto [ao, bo] = plan.offsets(i);
      detail::ConstMatMap<S> A(a.data() + ao * m * k, m, k);
      detail::ConstMatMap<S> B(b.data() + bo * k * n, k, n);
      detail::MatMap<S> C(out.data() + i * m * n, m, n);
      C.noalias() = A * B;
    }
  }
  if (auto* tp = Tape<S>::active()) {
    int ia = tp->node_of(a), ib = tp->node_of(b);
    if (ia >= 0 || ib >= 0) {
      int io = tp->record(out);
      Tensor<S> ca = a, cb = b;
      tp->set_backward(io, [=](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        if (flat) {
          detail::ConstMatMap<S> G(g.data(), plan.count * m, n);
          if (ia >= 0) {
            detail::ConstMatMap<S> B(cb.data(), k, n);
            detail::MatMap<S> GA(t.adjoint(ia).data(), plan.count * m, k);
            GA.noalias() += G * B.transpose();
          }
          if (ib >= 0) {
            detail::ConstMatMap<S> A(ca.data(), plan.count * m, k);
            detail::MatMap<S> GB(t.adjoint(ib).data(), k, n);
            GB.noalias() += A.transpose() * G;
          }
          return;
        }
        for (Index i = 0; i < plan.count; ++i) {
          auto [ao, bo] = plan.offsets(i);
          detail::ConstMatMap<S> G(g.data() + i * m * n, m, n);
          if (ia >= 0) {
            detail::ConstMatMap<S> B(cb.data() + bo * k * n, k, n);
            detail::MatMap<S> GA(t.adjoint(ia).data() + ao * m * k, m, k);
            GA.noalias() += G * B.transpose();
          }
          if (ib >= 0) {
            detail::ConstMatMap<S> A(ca.data() + ao * m * k, m, k);
            detail::MatMap<S> GB(t.adjoint(ib).data() + bo * k * n, k, n);
            GB.noalias() += A.transpose() * G;
          }
        }
      });
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalizations
// ---------------------------------------------------------------------------

/// Exact Gaussian-CDF GELU: x * Phi(x).
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  Tensor<S> out(x.shape());
  const S* px = x.data();
  S* po = out.data();
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  for (Index i = 0; i < x.size(); ++i) {
    double v = static_cast<double>(px[i]);
    po[i] = static_cast<S>(v * 0.5 * (1.0 + std::erf(v * inv_sqrt2)));
  }
  if (auto* tp = Tape<S>::active()) {
    int ix = tp->node_of(x);
    if (ix >= 0) {
      int io = tp->record(out);
      Tensor<S> cx = x;
      tp->set_backward(io, [=](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        auto& gx = t.adjoint(ix);
        const S* vx = cx.data();
        const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < g.size(); ++i) {
          double v = static_cast<double>(vx[i]);
          double cdf = 0.5 * (1.0 + std::erf(v * (1.0 / std::numbers::sqrt2)));
          double pdf = std::exp(-0.5 * v * v) * inv_sqrt2pi;
          gx[i] += g[i] * static_cast<S>(cdf + v * pdf);
        }
      });
    }
  }
  return out;
}

/// Max-shifted softmax along the last axis. NaN input is rejected.
template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
  auto [rows, cols] = detail::row_view(x);
  if (cols < 1) throw DimensionError("softmax_lastdim: empty last axis");
  const S* px = x.data();
  for (Index i = 0; i < x.size(); ++i)
    if (std::isnan(static_cast<double>(px[i]))) throw NumericError("softmax_lastdim: NaN input");
  Tensor<S> out(x.shape());
  S* po = out.data();
  for (Index r = 0; r < rows; ++r) {
    const S* row = px + r * cols;
    S* orow = po + r * cols;
    S mx = row[0];
    for (Index c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    S sum = 0;
    for (Index c = 0; c < cols; ++c) {
      orow[c] = std::exp(row[c] - mx);
      sum += orow[c];
    }
    for (Index c = 0; c < cols; ++c) orow[c] /= sum;
  }
  if (auto* tp = Tape<S>::active()) {
    int ix = tp->node_of(x);
    if (ix >= 0) {
      int io = tp->record(out);
      Tensor<S> co = out;
      tp->set_backward(io, [=, rows = rows, cols = cols](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        auto& gx = t.adjoint(ix);
        const S* y = co.data();
        for (Index r = 0; r < rows; ++r) {
          const S* yr = y + r * cols;
          const S* gr = g.data() + r * cols;
          S dot = 0;
          for (Index c = 0; c < cols; ++c) dot += gr[c] * yr[c];
          S* gxr = gx.data() + r * cols;
          for (Index c = 0; c < cols; ++c) gxr[c] += yr[c] * (gr[c] - dot);
        }
      });
    }
  }
  return out;
}

/// Standardize each trailing-axis slice (population variance), then affine.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, double eps = 1e-5) {
  auto [rows, cols] = detail::row_view(x);
  if (gain.size() != cols || bias.size() != cols)
    throw DimensionError("layer_norm: affine params must match last extent " + std::to_string(cols));
  if (eps <= 0) throw ConfigError("layer_norm: eps must be positive");
  Tensor<S> out(x.shape());
  Tensor<S> xhat(x.shape());  // kept for backward
  std::vector<S> inv_sigma(static_cast<std::size_t>(rows));
  const S* px = x.data();
  const S* pg = gain.data();
  const S* pb = bias.data();
  S* po = out.data();
  S* ph = xhat.data();
  for (Index r = 0; r < rows; ++r) {
    const S* row = px + r * cols;
    S mean = 0;
    for (Index c = 0; c < cols; ++c) mean += row[c];
    mean /= static_cast<S>(cols);
    S var = 0;
    for (Index c = 0; c < cols; ++c) {
      S d = row[c] - mean;
      var += d * d;
    }
    var /= static_cast<S>(cols);
    S is = S(1) / std::sqrt(var + static_cast<S>(eps));
    inv_sigma[static_cast<std::size_t>(r)] = is;
    for (Index c = 0; c < cols; ++c) {
      S h = (row[c] - mean) * is;
      ph[r * cols + c] = h;
      po[r * cols + c] = h * pg[c] + pb[c];
    }
  }
  if (auto* tp = Tape<S>::active()) {
    int ix = tp->node_of(x), ig = tp->node_of(gain), ib = tp->node_of(bias);
    if (ix >= 0 || ig >= 0 || ib >= 0) {
      int io = tp->record(out);
      Tensor<S> cg = gain;
      tp->set_backward(io, [=, rows = rows, cols = cols, inv_sigma = std::move(inv_sigma)](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        const S* h = xhat.data();
        if (ig >= 0) {
          auto& gg = t.adjoint(ig);
          for (Index r = 0; r < rows; ++r)
            for (Index c = 0; c < cols; ++c) gg[static_cast<std::size_t>(c)] += g[static_cast<std::size_t>(r * cols + c)] * h[r * cols + c];
        }
        if (ib >= 0) {
          auto& gb = t.adjoint(ib);
          for (Index r = 0; r < rows; ++r)
            for (Index c = 0; c < cols; ++c) gb[static_cast<std::size_t>(c)] += g[static_cast<std::size_t>(r * cols + c)];
        }
        if (ix >= 0) {
          auto& gx = t.adjoint(ix);
          const S* pgain = cg.data();
          for (Index r = 0; r < rows; ++r) {
            const S* gr = g.data() + r * cols;
            const S* hr = h + r * cols;
            S mg = 0, mgh = 0;
            for (Index c = 0; c < cols; ++c) {
              S gh = gr[c] * pgain[c];
              mg += gh;
              mgh += gh * hr[c];
            }
            mg /= static_cast<S>(cols);
            mgh /= static_cast<S>(cols);
            S is = inv_sigma[static_cast<std::size_t>(r)];
            S* gxr = gx.data() + r * cols;
            for (Index c = 0; c < cols; ++c) {
              S gh = gr[c] * pgain[c];
              gxr[c] += (gh - mg - hr[c] * mgh) * is;
            }
          }
        }
      });
    }
  }
  return out;
}

/// x / max(||x||_2, eps) along the last axis; zero slices map to zero.
template <typename S>
Tensor<S> l2_normalize_lastdim(const Tensor<S>& x, double eps = 1e-12) {
  auto [rows, cols] = detail::row_view(x);
  if (eps <= 0) throw ConfigError("l2_normalize_lastdim: eps must be positive");
  Tensor<S> out(x.shape());
  std::vector<S> norms(static_cast<std::size_t>(rows));
  const S* px = x.data();
  S* po = out.data();
  for (Index r = 0; r < rows; ++r) {
    const S* row = px + r * cols;
    S sq = 0;
    for (Index c = 0; c < cols; ++c) sq += row[c] * row[c];
    S n = std::sqrt(sq);
    S denom = std::max(n, static_cast<S>(eps));
    norms[static_cast<std::size_t>(r)] = n;
    for (Index c = 0; c < cols; ++c) po[r * cols + c] = row[c] / denom;
  }
  if (auto* tp = Tape<S>::active()) {
    int ix = tp->node_of(x);
    if (ix >= 0) {
      int io = tp->record(out);
      Tensor<S> cx = x;
      tp->set_backward(io, [=, rows = rows, cols = cols, norms = std::move(norms)](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        auto& gx = t.adjoint(ix);
        const S* vx = cx.data();
        for (Index r = 0; r < rows; ++r) {
          const S* xr = vx + r * cols;
          const S* gr = g.data() + r * cols;
          S* gxr = gx.data() + r * cols;
          S n = norms[static_cast<std::size_t>(r)];
          if (n > static_cast<S>(eps)) {
            S dot = 0;
            for (Index c = 0; c < cols; ++c) dot += gr[c] * xr[c];
            S inv = S(1) / n, inv3 = inv * inv * inv;
            for (Index c = 0; c < cols; ++c) gxr[c] += gr[c] * inv - xr[c] * dot * inv3;
          } else {
            S inv = S(1) / static_cast<S>(eps);
            for (Index c = 0; c < cols; ++c) gxr[c] += gr[c] * inv;
          }
        }
      });
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution / patching
// ---------------------------------------------------------------------------

/// Per-channel 1D convolution, length-preserving symmetric zero padding.
/// x: [B, d, L], kernel: [d, k] with k odd. No cross-channel mixing.
template <typename S>
Tensor<S> depthwise_conv1d(const Tensor<S>& x, const Tensor<S>& kernel) {
  if (x.ndim() != 3) throw DimensionError("depthwise_conv1d: input must be [B,d,L], got " + shape_str(x.shape()));
  if (kernel.ndim() != 2) throw DimensionError("depthwise_conv1d: kernel must be [d,k], got " + shape_str(kernel.shape()));
  Index B = x.extent(0), d = x.extent(1), L = x.extent(2);
  Index dk = kernel.extent(0), k = kernel.extent(1);
  if (k % 2 == 0) throw ConfigError("depthwise_conv1d: kernel size must be odd, got " + std::to_string(k));
  if (dk != d)
    throw ConfigError("depthwise_conv1d: kernel channels " + std::to_string(dk) + " != input channels " +
                      std::to_string(d));
  Index pad = (k - 1) / 2;
  Tensor<S> out(x.shape());
  const S* px = x.data();
  const S* pk = kernel.data();
  S* po = out.data();
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < d; ++c) {
      const S* xc = px + (b * d + c) * L;
      const S* kc = pk + c * k;
      S* oc = po + (b * d + c) * L;
      for (Index l = 0; l < L; ++l) {
        S acc = 0;
        Index j0 = std::max<Index>(0, pad - l);
        Index j1 = std::min<Index>(k, L + pad - l);
        for (Index j = j0; j < j1; ++j) acc += kc[j] * xc[l + j - pad];
        oc[l] = acc;
      }
    }
  if (auto* tp = Tape<S>::active()) {
    int ix = tp->node_of(x), ik = tp->node_of(kernel);
    if (ix >= 0 || ik >= 0) {
      int io = tp->record(out);
      Tensor<S> cx = x, ck = kernel;
      tp->set_backward(io, [=](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        for (Index b = 0; b < B; ++b)
          for (Index c = 0; c < d; ++c) {
            const S* gc = g.data() + (b * d + c) * L;
            if (ix >= 0) {
              auto& gx = t.adjoint(ix);
              const S* kc = ck.data() + c * k;
              S* gxc = gx.data() + (b * d + c) * L;
              for (Index l = 0; l < L; ++l) {
                Index j0 = std::max<Index>(0, pad - l);
                Index j1 = std::min<Index>(k, L + pad - l);
                S gv = gc[l];
                for (Index j = j0; j < j1; ++j) gxc[l + j - pad] += kc[j] * gv;
              }
            }
            if (ik >= 0) {
              auto& gk = t.adjoint(ik);
              const S* xc = cx.data() + (b * d + c) * L;
              S* gkc = gk.data() + c * k;
              for (Index l = 0; l < L; ++l) {
                Index j0 = std::max<Index>(0, pad - l);
                Index j1 = std::min<Index>(k, L + pad - l);
                S gv = gc[l];
                for (Index j = j0; j < j1; ++j) gkc[j] += xc[l + j - pad] * gv;
              }
            }
          }
      });
    }
  }
  return out;
}

/// Sliding windows of length P, stride St, over the trailing time axis of
/// [N, T]. The tail is replicate-padded so the final window is full:
/// out[n, l, p] = x[n, min(l*St + p, T-1)].
template <typename S>
Tensor<S> patchify(const Tensor<S>& x, Index P, Index St) {
  if (x.ndim() != 2) throw DimensionError("patchify: input must be [N,T], got " + shape_str(x.shape()));
  if (P < 1 || St < 1) throw ConfigError("patchify: patch length and stride must be positive");
  Index N = x.extent(0), T = x.extent(1);
  if (T < P)
    throw ConfigError("patchify: series length " + std::to_string(T) + " shorter than patch length " +
                      std::to_string(P));
  Index L = (T - P + St - 1) / St + 1;  // ceil((T-P)/St) + 1
  Tensor<S> out(Shape{N, L, P});
  const S* px = x.data();
  S* po = out.data();
  for (Index n = 0; n < N; ++n)
    for (Index l = 0; l < L; ++l)
      for (Index p = 0; p < P; ++p)
        po[(n * L + l) * P + p] = px[n * T + std::min(l * St + p, T - 1)];
  if (auto* tp = Tape<S>::active()) {
    int ix = tp->node_of(x);
    if (ix >= 0) {
      int io = tp->record(out);
      tp->set_backward(io, [=](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        auto& gx = t.adjoint(ix);
        for (Index n = 0; n < N; ++n)
          for (Index l = 0; l < L; ++l)
            for (Index p = 0; p < P; ++p)
              gx[static_cast<std::size_t>(n * T + std::min(l * St + p, T - 1))] +=
                  g[static_cast<std::size_t>((n * L + l) * P + p)];
      });
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions / losses
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
  S acc = 0;
  const S* px = x.data();
  for (Index i = 0; i < x.size(); ++i) acc += px[i];
  Tensor<S> out = Tensor<S>::scalar(acc);
  if (auto* tp = Tape<S>::active()) {
    int ix = tp->node_of(x);
    if (ix >= 0) {
      int io = tp->record(out);
      tp->set_backward(io, [=](Tape<S>& t) {
        S g = t.adjoint(io)[0];
        auto& gx = t.adjoint(ix);
        for (auto& v : gx) v += g;
      });
    }
  }
  return out;
}

/// Sum of squared entries (Frobenius norm squared).
template <typename S>
Tensor<S> sum_squares(const Tensor<S>& x) {
  S acc = 0;
  const S* px = x.data();
  for (Index i = 0; i < x.size(); ++i) acc += px[i] * px[i];
  Tensor<S> out = Tensor<S>::scalar(acc);
  if (auto* tp = Tape<S>::active()) {
    int ix = tp->node_of(x);
    if (ix >= 0) {
      int io = tp->record(out);
      Tensor<S> cx = x;
      tp->set_backward(io, [=](Tape<S>& t) {
        S g = t.adjoint(io)[0];
        auto& gx = t.adjoint(ix);
        const S* vx = cx.data();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += S(2) * g * vx[i];
      });
    }
  }
  return out;
}

/// Mean squared error over all elements.
template <typename S>
Tensor<S> mse_loss(const Tensor<S>& pred, const Tensor<S>& target) {
  detail::require_same_shape(pred, target, "mse_loss");
  const S* pp = pred.data();
  const S* pt = target.data();
  S acc = 0;
  for (Index i = 0; i < pred.size(); ++i) {
    S d = pp[i] - pt[i];
    acc += d * d;
  }
  Tensor<S> out = Tensor<S>::scalar(acc / static_cast<S>(pred.size()));
  if (auto* tp = Tape<S>::active()) {
    int ip = tp->node_of(pred), it = tp->node_of(target);
    if (ip >= 0 || it >= 0) {
      int io = tp->record(out);
      Tensor<S> cp = pred, ct = target;
      tp->set_backward(io, [=](Tape<S>& t) {
        S g = t.adjoint(io)[0];
        S c = S(2) * g / static_cast<S>(cp.size());
        const S* vp = cp.data();
        const S* vt = ct.data();
        if (ip >= 0) {
          auto& gp = t.adjoint(ip);
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += c * (vp[i] - vt[i]);
        }
        if (it >= 0) {
          auto& gt = t.adjoint(it);
          for (std::size_t i = 0; i < gt.size(); ++i) gt[i] -= c * (vp[i] - vt[i]);
        }
      });
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stochastic / discrete
// ---------------------------------------------------------------------------

/// Inverted dropout; active only when rate > 0. Mask draws come from `rng` in
/// element order, so a fixed seed fixes the mask.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double rate, Rng& rng) {
  if (rate < 0 || rate >= 1) throw ConfigError("dropout: rate must be in [0,1)");
  if (rate == 0) return x;
  Tensor<S> out(x.shape());
  auto mask = std::make_shared<std::vector<S>>(static_cast<std::size_t>(x.size()));
  const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  const S* px = x.data();
  S* po = out.data();
  for (Index i = 0; i < x.size(); ++i) {
    S m = (rng.uniform(0.0, 1.0) < rate) ? S(0) : keep_scale;
    (*mask)[static_cast<std::size_t>(i)] = m;
    po[i] = px[i] * m;
  }
  if (auto* tp = Tape<S>::active()) {
    int ix = tp->node_of(x);
    if (ix >= 0) {
      int io = tp->record(out);
      tp->set_backward(io, [=](Tape<S>& t) {
        const auto& g = t.adjoint(io);
        auto& gx = t.adjoint(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
      });
    }
  }
  return out;
}

/// One-hot of the row argmax (ties broken by lowest index). Treated as a
/// constant: no gradient flows through the selection.
template <typename S>
Tensor<S> one_hot_argmax_lastdim(const Tensor<S>& x) {
  auto [rows, cols] = detail::row_view(x);
  Tensor<S> out(x.shape(), S(0));
  const S* px = x.data();
  S* po = out.data();
  for (Index r = 0; r < rows; ++r) {
    const S* row = px + r * cols;
    Index best = 0;
    for (Index c = 1; c < cols; ++c)
      if (row[c] > row[best]) best = c;
    po[r * cols + best] = S(1);
  }
  return out;
}

/// Constant identity matrix (not tracked).
template <typename S>
Tensor<S> identity_matrix(Index n) {
  Tensor<S> out(Shape{n, n}, S(0));
  for (Index i = 0; i < n; ++i) out.data()[i * n + i] = S(1);
  return out;
}

}  // namespace dpr
