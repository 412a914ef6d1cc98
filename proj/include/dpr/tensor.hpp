// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "dpr/errors.hpp"

namespace dpr {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor with value (handle) semantics: copies share the
/// underlying buffer, clone() deep-copies. The gradient accumulator lives in
/// the shared payload so every handle to a parameter observes accumulation.
template <typename Scalar>
class Tensor {
  struct Payload {
    Shape shape;
    std::vector<Scalar> data;
    std::vector<Scalar> grad;  // empty until first use
    bool requires_grad = false;
  };

 public:
  using value_type = Scalar;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) {
    validate_shape(shape);
    p_ = std::make_shared<Payload>();
    p_->shape = std::move(shape);
    p_->data.assign(static_cast<std::size_t>(shape_numel(p_->shape)), fill);
  }

  Tensor(Shape shape, std::vector<Scalar> values) {
    validate_shape(shape);
    if (shape_numel(shape) != static_cast<Index>(values.size()))
      throw DimensionError("tensor init: shape " + shape_str(shape) + " wants " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    p_ = std::make_shared<Payload>();
    p_->shape = std::move(shape);
    p_->data = std::move(values);
  }

  static Tensor scalar(Scalar v) { return Tensor(Shape{1}, std::vector<Scalar>{v}); }

  bool defined() const { return static_cast<bool>(p_); }
  const Shape& shape() const { return p_->shape; }
  int ndim() const { return static_cast<int>(p_->shape.size()); }
  Index size() const { return static_cast<Index>(p_->data.size()); }

  /// Extent along `axis`; negative axes count from the end.
  Index extent(int axis) const {
    int nd = ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd)
      throw ContractError("tensor axis " + std::to_string(axis) + " out of range for " +
                          shape_str(shape()));
    return p_->shape[static_cast<std::size_t>(axis)];
  }

  std::vector<Scalar>& values() { return p_->data; }
  const std::vector<Scalar>& values() const { return p_->data; }
  Scalar* data() { return p_->data.data(); }
  const Scalar* data() const { return p_->data.data(); }
  Scalar item() const {
    if (size() != 1)
      throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return p_->data[0];
  }

  bool requires_grad() const { return p_ && p_->requires_grad; }
  Tensor& set_requires_grad(bool v = true) {
    p_->requires_grad = v;
    return *this;
  }

  /// Gradient accumulator, allocated zero-filled on first access.
  std::vector<Scalar>& grad() {
    if (p_->grad.empty()) p_->grad.assign(p_->data.size(), Scalar(0));
    return p_->grad;
  }
  bool has_grad() const { return p_ && !p_->grad.empty(); }
  void zero_grad() {
    if (p_ && !p_->grad.empty()) std::fill(p_->grad.begin(), p_->grad.end(), Scalar(0));
  }

  /// Stable identity of the underlying buffer; used as the tape key.
  const void* id() const { return p_.get(); }

  Tensor clone() const {
    Tensor t(p_->shape, p_->data);
    t.p_->requires_grad = p_->requires_grad;
    return t;
  }

  bool all_finite() const {
    for (Scalar v : p_->data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
    for (Index e : shape)
      if (e <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }

  std::shared_ptr<Payload> p_;
};

/// Reverse-mode tape. Ops append nodes in execution order (which is therefore
/// topological); backward() replays the recorded rules once, in exact reverse
/// order, so gradient accumulation order is fixed and runs are reproducible.
template <typename Scalar>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

  /// Register a leaf (typically a parameter). Idempotent.
  int watch(const Tensor<Scalar>& t) {
    auto it = index_.find(t.id());
    if (it != index_.end()) return it->second;
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{});
    adjoints_.emplace_back(static_cast<std::size_t>(t.size()), Scalar(0));
    index_.emplace(t.id(), id);
    leaves_.push_back(t);
    return id;
  }

  /// Node id for `t`, auto-watching requires_grad leaves; -1 for constants.
  int node_of(const Tensor<Scalar>& t) {
    auto it = index_.find(t.id());
    if (it != index_.end()) return it->second;
    if (t.requires_grad()) return watch(t);
    return -1;
  }

  /// Register an op output; the backward rule is attached afterwards so it
  /// can capture its own node id. The tape keeps a handle to every recorded
  /// tensor: buffer addresses double as node identity, so tracked payloads
  /// must outlive the tape.
  int record(const Tensor<Scalar>& out) {
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{});
    adjoints_.emplace_back(static_cast<std::size_t>(out.size()), Scalar(0));
    index_.emplace(out.id(), id);
    outputs_.push_back(out);
    return id;
  }

  void set_backward(int node, std::function<void(Tape&)> backward) {
    nodes_[static_cast<std::size_t>(node)].bw = std::move(backward);
  }

  std::vector<Scalar>& adjoint(int node) { return adjoints_[static_cast<std::size_t>(node)]; }

  bool tracked(const Tensor<Scalar>& t) const { return index_.count(t.id()) > 0; }

  std::size_t size() const { return nodes_.size(); }

  /// Full backward: seed d(loss)/d(loss)=1, sweep, then flush leaf adjoints
  /// into each leaf tensor's grad accumulator.
  void backward(const Tensor<Scalar>& loss) {
    backward_no_flush(loss);
    flush_leaf_grads();
  }

  /// Sweep only; adjoints stay tape-local. Used by sharded training where the
  /// merge into shared parameter grads must happen in a fixed shard order.
  void backward_no_flush(const Tensor<Scalar>& loss) {
    if (loss.size() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    auto it = index_.find(loss.id());
    if (it == index_.end()) throw ContractError("backward: loss is not tracked on this tape");
    // adjoints start out zero-filled; re-zero only on repeated sweeps
    if (swept_)
      for (auto& a : adjoints_) std::fill(a.begin(), a.end(), Scalar(0));
    swept_ = true;
    adjoints_[static_cast<std::size_t>(it->second)][0] = Scalar(1);
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i)
      if (nodes_[static_cast<std::size_t>(i)].bw) nodes_[static_cast<std::size_t>(i)].bw(*this);
  }

  void flush_leaf_grads() {
    for (auto& leaf : leaves_) {
      const auto& adj = adjoints_[static_cast<std::size_t>(index_.at(leaf.id()))];
      auto& g = leaf.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += adj[i];
    }
  }

 private:
  struct Node {
    std::function<void(Tape&)> bw;  // empty for leaves
  };

  std::vector<Node> nodes_;
  std::vector<std::vector<Scalar>> adjoints_;
  std::unordered_map<const void*, int> index_;
  std::vector<Tensor<Scalar>> leaves_;
  std::vector<Tensor<Scalar>> outputs_;
  bool swept_ = false;
};

/// RAII activation of a tape on the current thread.
template <typename Scalar>
class TapeScope {
 public:
  explicit TapeScope(Tape<Scalar>& tape) : prev_(Tape<Scalar>::active()) {
    Tape<Scalar>::active() = &tape;
  }
  ~TapeScope() { Tape<Scalar>::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Scalar>* prev_;
};

}  // namespace dpr
