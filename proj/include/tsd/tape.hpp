#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tsd/tensor.hpp"

namespace tsd {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; invalidated by Tape::clear().
class Var {
 public:
  Var() = default;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }

  const Shape& shape() const;
  std::span<const double> values() const;
  std::size_t size() const { return values().size(); }
  double item() const;
  /// Gradient after backward (zeros when the node was not reached).
  std::vector<double> grad() const;
  Tensor to_tensor() const { return Tensor(shape(), std::vector<double>(values().begin(), values().end())); }

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id, std::uint64_t gen) : tape_(t), id_(id), generation_(gen) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
  std::uint64_t generation_ = 0;
};

/// Records operations in topological order for reverse-mode differentiation.
/// A tape is confined to one thread while recording or running backward.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::span<const double> out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Copies `t` onto the tape. No gradient flows back to it.
  Var constant(const Tensor& t) { return push(t.shape, t.values, {}, nullptr); }
  Var constant(Shape shape, std::vector<double> values) {
    if (values.size() != numel(shape)) {
      throw DimensionError("constant values length does not match shape " + shape_str(shape), -1);
    }
    return push(std::move(shape), std::move(values), {}, nullptr);
  }

  /// Binds a tensor as a leaf. If it requires grad, backward accumulates
  /// d(loss)/d(leaf) into `t.grad`.
  Var leaf(Tensor& t) {
    Var v = push(t.shape, t.values, {}, nullptr);
    if (t.requires_grad) {
      if (t.grad.size() != t.values.size()) t.grad.assign(t.values.size(), 0.0);
      nodes_.back().bound = &t;
      nodes_.back().needs_grad = true;
    }
    return v;
  }

  /// Appends a node computed from `parents`. `fn` receives the node's output
  /// gradient and must accumulate into parents via grad_of().
  Var push(Shape shape, std::vector<double> value, std::vector<std::size_t> parents,
           BackwardFn fn) {
    if (backward_done_) throw TapeError("tape already differentiated; clear() before recording");
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    for (std::size_t p : parents) n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
    if (n.needs_grad) {
      n.parents = std::move(parents);
      n.backward = std::move(fn);
    }
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1, generation_);
  }

  /// Verifies that `v` was issued by this tape and is still live.
  std::size_t check(const Var& v) const {
    if (v.tape_ != this) throw TapeError("variable belongs to a different tape");
    if (v.generation_ != generation_) throw TapeError("variable was invalidated by Tape::clear()");
    return v.id_;
  }

  bool needs_grad(const Var& v) const { return nodes_[check(v)].needs_grad; }
  const Shape& shape_of(std::size_t id) const { return nodes_[id].shape; }
  std::span<const double> value_of(std::size_t id) const { return nodes_[id].value; }

  /// Mutable gradient buffer for node `id`, allocated on first use.
  std::vector<double>& grad_of(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  /// Reverse sweep from a scalar loss. A second call without clear() throws.
  void backward(const Var& loss) {
    const std::size_t root = check(loss);
    if (backward_done_) throw TapeError("backward already ran on this tape");
    if (nodes_[root].value.size() != 1) {
      throw DimensionError("backward requires a scalar loss, got shape " +
                               shape_str(nodes_[root].shape),
                           -1);
    }
    backward_done_ = true;
    grad_of(root)[0] = 1.0;
    for (std::size_t i = root + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      // Parents always precede children, so grad_of() never touches n itself.
      if (n.backward) n.backward(*this, n.grad);
      if (n.bound) {
        auto& dst = n.bound->grad;
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
      }
    }
  }

  void clear() {
    nodes_.clear();
    backward_done_ = false;
    ++generation_;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool differentiated() const noexcept { return backward_done_; }

 private:
  friend class Var;
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Tensor* bound = nullptr;
    bool needs_grad = false;
  };

  const Node& node(const Var& v) const { return nodes_[check(v)]; }

  std::vector<Node> nodes_;
  std::uint64_t generation_ = 0;
  bool backward_done_ = false;
};

inline const Shape& Var::shape() const { return tape_->node(*this).shape; }
inline std::span<const double> Var::values() const { return tape_->node(*this).value; }
inline double Var::item() const {
  const auto& n = tape_->node(*this);
  if (n.value.size() != 1) throw DimensionError("item() on non-scalar " + shape_str(n.shape), -1);
  return n.value[0];
}
inline std::vector<double> Var::grad() const {
  const auto& n = tape_->node(*this);
  if (n.grad.size() == n.value.size()) return n.grad;
  return std::vector<double>(n.value.size(), 0.0);
}

}  // namespace tsd
