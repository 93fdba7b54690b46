#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "afnn/tensor.hpp"

namespace afnn {

template <class T>
class Tape;

/// Handle to a value recorded on a tape. Cheap to copy; only valid while the
/// owning tape is alive.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

/// Reverse-mode tape. Nodes are appended in forward order and replayed in
/// reverse by backward(). Confined to one thread.
template <class T>
class Tape {
 public:
  /// Receives the gradient of the node's output and accumulates into the
  /// gradients of its inputs through the tape.
  using Backward = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, requires_grad, nullptr});
    return Var<T>{this, nodes_.size() - 1};
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Appends an op result. The backward closure is dropped when none of the
  /// inputs need gradients.
  Var<T> record(Tensor<T> value, bool requires_grad, Backward backward) {
    nodes_.push_back(
        Node{std::move(value), Tensor<T>{}, requires_grad, requires_grad ? std::move(backward) : nullptr});
    return Var<T>{this, nodes_.size() - 1};
  }

  const Tensor<T>& value(Var<T> v) const { return node(v).value; }
  bool requires_grad(Var<T> v) const { return node(v).requires_grad; }

  /// Gradient of the last backward() target w.r.t. v. Zero-filled if v was
  /// unreachable.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = node(v);
    if (n.grad.empty()) return Tensor<T>(n.value.shape());
    return n.grad;
  }

  bool has_grad(Var<T> v) const { return !node(v).grad.empty(); }

  /// Mutable gradient buffer, allocated on first touch.
  Tensor<T>& grad_buffer(Var<T> v) {
    Node& n = node(v);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  void accumulate(Var<T> v, const Tensor<T>& g) {
    if (!requires_grad(v)) return;
    Tensor<T>& buf = grad_buffer(v);
    if (buf.shape() != g.shape()) {
      throw ShapeError("tape: gradient shape " + shape_str(g.shape()) + " does not match value " +
                       shape_str(buf.shape()));
    }
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
  }

  /// Seeds d(loss)/d(loss) = 1 and replays every recorded op in reverse.
  void backward(Var<T> loss) {
    if (value(loss).size() != 1) {
      throw ShapeError("backward: loss must be a scalar, got " + shape_str(value(loss).shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor<T>{};
    if (!requires_grad(loss)) return;
    grad_buffer(loss)[0] = T{1};
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      // Closures only write to inputs (ids < i) and nodes_ is never resized
      // during replay, so the reference stays valid.
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Node& node(Var<T> v) {
    check(v);
    return nodes_[v.id];
  }
  const Node& node(Var<T> v) const {
    check(v);
    return nodes_[v.id];
  }
  void check(Var<T> v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw std::logic_error("tape: foreign or stale Var");
  }

  std::vector<Node> nodes_;
};

}  // namespace afnn
