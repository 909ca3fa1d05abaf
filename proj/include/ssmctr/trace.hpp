#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "ssmctr/tensor.hpp"

namespace ssmctr {

/// Handle to a value recorded on a Trace.
struct Var {
  std::size_t id = 0;
};

/// Ordered record of executed operations. Gradients are propagated by
/// replaying the record in reverse; each operation's backward closure reads
/// its output gradient and accumulates into its inputs.
///
/// Parameter leaves view an external Tensor and accumulate straight into that
/// tensor's gradient buffer. A trace built with gradients disabled records
/// values only and never writes to parameters, so several such traces may
/// read the same parameters from different threads.
class Trace {
 public:
  using Backward = std::function<void(Trace&, std::span<const double>)>;

  explicit Trace(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Trace(const Trace&) = delete;
  Trace& operator=(const Trace&) = delete;
  Trace(Trace&&) = default;
  Trace& operator=(Trace&&) = default;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor value) {
    Node n;
    n.owned = std::move(value);
    return push(std::move(n));
  }

  /// Leaf bound to `param`; the tensor must outlive the trace.
  Var parameter(Tensor& param, bool trainable = true) {
    Node n;
    n.view = &param;
    if (grad_enabled_ && trainable) {
      param.enable_grad();
      n.sink = &param;
      n.requires_grad = true;
    }
    return push(std::move(n));
  }

  /// Read-only leaf over an external tensor (no copy, no gradient).
  Var view(const Tensor& value) {
    Node n;
    n.view = &value;
    return push(std::move(n));
  }

  /// Appends the output of an operation. `backward` is dropped when no input
  /// needs a gradient or the trace has gradients disabled.
  Var record(Tensor value, bool requires_grad, Backward backward) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = grad_enabled_ && requires_grad;
    if (n.requires_grad) n.backward = std::move(backward);
    ++op_count_;
    return push(std::move(n));
  }

  const Tensor& value(Var v) const {
    const Node& n = node(v);
    return n.view ? *n.view : n.owned;
  }

  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Gradient accumulator for `v`, allocated on first use.
  std::span<double> grad(Var v) {
    Node& n = node(v);
    if (n.sink) return n.sink->grad();
    if (n.grad.empty()) n.grad.assign(value(v).size(), 0.0);
    return n.grad;
  }

  /// Seeds d(root)/d(root) = 1 and replays every recorded operation in
  /// reverse order. Returns the number of backward closures invoked.
  std::size_t backward(Var root) {
    if (!grad_enabled_) throw std::logic_error("backward on a no-grad trace");
    if (value(root).size() != 1) {
      throw DimensionError("backward root must be a scalar, got shape " +
                           to_string(value(root).shape()));
    }
    if (!node(root).requires_grad) return 0;
    grad(root)[0] += 1.0;
    std::size_t invoked = 0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      // The closure may allocate gradients of earlier nodes; nodes_ does not
      // grow during replay so the reference stays valid.
      n.backward(*this, n.grad);
      ++invoked;
    }
    return invoked;
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t op_count() const { return op_count_; }

 private:
  struct Node {
    Tensor owned;
    const Tensor* view = nullptr;
    Tensor* sink = nullptr;
    bool requires_grad = false;
    std::vector<double> grad;
    Backward backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Node& node(Var v) { return nodes_.at(v.id); }
  const Node& node(Var v) const { return nodes_.at(v.id); }

  bool grad_enabled_;
  std::size_t op_count_ = 0;
  std::vector<Node> nodes_;
};

}  // namespace ssmctr
