#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mlosr/error.hpp"
#include "mlosr/tensor.hpp"

namespace mlosr {

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

/// Reverse-mode gradient tape.
///
/// Nodes are appended as operations execute, so the node list is already in
/// topological order and backward() is a single reverse sweep. One tape
/// serves one forward/backward pass; it must not be shared across threads.
class Tape {
public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  Var leaf(Tensor value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), std::nullopt, requires_grad, {}, {}});
    return Var{this, nodes_.size() - 1};
  }

  /// Records an operation output. The backward rule is dropped when no
  /// input participates in differentiation.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
    bool needs = false;
    for (std::size_t i : inputs) needs = needs || nodes_.at(i).requires_grad;
    nodes_.push_back(Node{std::move(value), std::nullopt, needs, std::move(inputs),
                          needs ? std::move(backward) : BackwardFn{}});
    return Var{this, nodes_.size() - 1};
  }

  const Tensor& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient of the last backward() target with respect to v. Nodes the
  /// loss does not depend on report zeros.
  Tensor grad(Var v) const {
    const Node& n = node(v);
    if (n.grad) return *n.grad;
    return Tensor(n.value.shape(), 0.0);
  }

  /// Mutable gradient buffer for node `id`, allocated on first use.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.grad) n.grad = Tensor(n.value.shape(), 0.0);
    return *n.grad;
  }

  const Tensor& value_at(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad_at(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::vector<std::size_t>& inputs_at(std::size_t id) const { return nodes_.at(id).inputs; }

  void backward(Var loss) {
    const Node& target = node(loss);
    if (target.value.size() != 1) {
      throw ContractError("backward() requires a scalar loss, got shape " +
                          shape_string(target.value.shape()));
    }
    if (backward_done_) {
      throw ContractError("backward() called twice on the same tape without reset_grads()");
    }
    backward_done_ = true;
    grad_buffer(loss.id)[0] = 1.0;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.grad && n.backward) n.backward(*this, id);
    }
  }

  void reset_grads() {
    for (Node& n : nodes_) n.grad.reset();
    backward_done_ = false;
  }

private:
  struct Node {
    Tensor value;
    std::optional<Tensor> grad;
    bool requires_grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  const Node& node(Var v) const {
    if (v.tape != this) throw ContractError("variable belongs to a different tape");
    return nodes_.at(v.id);
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

namespace detail {

inline Tape& same_tape(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (!v.tape) throw ContractError("variable is not attached to a tape");
    if (t && t != v.tape) throw ContractError("operation mixes variables from different tapes");
    t = v.tape;
  }
  return *t;
}

}  // namespace detail

}  // namespace mlosr
