// SPDX-License-Identifier: Apache-2.0
//
// Define-by-run reverse-mode differentiation. A Tape is rebuilt for every
// forward pass; nodes are appended in evaluation order, so reverse iteration
// is a valid topological order for backward.
#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "segpool/error.hpp"
#include "segpool/tensor.hpp"

namespace segpool {

class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  [[nodiscard]] Tape& tape() const { return *tape_; }
  [[nodiscard]] std::size_t id() const noexcept { return id_; }
  [[nodiscard]] bool valid() const noexcept { return tape_ != nullptr; }

  [[nodiscard]] const Tensor& value() const;
  [[nodiscard]] const Tensor& grad() const;
  [[nodiscard]] bool reached() const;
  [[nodiscard]] const Shape& shape() const { return value().shape(); }
  [[nodiscard]] bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Backward rule: receives the gradient of the node's output and one pointer
/// per input, null for inputs that do not need a gradient. Rules accumulate
/// (+=) into the input gradients.
using BackwardFn = std::function<void(const Tensor& out_grad, std::span<Tensor* const> in_grads)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf node: a parameter (requires_grad) or a constant input.
  Var leaf(Tensor value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, {}, {}, requires_grad});
    return Var(this, nodes_.size() - 1);
  }

  /// Result of an operation. When no input requires a gradient the rule is
  /// dropped and the node behaves like a constant.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
    bool needs = false;
    for (auto i : inputs) needs = needs || node(i).requires_grad;
    if (!needs) return leaf(std::move(value), false);
    nodes_.push_back(Node{std::move(value), {}, std::move(inputs), std::move(backward), true});
    return Var(this, nodes_.size() - 1);
  }

  [[nodiscard]] bool requires_grad(std::initializer_list<Var> vars) const {
    for (const auto& v : vars)
      if (node(v.id()).requires_grad) return true;
    return false;
  }

  [[nodiscard]] const Tensor& value(std::size_t id) const { return node(id).value; }
  [[nodiscard]] bool requires_grad(std::size_t id) const { return node(id).requires_grad; }

  /// Gradient of the last backward() loss with respect to node `id`. Nodes
  /// that require a gradient but did not contribute report zeros.
  [[nodiscard]] const Tensor& grad(std::size_t id) const {
    const Node& n = node(id);
    if (!n.requires_grad) throw ContractViolation("node does not require a gradient");
    if (n.grad.empty()) throw ContractViolation("backward() has not been run on this tape");
    return n.grad;
  }

  /// True when the last backward() loss depends on node `id`.
  [[nodiscard]] bool reached(std::size_t id) const { return node(id).reached; }

  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  void backward(const Var& loss) {
    if (&loss.tape() != this) throw ContractViolation("loss was recorded on a different tape");
    const Node& ln = node(loss.id());
    if (ln.value.size() != 1)
      throw ContractViolation("backward() needs a scalar loss, got shape " + ln.value.shape().str());

    for (auto& n : nodes_) {
      n.reached = false;
      if (!n.requires_grad) continue;
      if (n.grad.empty() || n.grad.shape() != n.value.shape())
        n.grad = Tensor(n.value.shape());
      else
        n.grad.fill(0.0);
    }
    if (!ln.requires_grad) return;
    nodes_[loss.id()].grad.fill(1.0);
    nodes_[loss.id()].reached = true;

    std::vector<Tensor*> in_grads;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.backward || !n.reached) continue;
      in_grads.clear();
      for (auto i : n.inputs) {
        nodes_[i].reached = nodes_[i].reached || nodes_[i].requires_grad;
        in_grads.push_back(nodes_[i].requires_grad ? &nodes_[i].grad : nullptr);
      }
      n.backward(n.grad, in_grads);
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool reached = false;
  };

  [[nodiscard]] const Node& node(std::size_t id) const {
    if (id >= nodes_.size()) throw ContractViolation("node id " + std::to_string(id) + " not on tape");
    return nodes_[id];
  }

  // deque keeps node addresses stable so rules may hold pointers to values.
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }
inline bool Var::reached() const { return tape_->reached(id_); }

}  // namespace segpool
