#pragma once

// Reverse-mode automatic differentiation over Tensor values.

#include <functional>
#include <vector>

#include "textret/nn/tensor.hpp"

namespace textret::nn {

template <class Scalar>
class Tape;

/// Handle to a value recorded on a Tape.
template <class Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const Tensor<Scalar>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape; }
  int dim(int i) const { return value().dim(i); }
  bool needs_grad() const { return tape->needs_grad(id); }
  /// Scalar value of a one-element node.
  Scalar item() const { return value().data[0]; }
};

template <class Scalar>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  /// With grad disabled, parameters are recorded as constants and no backward closures are kept.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Tensor<Scalar> value) { return push(std::move(value), false, nullptr); }
  Var<Scalar> param(Parameter<Scalar>& p);

  /// Records an op output; `backward` must add this node's grad into its inputs' grads.
  Var<Scalar> push(Tensor<Scalar> value, bool needs_grad, Backward backward);

  const Tensor<Scalar>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  const Tensor<Scalar>& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  /// Zero-initialised on first access.
  Tensor<Scalar>& grad_of(int id);
  bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(root)/d(root) = 1 for a one-element root and accumulates parameter gradients.
  void backward(Var<Scalar> root);

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    Backward backward;
    Parameter<Scalar>* param = nullptr;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_;
};

template <class Scalar>
Var<Scalar> Tape<Scalar>::param(Parameter<Scalar>& p) {
  if (!grad_enabled_) return constant(p.value);
  Var<Scalar> v = push(p.value, true, nullptr);
  nodes_.back().param = &p;
  return v;
}

template <class Scalar>
Var<Scalar> Tape<Scalar>::push(Tensor<Scalar> value, bool needs_grad, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = grad_enabled_ && needs_grad;
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var<Scalar>{this, static_cast<int>(nodes_.size()) - 1};
}

template <class Scalar>
Tensor<Scalar>& Tape<Scalar>::grad_of(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor<Scalar>(n.value.shape);
  return n.grad;
}

template <class Scalar>
void Tape<Scalar>::backward(Var<Scalar> root) {
  if (root.value().numel() != 1) throw InvalidInput("backward: root must be a scalar");
  if (!needs_grad(root.id)) return;
  grad_of(root.id).data.setOnes();
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param) n.param->grad.data += n.grad.data;
  }
}

}  // namespace textret::nn
