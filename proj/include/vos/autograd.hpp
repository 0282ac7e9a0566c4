#pragma once

// Minimal reverse-mode automatic differentiation over vos::Tensor.
//
// A Var is a shared handle to a graph node. Operations record their inputs and
// a backward closure only while gradient recording is enabled and at least one
// input requires a gradient; otherwise the result is a plain constant leaf.

#include <functional>
#include <memory>
#include <vector>

#include "vos/tensor.hpp"

namespace vos {

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily by accumulate_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  void accumulate_grad(const Tensor& g);
  Tensor& grad_buffer();  // zero-initialized on first use
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  std::size_t numel() const { return node_->value.numel(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad();

  /// Backpropagates from this scalar (or from `seed` for non-scalar outputs).
  void backward() const;
  void backward(const Tensor& seed) const;

  /// Same value, no history.
  Var detach() const { return Var(node_->value, false); }

  const std::shared_ptr<Node>& node() const { return node_; }

  /// Builds a result node. `fn` receives the result node; it reads node.grad and
  /// pushes contributions into node.inputs[i]->accumulate_grad(...).
  static Var make(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn);

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace vos
