#include "vos/autograd.hpp"

#include <stdexcept>
#include <unordered_set>

namespace vos {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void Node::accumulate_grad(const Tensor& g) {
  if (!requires_grad) return;
  if (g.numel() != value.numel())
    throw std::logic_error("gradient shape " + shape_str(g.shape()) + " does not match value " +
                           shape_str(value.shape()));
  if (grad.empty()) {
    grad = Tensor(value.shape(), g.storage());
    return;
  }
  double* dst = grad.data();
  const double* src = g.data();
  for (std::size_t i = 0; i < grad.numel(); ++i) dst[i] += src[i];
}

Tensor& Node::grad_buffer() {
  if (grad.empty() && !value.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

void Var::zero_grad() {
  if (node_) node_->grad = Tensor();
}

Var Var::make(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
  Var out(std::move(value), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->inputs.reserve(inputs.size());
  for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
  out.node_->backward_fn = std::move(fn);
  return out;
}

void Var::backward() const {
  if (numel() != 1) throw std::logic_error("backward() without seed requires a scalar output");
  backward(Tensor(shape(), 1.0));
}

void Var::backward(const Tensor& seed) const {
  if (!requires_grad()) return;
  // Iterative post-order DFS; reversed order is a valid topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && child->backward_fn && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->accumulate_grad(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->grad.empty()) continue;
    n->backward_fn(*n);
  }
  // Interior gradients are not needed after the pass.
  for (Node* n : order)
    if (n != node_.get()) n->grad = Tensor();
}

}  // namespace vos
