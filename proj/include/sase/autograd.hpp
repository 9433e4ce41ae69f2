#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sase/tensor.hpp"

namespace sase {

template <class T>
struct Node {
  Tensor<T> value;
  std::vector<T> grad;  // empty until first touched by backprop
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

namespace detail {
inline thread_local int no_grad_depth = 0;
}

/// While alive, ops produce constants and record nothing.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() noexcept { return detail::no_grad_depth == 0; }

/// Handle to a value in the computation graph.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    return Var(std::move(node));
  }
  static Var leaf(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Var(std::move(node));
  }

  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::vector<T>& grad() const { return node_->grad; }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& handle() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds the output node of an op. The backward closure is attached only
/// when some input needs a gradient and recording is enabled.
template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward,
                   const char* op) {
  if (!value.all_finite()) fail(ErrorKind::Numeric, std::string("non-finite value produced by ") + op);
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled())
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->leaf = false;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.handle());
    node->backward = std::move(backward);
  }
  return Var<T>(std::move(node));
}

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; interior gradients are recomputed from scratch each sweep.
template <class T>
void backprop(const Var<T>& loss) {
  if (!loss) fail(ErrorKind::Value, "backprop on empty variable");
  if (loss.value().size() != 1) fail(ErrorKind::Shape, "backprop requires a scalar loss, got " + loss.shape().str());
  if (!loss.requires_grad()) fail(ErrorKind::Value, "backprop on a detached graph");

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // Leaves collect this sweep's gradient in a fresh buffer which is added to
  // their running total at the end, so repeated sweeps sum exactly.
  std::vector<std::pair<Node<T>*, std::vector<T>>> prior;
  for (Node<T>* node : order) {
    if (node->leaf) prior.emplace_back(node, std::move(node->grad));
    node->grad.assign(node->value.size(), T(0));
  }
  loss.node()->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->leaf) node->backward(*node);
  }
  for (auto& [node, old] : prior)
    if (old.size() == node->grad.size())
      for (std::size_t i = 0; i < old.size(); ++i) node->grad[i] += old[i];
}

enum class ParamGroup { NetworkWeight, ArchitectureWeight };

/// A named trainable leaf. The optimizer of its group is the only writer.
template <class T>
class Parameter {
 public:
  Parameter(std::string name, Tensor<T> init, ParamGroup group = ParamGroup::NetworkWeight)
      : name_(std::move(name)), var_(Var<T>::leaf(std::move(init))), group_(group) {}

  const std::string& name() const noexcept { return name_; }
  ParamGroup group() const noexcept { return group_; }
  const Var<T>& var() const noexcept { return var_; }
  const Shape& shape() const { return var_.shape(); }
  std::size_t size() const { return var_.value().size(); }

  std::span<T> values() { return var_.node()->value.data(); }
  std::span<const T> values() const { return var_.node()->value.data(); }
  const Tensor<T>& tensor() const { return var_.value(); }
  void assign(const Tensor<T>& t) {
    if (t.shape() != shape()) fail(ErrorKind::Shape, "parameter " + name_ + " expects " + shape().str());
    var_.node()->value = t;
  }

  bool has_grad() const { return var_.node()->grad.size() == size(); }
  std::span<T> grad() { return var_.node()->ensure_grad(); }
  void zero_grad() { var_.node()->grad.assign(size(), T(0)); }

 private:
  std::string name_;
  Var<T> var_;
  ParamGroup group_;
};

template <class T>
void zero_grads(const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace sase
