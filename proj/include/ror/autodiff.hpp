#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ror/tensor.hpp"

namespace ror {

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

template <typename Scalar>
struct TapeNode {
  Tensor<Scalar> value;
  std::optional<Tensor<Scalar>> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TapeNode>> parents;
  // Reads node.grad and accumulates into node.parents.
  std::function<void(TapeNode&)> backward;

  bool is_leaf() const { return !backward; }

  void accumulate(const typename Tensor<Scalar>::Values& g) {
    if (!grad) {
      grad = Tensor<Scalar>(value.shape(), g);
    } else {
      grad->values() += g;
    }
  }
};

/// Handle to a value on the gradient tape. Copies share the underlying node.
template <typename Scalar>
class Var {
 public:
  using Node = TapeNode<Scalar>;

  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var leaf(Tensor<Scalar> value, bool requires_grad = false) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Var(std::move(node));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<Scalar>& value() const { return node_->value; }
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::optional<Tensor<Scalar>>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.reset(); }
  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Wraps a freshly computed value into a tape node. Rejects non-finite results.
template <typename Scalar>
Var<Scalar> record(const char* op, Tensor<Scalar> value, std::vector<Var<Scalar>> inputs,
                   std::function<void(TapeNode<Scalar>&)> backward) {
  if (!value.all_finite()) {
    throw NumericError(std::string(op) + ": non-finite value in output");
  }
  auto node = std::make_shared<TapeNode<Scalar>>();
  node->value = std::move(value);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any && grad_enabled()) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node_ptr());
    node->backward = std::move(backward);
  }
  return Var<Scalar>(std::move(node));
}

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across calls;
/// interior gradients are recomputed each call.
template <typename Scalar>
void backward(const Var<Scalar>& loss) {
  if (loss.value().size() != 1) {
    throw ConfigError("backward requires a scalar loss, got shape " + loss.shape().str());
  }
  if (!loss.requires_grad()) return;

  using Node = TapeNode<Scalar>;
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{&loss.node(), 0}};
  visited.insert(&loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* node : order) {
    if (!node->is_leaf()) node->grad.reset();
  }
  loss.node().accumulate(Tensor<Scalar>::Values::Ones(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->is_leaf() && node->grad) node->backward(*node);
  }
}

/// Trainable tensor with a hierarchical name, e.g. group2.block3.conv1.weight.
template <typename Scalar>
struct Parameter {
  std::string name;
  Var<Scalar> var;
  std::optional<Tensor<Scalar>> momentum_buffer;

  Parameter() = default;
  Parameter(std::string n, Tensor<Scalar> value)
      : name(std::move(n)), var(Var<Scalar>::leaf(std::move(value), true)) {}

  const Tensor<Scalar>& value() const { return var.value(); }
  Tensor<Scalar>& mutable_value() { return var.mutable_value(); }
  const std::optional<Tensor<Scalar>>& grad() const { return var.grad(); }
  void zero_grad() { var.zero_grad(); }
};

template <typename Scalar>
struct BatchNormState {
  Parameter<Scalar> gamma;
  Parameter<Scalar> beta;
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;
  Scalar momentum = Scalar(0.1);
  Scalar epsilon = Scalar(1e-5);

  BatchNormState() = default;
  BatchNormState(const std::string& prefix, Index channels)
      : gamma(prefix + ".gamma", Tensor<Scalar>::ones(Shape{channels})),
        beta(prefix + ".beta", Tensor<Scalar>::zeros(Shape{channels})),
        running_mean(Tensor<Scalar>::zeros(Shape{channels})),
        running_var(Tensor<Scalar>::ones(Shape{channels})) {}

  Index channels() const { return gamma.value().size(); }
};

enum class Mode { train, eval };

}  // namespace ror
