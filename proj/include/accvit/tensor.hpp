#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "accvit/error.hpp"

namespace accvit {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Row-major strides of a contiguous buffer.
inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

// Gradient recording is per thread: each thread that runs a forward owns the
// graph it builds, so concurrent forwards over shared weights never interleave.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

class NoGradGuard {
 public:
  NoGradGuard() : saved_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something is accumulated
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(const Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> data,
                     bool requires_grad = false) {
    if (shape.empty()) shape = {1};
    for (auto d : shape) {
      if (d == 0) {
        throw Error(ErrorCode::kShapeMismatch,
                    "zero-sized dimension in " + to_string(shape));
      }
    }
    if (accvit::numel(shape) != data.size()) {
      throw Error(ErrorCode::kShapeMismatch,
                  "shape " + to_string(shape) + " needs " +
                      std::to_string(accvit::numel(shape)) + " values, got " +
                      std::to_string(data.size()));
    }
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor full(const Shape& shape, T fill, bool requires_grad = false) {
    return from(shape, std::vector<T>(accvit::numel(shape), fill), requires_grad);
  }

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return full(shape, T(0), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  /// Size of `axis`; negative axes count from the back.
  std::size_t dim(int axis) const {
    return node_->shape[normalize_axis(axis)];
  }

  std::size_t normalize_axis(int axis) const {
    const int n = static_cast<int>(ndim());
    const int a = axis < 0 ? axis + n : axis;
    if (a < 0 || a >= n) {
      throw Error(ErrorCode::kShapeMismatch,
                  "axis " + std::to_string(axis) + " out of range for " +
                      to_string(shape()));
    }
    return static_cast<std::size_t>(a);
  }

  std::span<const T> data() const { return node_->value; }
  // Only meant for leaves (initialization, loading, optimizer steps).
  std::span<T> mutable_data() { return node_->value; }
  T item() const {
    if (numel() != 1) {
      throw Error(ErrorCode::kNotScalar, "item() on " + to_string(shape()));
    }
    return node_->value[0];
  }
  T at(std::initializer_list<std::size_t> index) const {
    const auto st = strides_of(shape());
    std::size_t off = 0, i = 0;
    for (auto v : index) off += v * st[i++];
    return node_->value[off];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return !node_->backward; }
  const char* op_name() const { return node_->op; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  std::optional<Tensor> grad_tensor() const {
    if (!has_grad()) return std::nullopt;
    return from(shape(), node_->grad);
  }

  /// Value copy that does not participate in any graph.
  Tensor detach() const { return from(shape(), node_->value); }

  const detail::Node<T>* id() const { return node_.get(); }
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

#ifndef NDEBUG
template <typename T>
void check_finite(const Node<T>& n) {
  for (const T v : n.value) {
    if (!std::isfinite(v)) {
      throw Error(ErrorCode::kNonFinite,
                  std::string("non-finite output from ") + n.op);
    }
  }
}
#endif

/// Wraps an op result. The backward closure is recorded only when grad mode
/// is on and at least one input requires a gradient.
template <typename T, typename Backward>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<typename Tensor<T>::NodePtr> inputs,
                      Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
#ifndef NDEBUG
  bool inputs_finite = true;
  for (const auto& in : inputs) {
    for (const T v : in->value) inputs_finite = inputs_finite && std::isfinite(v);
  }
  if (inputs_finite) check_finite(*node);
#endif
  bool needs = false;
  if (grad_mode_flag()) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::forward<Backward>(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
void accumulate(const std::shared_ptr<Node<T>>& node, std::size_t i, T v) {
  if (node->requires_grad) node->grad_buffer()[i] += v;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into leaves
/// (call zero_grad between steps); intermediate gradients are reset first so
/// a graph can be swept more than once.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw Error(ErrorCode::kNotScalar,
                "backward needs a scalar loss, got " +
                    (loss.defined() ? to_string(loss.shape()) : "undefined"));
  }
  if (!loss.requires_grad()) {
    throw Error(ErrorCode::kDetachedTensor,
                "loss was not produced from any tensor requiring grad");
  }
  using NodeT = detail::Node<T>;
  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      NodeT* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (NodeT* n : order) {
    if (n->backward) n->grad.clear();
  }
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

}  // namespace accvit
