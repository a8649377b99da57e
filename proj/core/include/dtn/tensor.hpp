#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap shared handle onto a graph node. Ops executed while
// GradMode is enabled and at least one input requires a gradient record their
// inputs and a backward rule on the output node; the recorded graph forms the
// computation tape that Tensor::backward() replays in reverse.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dtn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

/// Thread-local switch for graph recording.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<T> data();
  std::span<const T> data() const;
  /// Empty until a backward pass (or zero_grad) allocates the buffer.
  std::span<T> grad();
  std::span<const T> grad() const;
  bool has_grad() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool requires_grad);
  /// Zero-fills the gradient buffer, allocating it if needed.
  void zero_grad();

  T item() const;
  std::vector<T> to_vector() const;
  /// New leaf tensor holding a copy of the data, no graph history.
  Tensor detach() const;
  const char* op_name() const;

  /// Seeds d(this)/d(this) = 1 and replays the tape. Requires numel() == 1.
  void backward() const;
  /// Replays the tape with an explicit upstream gradient of matching size.
  void backward(std::span<const T> upstream) const;

  const NodePtr& node() const { return node_; }

 private:
  detail::Node<T>& checked() const;

  NodePtr node_;
};

/// Ordered record of the primitive ops reachable from a root tensor.
///
/// ops() lists nodes in execution order (inputs before consumers); backward()
/// visits that list in reverse, invoking each recorded backward rule once.
template <typename T>
class ComputationTape {
 public:
  explicit ComputationTape(const Tensor<T>& root);

  std::span<detail::Node<T>* const> ops() const { return order_; }
  std::size_t size() const { return order_.size(); }
  void backward(std::span<const T> upstream);

 private:
  std::shared_ptr<detail::Node<T>> root_;
  std::vector<detail::Node<T>*> order_;
};

namespace detail {

/// Builds an op output. When recording is enabled and an input requires a
/// gradient, the node keeps its inputs and backward rule; otherwise both are
/// dropped. Throws NumericError if finite inputs produced a non-finite value.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward);

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                      const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward);

/// Gradient buffer of an input, or nullptr when it does not need one.
template <typename T>
inline std::vector<T>* grad_target(Node<T>& input) {
  if (!input.requires_grad) return nullptr;
  input.ensure_grad();
  return &input.grad;
}

}  // namespace detail

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace dtn
