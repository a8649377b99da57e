#include "dtn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "dtn/errors.hpp"

namespace dtn {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;

void validate_shape(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}
}  // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool enabled) { g_grad_enabled = enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  validate_shape(shape);
  auto node = std::make_shared<detail::Node<T>>();
  node->data.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from_vector(Shape shape, std::vector<T> values, bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("from_vector: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from_vector({1}, {value}, requires_grad);
}

template <typename T>
detail::Node<T>& Tensor<T>::checked() const {
  if (!node_) throw std::logic_error("use of an undefined tensor");
  return *node_;
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  return checked().shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return checked().data.size();
}

template <typename T>
std::span<T> Tensor<T>::data() {
  return checked().data;
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  return checked().data;
}

template <typename T>
std::span<T> Tensor<T>::grad() {
  return checked().grad;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return checked().grad;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  const auto& n = checked();
  return !n.grad.empty() && n.grad.size() == n.data.size();
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return checked().requires_grad;
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool requires_grad) {
  auto& n = checked();
  if (!n.is_leaf()) throw std::logic_error("requires_grad can only be changed on leaf tensors");
  n.requires_grad = requires_grad;
  return *this;
}

template <typename T>
void Tensor<T>::zero_grad() {
  auto& n = checked();
  n.grad.assign(n.data.size(), T(0));
}

template <typename T>
T Tensor<T>::item() const {
  const auto& n = checked();
  if (n.data.size() != 1) {
    throw ShapeError("item() needs a single-element tensor, got " + shape_str(n.shape));
  }
  return n.data[0];
}

template <typename T>
std::vector<T> Tensor<T>::to_vector() const {
  return checked().data;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  const auto& n = checked();
  return from_vector(n.shape, n.data, false);
}

template <typename T>
const char* Tensor<T>::op_name() const {
  return checked().op;
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() without an upstream gradient needs a scalar, got " +
                     shape_str(shape()));
  }
  const T one = T(1);
  backward(std::span<const T>(&one, 1));
}

template <typename T>
void Tensor<T>::backward(std::span<const T> upstream) const {
  ComputationTape<T> tape(*this);
  tape.backward(upstream);
}

template <typename T>
ComputationTape<T>::ComputationTape(const Tensor<T>& root) : root_(root.node()) {
  if (!root_) throw std::logic_error("tape root is undefined");
  // Iterative post-order DFS: every node lands after all of its inputs.
  std::unordered_set<detail::Node<T>*> visited;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(root_.get(), 0);
  visited.insert(root_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      auto* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order_.push_back(node);
      stack.pop_back();
    }
  }
}

template <typename T>
void ComputationTape<T>::backward(std::span<const T> upstream) {
  if (upstream.size() != root_->data.size()) {
    throw ShapeError("upstream gradient has " + std::to_string(upstream.size()) +
                     " values, root has " + std::to_string(root_->data.size()));
  }
  if (!root_->requires_grad) {
    throw std::logic_error("backward() on a tensor that does not require grad");
  }
  for (auto* node : order_) node->ensure_grad();
  for (std::size_t i = 0; i < upstream.size(); ++i) root_->grad[i] += upstream[i];
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    auto* node = *it;
    if (node->backward) node->backward(*node);
  }
}

namespace detail {

namespace {
template <typename T>
bool all_finite(const std::vector<T>& v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

template <typename T>
Tensor<T> finish(const char* op, Shape shape, std::vector<T> data,
                 std::vector<std::shared_ptr<Node<T>>> inputs,
                 std::function<void(Node<T>&)> backward) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError(std::string(op) + ": result shape " + shape_str(shape) +
                     " does not match " + std::to_string(data.size()) + " values");
  }
  if (!all_finite(data)) {
    const bool inputs_finite = std::all_of(inputs.begin(), inputs.end(),
                                           [](const auto& n) { return all_finite(n->data); });
    if (inputs_finite) {
      throw NumericError(std::string(op) + ": non-finite output from finite inputs");
    }
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  const bool track = GradMode::enabled() &&
                     std::any_of(inputs.begin(), inputs.end(),
                                 [](const auto& n) { return n->requires_grad; });
  if (track) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}
}  // namespace

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward) {
  std::vector<std::shared_ptr<Node<T>>> nodes;
  nodes.reserve(inputs.size());
  for (const auto* t : inputs) nodes.push_back(t->node());
  return finish(op, std::move(shape), std::move(data), std::move(nodes), std::move(backward));
}

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                      const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward) {
  std::vector<std::shared_ptr<Node<T>>> nodes;
  nodes.reserve(inputs.size());
  for (const auto& t : inputs) nodes.push_back(t.node());
  return finish(op, std::move(shape), std::move(data), std::move(nodes), std::move(backward));
}

template Tensor<float> make_result(const char*, Shape, std::vector<float>,
                                   std::initializer_list<const Tensor<float>*>,
                                   std::function<void(Node<float>&)>);
template Tensor<double> make_result(const char*, Shape, std::vector<double>,
                                    std::initializer_list<const Tensor<double>*>,
                                    std::function<void(Node<double>&)>);
template Tensor<float> make_result(const char*, Shape, std::vector<float>,
                                   const std::vector<Tensor<float>>&,
                                   std::function<void(Node<float>&)>);
template Tensor<double> make_result(const char*, Shape, std::vector<double>,
                                    const std::vector<Tensor<double>>&,
                                    std::function<void(Node<double>&)>);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;
template class ComputationTape<float>;
template class ComputationTape<double>;

}  // namespace dtn
