#include "mtu/tensor.hpp"

#include <Eigen/Core>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace mtu {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void check_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

namespace detail {

template <class T>
void check_finite(std::span<const T> values, const char* op) {
  // x - x is NaN exactly for non-finite x; the vectorized sum finds any of them.
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const Eigen::Map<const Arr> a(values.data(), static_cast<Eigen::Index>(values.size()));
  if (std::isfinite((a - a).sum())) return;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string(op) + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

template <class T>
Tensor<T> make_result(Shape shape, Buffer<T> value, std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backward_fn, const char* op) {
  if (shape_numel(shape) != value.size()) {
    throw ShapeError(std::string(op) + ": result size " + std::to_string(value.size()) +
                     " does not match shape " + shape_str(shape));
  }
  check_finite<T>(value, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->leaf = false;
  bool needs = false;
  for (const auto& p : parents) {
    if (p->requires_grad) needs = true;
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

}  // namespace detail

template <class T>
Tensor<T> Tensor<T>::constant(Shape shape, std::vector<T> values) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("Tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
  }
  detail::check_finite<T>(values, "Tensor");
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value.assign(values.begin(), values.end());
  return Tensor(std::move(node));
}

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  const auto n = shape_numel(shape);
  return constant(std::move(shape), std::vector<T>(n, T(0)));
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const auto n = shape_numel(shape);
  return constant(std::move(shape), std::vector<T>(n, value));
}

template <class T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

template <class T>
std::size_t Tensor<T>::dim(std::ptrdiff_t i) const {
  const auto r = static_cast<std::ptrdiff_t>(rank());
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw ShapeError("dim " + std::to_string(i) + " out of range for " + shape_str(shape()));
  return node_->shape[static_cast<std::size_t>(i)];
}

template <class T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_->leaf) throw GraphError("mutable_data: only leaf tensors may be modified in place");
  return node_->value;
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

template <class T>
void Tensor<T>::set_requires_grad(bool on) {
  if (!node_->leaf) throw GraphError("set_requires_grad: only leaf tensors");
  node_->requires_grad = on;
}

template <class T>
void Tensor<T>::zero_grad() {
  node_->grad.clear();
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = node_->shape;
  node->value = node_->value;
  return Tensor(std::move(node));
}

template <class T>
Tensor<T> Tensor<T>::clone() const {
  Tensor t = detach();
  t.node_->requires_grad = node_->leaf && node_->requires_grad;
  return t;
}

template <class T>
void backward(const Tensor<T>& loss) {
  using NodeT = detail::Node<T>;
  if (!loss.defined()) throw GraphError("backward: undefined loss");
  if (loss.numel() != 1) throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  NodeT* root = loss.node().get();
  if (root->released) throw GraphError("backward: graph already consumed; rebuild the forward pass");
  if (!root->requires_grad) throw GraphError("backward: loss does not depend on any trainable tensor");

  // Iterative post-order DFS gives a topological order (parents before children).
  // `order` owns its nodes so releasing a record cannot free one still queued.
  std::vector<std::shared_ptr<NodeT>> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<std::shared_ptr<NodeT>, std::size_t>> stack{{loss.node(), 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      const auto& p = node->parents[next++];
      if (p->requires_grad && !visited.count(p.get())) {
        if (p->released) throw GraphError("backward: graph contains a released record");
        visited.insert(p.get());
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }

  auto& seed = root->ensure_grad();
  seed[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = it->get();
    if (node->leaf) continue;
    if (node->backward_fn && node->grad.size() == node->value.size()) node->backward_fn(*node);
    node->backward_fn = nullptr;
    node->parents.clear();
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->released = true;
  }
}

template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);
template void detail::check_finite<float>(std::span<const float>, const char*);
template void detail::check_finite<double>(std::span<const double>, const char*);
template Tensor<float> detail::make_result<float>(Shape, detail::Buffer<float>,
                                                  std::vector<std::shared_ptr<detail::Node<float>>>,
                                                  std::function<void(detail::Node<float>&)>, const char*);
template Tensor<double> detail::make_result<double>(Shape, detail::Buffer<double>,
                                                    std::vector<std::shared_ptr<detail::Node<double>>>,
                                                    std::function<void(detail::Node<double>&)>, const char*);

}  // namespace mtu
