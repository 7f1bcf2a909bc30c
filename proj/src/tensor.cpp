#include "grucnn/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

namespace grucnn {

std::string shape_to_string(const Shape& shape) {
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

namespace detail {

std::uint64_t next_tensor_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
void TensorImpl<T>::accumulate_grad(std::span<const T> g) {
  if (grad.empty()) {
    grad.assign(g.begin(), g.end());
    return;
  }
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
}

template <typename T>
std::span<T> TensorImpl<T>::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), T(0));
  return grad;
}

template struct TensorImpl<float>;
template struct TensorImpl<double>;

}  // namespace detail

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool NoGradGuard::grad_enabled() { return g_grad_enabled; }

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value, bool requires_grad) {
  return from_buffer(shape, Buffer<T>(shape_numel(shape), value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_vector(const Shape& shape, std::vector<T> values, bool requires_grad) {
  return from_buffer(shape, Buffer<T>(values.begin(), values.end()), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_buffer(const Shape& shape, Buffer<T> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_to_string(shape));
  }
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("element count " + std::to_string(values.size()) + " does not match shape " +
                     shape_to_string(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->id = detail::next_tensor_id();
  impl->shape = shape;
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from_vector({1}, {value}, requires_grad);
}

template <typename T>
void Tensor<T>::require_defined() const {
  if (!impl_) throw AutodiffError("use of an undefined tensor");
}

template <typename T>
std::uint64_t Tensor<T>::id() const {
  require_defined();
  return impl_->id;
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  require_defined();
  return impl_->shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(s));
  }
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  require_defined();
  return impl_->data.size();
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  require_defined();
  return impl_->data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  require_defined();
  return impl_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_to_string(shape()));
  return impl_->data[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  require_defined();
  if (impl_->grad_fn) throw AutodiffError("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = flag;
  if (!flag) impl_->grad.clear();
  return *this;
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  require_defined();
  return impl_->grad_fn == nullptr;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return impl_ && !impl_->grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  require_defined();
  return impl_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  require_defined();
  if (!impl_->requires_grad) throw AutodiffError("tensor does not track gradients");
  return impl_->grad_buffer();
}

template <typename T>
void Tensor<T>::zero_grad() {
  require_defined();
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  require_defined();
  return from_buffer(impl_->shape, impl_->data, false);
}

template <typename T>
Tensor<T> Tensor<T>::make_result(const Shape& shape, Buffer<T> values, std::string op,
                                 std::vector<Tensor> inputs,
                                 std::function<void(std::span<const T>)> backward) {
  Tensor out = from_buffer(shape, std::move(values), false);
  if (!NoGradGuard::grad_enabled()) return out;
  const bool track = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!track) return out;
  auto node = std::make_shared<detail::Node<T>>();
  node->op = std::move(op);
  node->inputs.reserve(inputs.size());
  for (auto& in : inputs) {
    if (in.defined()) node->inputs.push_back(in.impl_);
  }
  node->backward = std::move(backward);
  out.impl_->requires_grad = true;
  out.impl_->grad_fn = std::move(node);
  return out;
}

namespace {

// Iterative post-order DFS; the result lists every tracked non-leaf once,
// producers before consumers.
template <typename T>
std::vector<detail::TensorImpl<T>*> topo_order(detail::TensorImpl<T>* root) {
  std::vector<detail::TensorImpl<T>*> order;
  std::unordered_set<detail::TensorImpl<T>*> visited;
  struct Frame {
    detail::TensorImpl<T>* impl;
    std::size_t next_input;
  };
  std::vector<Frame> stack;
  if (!root->grad_fn) return order;
  stack.push_back({root, 0});
  visited.insert(root);
  while (!stack.empty()) {
    auto& top = stack.back();
    const auto& inputs = top.impl->grad_fn->inputs;
    if (top.next_input < inputs.size()) {
      auto* child = inputs[top.next_input++].get();
      if (child->grad_fn && child->requires_grad && visited.insert(child).second) {
        stack.push_back({child, 0});
      }
    } else {
      order.push_back(top.impl);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

template <typename T>
void Tensor<T>::backward() const {
  require_defined();
  if (!impl_->requires_grad) throw AutodiffError("backward() on a tensor that does not track gradients");
  if (impl_->data.size() != 1) {
    throw AutodiffError("backward() requires a scalar, got shape " + shape_to_string(impl_->shape));
  }
  if (!impl_->grad_fn) {
    impl_->accumulate_grad(Buffer<T>{T(1)});
    return;
  }
  auto order = topo_order(impl_.get());
  // Non-leaf gradients are scratch space for this pass only.
  for (auto* node : order) node->grad.clear();
  impl_->grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (node->grad.empty()) continue;
    node->grad_fn->backward(node->grad);
    Buffer<T>().swap(node->grad);
  }
}

template <typename T>
std::vector<RecordEntry> Tensor<T>::computation_record() const {
  require_defined();
  std::vector<RecordEntry> record;
  for (auto* node : topo_order(impl_.get())) {
    RecordEntry e;
    e.op = node->grad_fn->op;
    for (const auto& in : node->grad_fn->inputs) e.input_ids.push_back(in->id);
    e.output_id = node->id;
    record.push_back(std::move(e));
  }
  return record;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace grucnn
