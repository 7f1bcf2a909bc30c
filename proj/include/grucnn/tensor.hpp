#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace grucnn {

using Shape = std::vector<std::size_t>;

/// Allocator with cache-line alignment. Eigen picks different (equally valid)
/// summation orders for differently aligned operands, so tensor storage uses a
/// fixed alignment to keep repeated runs bit-identical.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when operand shapes are incompatible. The message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for misuse of the gradient machinery (backward on a non-scalar, etc).
class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node;

template <typename T>
struct TensorImpl {
  std::uint64_t id = 0;
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::shared_ptr<Node<T>> grad_fn;  // null for leaves

  void accumulate_grad(std::span<const T> g);
  std::span<T> grad_buffer();  // allocates zeros on first use
};

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

/// One recorded operation. `backward` receives the gradient of the output and
/// accumulates into the inputs that require gradients.
template <typename T>
struct Node {
  std::string op;
  std::vector<ImplPtr<T>> inputs;
  std::function<void(std::span<const T> out_grad)> backward;
};

std::uint64_t next_tensor_id();

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool grad_enabled();

 private:
  bool previous_;
};

/// Entry of the topologically ordered record produced for a backward pass.
struct RecordEntry {
  std::string op;
  std::vector<std::uint64_t> input_ids;
  std::uint64_t output_id = 0;
};

/// Dense row-major tensor with optional reverse-mode gradient tracking.
///
/// A Tensor is a shared handle: copies alias the same storage. Values are not
/// modified after an op writes them, apart from `mutable_data()` which exists
/// for parameter updates and initialisation.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, T value, bool requires_grad = false);
  static Tensor from_vector(const Shape& shape, std::vector<T> values, bool requires_grad = false);
  static Tensor from_buffer(const Shape& shape, Buffer<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  std::uint64_t id() const;
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const T> data() const;
  std::span<T> mutable_data();
  T item() const;
  T at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  /// Reverse pass from a scalar. Leaf gradients accumulate across calls.
  void backward() const;

  /// Operations reachable from this tensor, inputs before consumers.
  std::vector<RecordEntry> computation_record() const;

  /// Same values, no history, no gradient tracking.
  Tensor detach() const;

  // Internal: used by op implementations.
  static Tensor make_result(const Shape& shape, Buffer<T> values, std::string op,
                            std::vector<Tensor> inputs,
                            std::function<void(std::span<const T>)> backward);
  const detail::ImplPtr<T>& impl() const { return impl_; }

 private:
  explicit Tensor(detail::ImplPtr<T> impl) : impl_(std::move(impl)) {}
  void require_defined() const;

  detail::ImplPtr<T> impl_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace grucnn
