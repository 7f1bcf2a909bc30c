#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "grucnn/tensor.hpp"

namespace grucnn {

// All ops record themselves for reverse-mode differentiation whenever an input
// tracks gradients and recording is enabled (see NoGradGuard).

/// 3x3 cross-correlation with zero padding of one, stride one.
/// input [batch, in_ch, H, W], kernel [out_ch, in_ch, 3, 3], bias [out_ch] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias = {});

/// Disjoint 2x2 max; gradient goes to the first maximal element in row-major order.
template <typename T>
Tensor<T> max_pool_2x2(const Tensor<T>& input);

enum class ElementwiseOp { Relu, Sigmoid, Tanh, Hadamard, Add, Sub, SubFromOne };

template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>& b = {});

template <typename T>
Tensor<T> relu(const Tensor<T>& a) { return elementwise(ElementwiseOp::Relu, a); }
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) { return elementwise(ElementwiseOp::Sigmoid, a); }
template <typename T>
Tensor<T> tanh(const Tensor<T>& a) { return elementwise(ElementwiseOp::Tanh, a); }
template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(ElementwiseOp::Hadamard, a, b);
}
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(ElementwiseOp::Add, a, b); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(ElementwiseOp::Sub, a, b); }
/// 1 - a
template <typename T>
Tensor<T> one_minus(const Tensor<T>& a) { return elementwise(ElementwiseOp::SubFromOne, a); }

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

/// Sum of all elements as a [1] tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& a);

template <typename T>
Tensor<T> mean(const Tensor<T>& a);

/// input [batch, n], weight [m, n], bias [m] or undefined -> [batch, m]
template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias = {});

template <typename T>
struct SoftmaxCrossEntropy {
  Tensor<T> probs;  // [batch, K], not tracked
  Tensor<T> loss;   // [1], mean negative log-probability of the targets
};

template <typename T>
SoftmaxCrossEntropy<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> targets);

/// Row-wise softmax without gradient tracking.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

/// Inverted dropout; identity when `training` is false or rate is zero.
template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double rate, bool training, std::mt19937_64& rng);

/// Learnable scale/shift plus running statistics for per-channel normalisation.
template <typename T>
struct BatchNormState {
  Tensor<T> gamma;         // [ch], tracked
  Tensor<T> beta;          // [ch], tracked
  Tensor<T> running_mean;  // [ch]
  Tensor<T> running_var;   // [ch]
  double momentum = 0.99;  // running = momentum * running + (1 - momentum) * batch
  double eps = 1e-3;

  static BatchNormState create(std::size_t channels);
};

/// Normalises [batch, ch, H, W] per channel over batch and spatial axes.
/// Training mode uses batch statistics and updates the running statistics.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, BatchNormState<T>& state, bool training);

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, const Shape& shape);

/// Concatenates along axis 0; all trailing extents must agree.
template <typename T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts);

/// Takes `count` entries starting at `begin` along axis 1.
template <typename T>
Tensor<T> slice1(const Tensor<T>& input, std::size_t begin, std::size_t count);

}  // namespace grucnn
