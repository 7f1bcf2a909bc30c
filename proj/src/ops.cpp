#include "grucnn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace grucnn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

// Gradient destination of an op input, or an empty span when it is not tracked.
template <typename T>
std::span<T> grad_sink(const Tensor<T>& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  return t.impl()->grad_buffer();
}

void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                     shape_to_string(s));
  }
}

// cols is [C*9, H*W] for a single image; row (c, ky, kx), column (y, x).
template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, T* cols) {
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    const T* plane = x + c * HW;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = cols + ((c * 9) + static_cast<std::size_t>(ky * 3 + kx)) * HW;
        const int dy = ky - 1;
        const int dx = kx - 1;
        for (std::size_t y = 0; y < H; ++y) {
          T* dst = row + y * W;
          const long sy = static_cast<long>(y) + dy;
          if (sy < 0 || sy >= static_cast<long>(H)) {
            std::fill_n(dst, W, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(sy) * W;
          if (dx < 0) {
            dst[0] = T(0);
            std::copy_n(src, W - 1, dst + 1);
          } else if (dx > 0) {
            std::copy_n(src + 1, W - 1, dst);
            dst[W - 1] = T(0);
          } else {
            std::copy_n(src, W, dst);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, std::size_t C, std::size_t H, std::size_t W, T* dx) {
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    T* plane = dx + c * HW;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* row = cols + ((c * 9) + static_cast<std::size_t>(ky * 3 + kx)) * HW;
        const int dy = ky - 1;
        const int ddx = kx - 1;
        const std::size_t x_lo = ddx < 0 ? 1 : 0;
        const std::size_t x_hi = ddx > 0 ? W - 1 : W;
        for (std::size_t y = 0; y < H; ++y) {
          const long sy = static_cast<long>(y) + dy;
          if (sy < 0 || sy >= static_cast<long>(H)) continue;
          T* dst = plane + static_cast<std::size_t>(sy) * W;
          const T* src = row + y * W;
          for (std::size_t xx = x_lo; xx < x_hi; ++xx) dst[xx + ddx] += src[xx];
        }
      }
    }
  }
}

template <typename T>
Buffer<T>& scratch(std::size_t n, int slot) {
  thread_local Buffer<T> buffers[2];
  auto& buf = buffers[slot];
  if (buf.size() < n) buf.resize(n);
  return buf;
}


}  // namespace

// ---------------------------------------------------------------------------
// conv2d

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias) {
  require_rank(input.shape(), 4, "conv2d input");
  require_rank(kernel.shape(), 4, "conv2d kernel");
  const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t O = kernel.dim(0);
  if (kernel.dim(1) != C || kernel.dim(2) != 3 || kernel.dim(3) != 3) {
    throw ShapeError("conv2d channel mismatch: input " + shape_to_string(input.shape()) + " vs kernel " +
                     shape_to_string(kernel.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != O)) {
    throw ShapeError("conv2d bias " + shape_to_string(bias.shape()) + " does not match kernel " +
                     shape_to_string(kernel.shape()));
  }
  const std::size_t HW = H * W, K = C * 9;

  const auto x = input.data();
  const ConstMapMat<T> kmat(kernel.data().data(), O, K);
  Buffer<T> out(B * O * HW);
  auto& cols = scratch<T>(K * HW, 0);
  for (std::size_t b = 0; b < B; ++b) {
    im2col(x.data() + b * C * HW, C, H, W, cols.data());
    MapMat<T> ob(out.data() + b * O * HW, O, HW);
    ob.noalias() = kmat * ConstMapMat<T>(cols.data(), K, HW);
    if (bias.defined()) {
      const auto bv = bias.data();
      for (std::size_t o = 0; o < O; ++o) ob.row(static_cast<Eigen::Index>(o)).array() += bv[o];
    }
  }

  return Tensor<T>::make_result(
      {B, O, H, W}, std::move(out), "conv2d", {input, kernel, bias},
      [input, kernel, bias, B, C, H, W, O, HW, K](std::span<const T> gy) {
        auto gb = grad_sink(bias);
        auto gk = grad_sink(kernel);
        auto gx = grad_sink(input);
        const auto x = input.data();
        const ConstMapMat<T> kmat(kernel.data().data(), O, K);
        auto& cols = scratch<T>(K * HW, 0);
        auto& dcols = scratch<T>(K * HW, 1);
        for (std::size_t b = 0; b < B; ++b) {
          const ConstMapMat<T> g(gy.data() + b * O * HW, O, HW);
          if (!gb.empty()) {
            // Plain loop: Eigen's vectorized sum depends on the row's alignment.
            for (std::size_t o = 0; o < O; ++o) {
              const T* row = gy.data() + (b * O + o) * HW;
              gb[o] += std::accumulate(row, row + HW, T(0));
            }
          }
          if (!gk.empty()) {
            im2col(x.data() + b * C * HW, C, H, W, cols.data());
            MapMat<T>(gk.data(), O, K).noalias() += g * ConstMapMat<T>(cols.data(), K, HW).transpose();
          }
          if (!gx.empty()) {
            MapMat<T>(dcols.data(), K, HW).noalias() = kmat.transpose() * g;
            col2im_add(dcols.data(), C, H, W, gx.data() + b * C * HW);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// max pooling

template <typename T>
Tensor<T> max_pool_2x2(const Tensor<T>& input) {
  require_rank(input.shape(), 4, "max_pool_2x2 input");
  const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw ShapeError("max_pool_2x2 needs even spatial extents, got " + shape_to_string(input.shape()));
  }
  const std::size_t Ho = H / 2, Wo = W / 2;
  Buffer<T> out(B * C * Ho * Wo);
  std::vector<std::uint32_t> argmax(out.size());
  const auto x = input.data();
  for (std::size_t p = 0; p < B * C; ++p) {
    const T* plane = x.data() + p * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const std::size_t base = (2 * oy) * W + 2 * ox;
        const std::size_t cand[4] = {base, base + 1, base + W, base + W + 1};
        std::size_t best = cand[0];
        for (int k = 1; k < 4; ++k) {
          if (plane[cand[k]] > plane[best]) best = cand[k];
        }
        const std::size_t o = p * Ho * Wo + oy * Wo + ox;
        out[o] = plane[best];
        argmax[o] = static_cast<std::uint32_t>(p * H * W + best);
      }
    }
  }
  return Tensor<T>::make_result({B, C, Ho, Wo}, std::move(out), "max_pool_2x2", {input},
                                [input, argmax = std::move(argmax)](std::span<const T> gy) {
                                  auto gx = grad_sink(input);
                                  for (std::size_t i = 0; i < gy.size(); ++i) gx[argmax[i]] += gy[i];
                                });
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>& b) {
  const bool binary = op == ElementwiseOp::Hadamard || op == ElementwiseOp::Add || op == ElementwiseOp::Sub;
  if (binary) {
    if (!b.defined()) throw ShapeError("binary elementwise op needs two operands");
    if (a.shape() != b.shape()) {
      throw ShapeError("elementwise shape mismatch: " + shape_to_string(a.shape()) + " vs " +
                       shape_to_string(b.shape()));
    }
  }
  const auto x = a.data();
  const std::size_t n = x.size();
  Buffer<T> out(n);
  switch (op) {
    case ElementwiseOp::Relu: {
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
      return Tensor<T>::make_result(a.shape(), std::move(out), "relu", {a}, [a](std::span<const T> g) {
        auto ga = grad_sink(a);
        const auto xa = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (xa[i] > T(0)) ga[i] += g[i];
        }
      });
    }
    case ElementwiseOp::Sigmoid:
    case ElementwiseOp::Tanh: {
      const bool is_sigmoid = op == ElementwiseOp::Sigmoid;
      ArrMap<T> o(out.data(), static_cast<Eigen::Index>(n));
      const ConstArrMap<T> xin(x.data(), static_cast<Eigen::Index>(n));
      if (is_sigmoid) {
        o = xin.logistic();
      } else {
        o = xin.tanh();
      }
      auto result = Tensor<T>::make_result(a.shape(), std::move(out), is_sigmoid ? "sigmoid" : "tanh", {a}, {});
      if (!result.requires_grad()) return result;
      // The node is owned by `self`, so the raw pointer outlives every call.
      auto* self = result.impl().get();
      result.impl()->grad_fn->backward = [a, self, is_sigmoid](std::span<const T> g) {
        auto ga = grad_sink(a);
        const auto len = static_cast<Eigen::Index>(g.size());
        const ConstArrMap<T> y(self->data.data(), len);
        const ConstArrMap<T> gv(g.data(), len);
        if (is_sigmoid) {
          ArrMap<T>(ga.data(), len) += gv * y * (T(1) - y);
        } else {
          ArrMap<T>(ga.data(), len) += gv * (T(1) - y * y);
        }
      };
      return result;
    }
    case ElementwiseOp::SubFromOne: {
      for (std::size_t i = 0; i < n; ++i) out[i] = T(1) - x[i];
      return Tensor<T>::make_result(a.shape(), std::move(out), "sub_from_one", {a},
                                    [a](std::span<const T> g) {
                                      auto ga = grad_sink(a);
                                      for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i];
                                    });
    }
    case ElementwiseOp::Hadamard: {
      const auto y = b.data();
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
      return Tensor<T>::make_result(a.shape(), std::move(out), "hadamard", {a, b},
                                    [a, b](std::span<const T> g) {
                                      if (auto ga = grad_sink(a); !ga.empty()) {
                                        const auto yb = b.data();
                                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * yb[i];
                                      }
                                      if (auto gb = grad_sink(b); !gb.empty()) {
                                        const auto xa = a.data();
                                        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * xa[i];
                                      }
                                    });
    }
    case ElementwiseOp::Add:
    case ElementwiseOp::Sub: {
      const auto y = b.data();
      const T sign = op == ElementwiseOp::Add ? T(1) : T(-1);
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + sign * y[i];
      return Tensor<T>::make_result(a.shape(), std::move(out), op == ElementwiseOp::Add ? "add" : "sub",
                                    {a, b}, [a, b, sign](std::span<const T> g) {
                                      if (auto ga = grad_sink(a); !ga.empty()) {
                                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                                      }
                                      if (auto gb = grad_sink(b); !gb.empty()) {
                                        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sign * g[i];
                                      }
                                    });
    }
  }
  throw std::invalid_argument("unknown elementwise op");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  const auto x = a.data();
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  return Tensor<T>::make_result(a.shape(), std::move(out), "scale", {a}, [a, factor](std::span<const T> g) {
    auto ga = grad_sink(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  const auto x = a.data();
  const T total = std::accumulate(x.begin(), x.end(), T(0));
  return Tensor<T>::make_result({1}, {total}, "sum", {a}, [a](std::span<const T> g) {
    auto ga = grad_sink(a);
    for (auto& v : ga) v += g[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// dense

template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(input.shape(), 2, "dense input");
  require_rank(weight.shape(), 2, "dense weight");
  const std::size_t B = input.dim(0), n = input.dim(1), m = weight.dim(0);
  if (weight.dim(1) != n) {
    throw ShapeError("dense inner-dimension mismatch: input " + shape_to_string(input.shape()) +
                     " vs weight " + shape_to_string(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != m)) {
    throw ShapeError("dense bias " + shape_to_string(bias.shape()) + " does not match weight " +
                     shape_to_string(weight.shape()));
  }
  Buffer<T> out(B * m);
  MapMat<T> y(out.data(), B, m);
  y.noalias() = ConstMapMat<T>(input.data().data(), B, n) * ConstMapMat<T>(weight.data().data(), m, n).transpose();
  if (bias.defined()) {
    const auto bv = bias.data();
    for (std::size_t r = 0; r < B; ++r) {
      for (std::size_t j = 0; j < m; ++j) out[r * m + j] += bv[j];
    }
  }
  return Tensor<T>::make_result({B, m}, std::move(out), "dense", {input, weight, bias},
                                [input, weight, bias, B, n, m](std::span<const T> g) {
                                  ConstMapMat<T> gy(g.data(), B, m);
                                  if (auto gx = grad_sink(input); !gx.empty()) {
                                    MapMat<T>(gx.data(), B, n).noalias() +=
                                        gy * ConstMapMat<T>(weight.data().data(), m, n);
                                  }
                                  if (auto gw = grad_sink(weight); !gw.empty()) {
                                    MapMat<T>(gw.data(), m, n).noalias() +=
                                        gy.transpose() * ConstMapMat<T>(input.data().data(), B, n);
                                  }
                                  if (auto gb = grad_sink(bias); !gb.empty()) {
                                    for (std::size_t i = 0; i < B; ++i)
                                      for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
                                  }
                                });
}

// ---------------------------------------------------------------------------
// softmax / cross-entropy

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  require_rank(logits.shape(), 2, "softmax logits");
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  const auto z = logits.data();
  Buffer<T> p(B * K);
  for (std::size_t r = 0; r < B; ++r) {
    const T* row = z.data() + r * K;
    const T mx = *std::max_element(row, row + K);
    T total = 0;
    for (std::size_t k = 0; k < K; ++k) {
      p[r * K + k] = std::exp(row[k] - mx);
      total += p[r * K + k];
    }
    for (std::size_t k = 0; k < K; ++k) p[r * K + k] /= total;
  }
  return Tensor<T>::from_buffer({B, K}, std::move(p));
}

template <typename T>
SoftmaxCrossEntropy<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy logits");
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  if (K < 2) throw ShapeError("softmax_cross_entropy needs at least two categories");
  if (targets.size() != B) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_to_string(logits.shape()));
  }
  for (std::size_t r = 0; r < B; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= K) {
      throw std::out_of_range("target " + std::to_string(targets[r]) + " out of range for " +
                              std::to_string(K) + " categories");
    }
  }
  const auto z = logits.data();
  Buffer<T> p(B * K);
  T loss = 0;
  for (std::size_t r = 0; r < B; ++r) {
    const T* row = z.data() + r * K;
    const T mx = *std::max_element(row, row + K);
    T total = 0;
    for (std::size_t k = 0; k < K; ++k) total += std::exp(row[k] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t k = 0; k < K; ++k) p[r * K + k] = std::exp(row[k] - lse);
    loss += lse - row[targets[r]];
  }
  loss /= static_cast<T>(B);
  auto probs = Tensor<T>::from_buffer({B, K}, p);
  std::vector<int> tgt(targets.begin(), targets.end());
  auto loss_t = Tensor<T>::make_result(
      {1}, {loss}, "softmax_cross_entropy", {logits},
      [logits, p = std::move(p), tgt = std::move(tgt), B, K](std::span<const T> g) {
        auto gl = grad_sink(logits);
        const T s = g[0] / static_cast<T>(B);
        for (std::size_t r = 0; r < B; ++r) {
          for (std::size_t k = 0; k < K; ++k) {
            const T onehot = static_cast<std::size_t>(tgt[r]) == k ? T(1) : T(0);
            gl[r * K + k] += s * (p[r * K + k] - onehot);
          }
        }
      });
  return {std::move(probs), std::move(loss_t)};
}

// ---------------------------------------------------------------------------
// dropout

template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double rate, bool training, std::mt19937_64& rng) {
  if (!(rate >= 0.0) || rate >= 1.0) {
    throw std::invalid_argument("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return input;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  const auto x = input.data();
  Buffer<T> mask(x.size());
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (auto& m : mask) m = unif(rng) < rate ? T(0) : keep_scale;
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * mask[i];
  return Tensor<T>::make_result(input.shape(), std::move(out), "dropout", {input},
                                [input, mask = std::move(mask)](std::span<const T> g) {
                                  auto gx = grad_sink(input);
                                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
                                });
}

// ---------------------------------------------------------------------------
// batch norm

template <typename T>
BatchNormState<T> BatchNormState<T>::create(std::size_t channels) {
  BatchNormState s;
  s.gamma = Tensor<T>::full({channels}, T(1), true);
  s.beta = Tensor<T>::zeros({channels}, true);
  s.running_mean = Tensor<T>::zeros({channels});
  s.running_var = Tensor<T>::full({channels}, T(1));
  return s;
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, BatchNormState<T>& state, bool training) {
  require_rank(input.shape(), 4, "batch_norm input");
  const std::size_t B = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (state.gamma.dim(0) != C) {
    throw ShapeError("batch_norm: input " + shape_to_string(input.shape()) + " vs " +
                     std::to_string(state.gamma.dim(0)) + " channels");
  }
  if (training && B < 2) throw std::invalid_argument("batch_norm in training mode needs batch >= 2");
  const auto x = input.data();
  const auto gamma = state.gamma.data();
  const auto beta = state.beta.data();
  const T eps = static_cast<T>(state.eps);
  const T count = static_cast<T>(B * HW);

  std::vector<T> mu(C), inv_std(C);
  if (training) {
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    const T mom = static_cast<T>(state.momentum);
    for (std::size_t c = 0; c < C; ++c) {
      T s = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = x.data() + (b * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      const T m = s / count;
      T v = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = x.data() + (b * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) v += (p[i] - m) * (p[i] - m);
      }
      v /= count;
      mu[c] = m;
      inv_std[c] = T(1) / std::sqrt(v + eps);
      rm[c] = mom * rm[c] + (T(1) - mom) * m;
      rv[c] = mom * rv[c] + (T(1) - mom) * v;
    }
  } else {
    const auto rm = state.running_mean.data();
    const auto rv = state.running_var.data();
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = rm[c];
      inv_std[c] = T(1) / std::sqrt(rv[c] + eps);
    }
  }

  Buffer<T> xhat(x.size()), out(x.size());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (b * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        xhat[off + i] = (x[off + i] - mu[c]) * inv_std[c];
        out[off + i] = gamma[c] * xhat[off + i] + beta[c];
      }
    }
  }
  return Tensor<T>::make_result(
      input.shape(), std::move(out), "batch_norm", {input, state.gamma, state.beta},
      [input, gamma_t = state.gamma, beta_t = state.beta, xhat = std::move(xhat), inv_std, training, B, C,
       HW, count](std::span<const T> g) {
        const auto gamma = gamma_t.data();
        std::vector<T> sum_g(C, T(0)), sum_gx(C, T(0));
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (b * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              sum_g[c] += g[off + i];
              sum_gx[c] += g[off + i] * xhat[off + i];
            }
          }
        }
        if (auto gg = grad_sink(gamma_t); !gg.empty()) {
          for (std::size_t c = 0; c < C; ++c) gg[c] += sum_gx[c];
        }
        if (auto gb = grad_sink(beta_t); !gb.empty()) {
          for (std::size_t c = 0; c < C; ++c) gb[c] += sum_g[c];
        }
        auto gx = grad_sink(input);
        if (gx.empty()) return;
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (b * C + c) * HW;
            const T k = gamma[c] * inv_std[c];
            if (training) {
              const T mg = sum_g[c] / count;
              const T mgx = sum_gx[c] / count;
              for (std::size_t i = 0; i < HW; ++i) gx[off + i] += k * (g[off + i] - mg - xhat[off + i] * mgx);
            } else {
              for (std::size_t i = 0; i < HW; ++i) gx[off + i] += k * g[off + i];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// shape plumbing

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, const Shape& shape) {
  if (shape_numel(shape) != input.numel()) {
    throw ShapeError("cannot reshape " + shape_to_string(input.shape()) + " to " + shape_to_string(shape));
  }
  const auto x = input.data();
  return Tensor<T>::make_result(shape, Buffer<T>(x.begin(), x.end()), "reshape", {input},
                                [input](std::span<const T> g) {
                                  auto gx = grad_sink(input);
                                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                                });
}

template <typename T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat0 of zero tensors");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  Buffer<T> out;
  for (const auto& p : parts) {
    Shape pt(p.shape().begin() + 1, p.shape().end());
    if (pt != tail) {
      throw ShapeError("concat0 mismatch: " + shape_to_string(parts[0].shape()) + " vs " +
                       shape_to_string(p.shape()));
    }
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape shape = parts[0].shape();
  shape[0] = rows;
  return Tensor<T>::make_result(shape, std::move(out), "concat0", parts, [parts](std::span<const T> g) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      if (auto gp = grad_sink(p); !gp.empty()) {
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
      }
      off += p.numel();
    }
  });
}

template <typename T>
Tensor<T> slice1(const Tensor<T>& input, std::size_t begin, std::size_t count) {
  if (input.rank() < 2 || begin + count > input.dim(1) || count == 0) {
    throw ShapeError("slice1 [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + shape_to_string(input.shape()));
  }
  const std::size_t outer = input.dim(0), width = input.dim(1);
  const std::size_t inner = input.numel() / (outer * width);
  Shape shape = input.shape();
  shape[1] = count;
  Buffer<T> out(outer * count * inner);
  const auto x = input.data();
  for (std::size_t o = 0; o < outer; ++o) {
    const T* src = x.data() + (o * width + begin) * inner;
    std::copy(src, src + count * inner, out.data() + o * count * inner);
  }
  return Tensor<T>::make_result(shape, std::move(out), "slice1", {input},
                                [input, outer, width, inner, begin, count](std::span<const T> g) {
                                  auto gx = grad_sink(input);
                                  for (std::size_t o = 0; o < outer; ++o) {
                                    T* dst = gx.data() + (o * width + begin) * inner;
                                    const T* src = g.data() + o * count * inner;
                                    for (std::size_t i = 0; i < count * inner; ++i) dst[i] += src[i];
                                  }
                                });
}

#define GRUCNN_INSTANTIATE_OPS(T)                                                               \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> max_pool_2x2(const Tensor<T>&);                                            \
  template Tensor<T> elementwise(ElementwiseOp, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                    \
  template Tensor<T> dense(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> softmax(const Tensor<T>&);                                                 \
  template SoftmaxCrossEntropy<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>); \
  template Tensor<T> dropout(const Tensor<T>&, double, bool, std::mt19937_64&);                 \
  template struct BatchNormState<T>;                                                            \
  template Tensor<T> batch_norm(const Tensor<T>&, BatchNormState<T>&, bool);                    \
  template Tensor<T> reshape(const Tensor<T>&, const Shape&);                                   \
  template Tensor<T> concat0(const std::vector<Tensor<T>>&);                                    \
  template Tensor<T> slice1(const Tensor<T>&, std::size_t, std::size_t);

GRUCNN_INSTANTIATE_OPS(float)
GRUCNN_INSTANTIATE_OPS(double)

}  // namespace grucnn
