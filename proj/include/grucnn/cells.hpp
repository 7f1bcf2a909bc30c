#pragma once

#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "grucnn/tensor.hpp"

namespace grucnn {

enum class CellKind { FeedforwardConv, GruConv, LstmConv, ElmanConv, RgConv };

std::string_view to_string(CellKind kind);
CellKind cell_kind_from_string(std::string_view name);

/// Recurrent state of one layer. `cell` is only used by LstmConv and RgConv.
template <typename T>
struct CellState {
  Tensor<T> hidden;
  Tensor<T> cell;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], tracked.
template <typename T>
Tensor<T> fan_in_uniform(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng);

// Every kernel below is [out_ch, in_ch, 3, 3]; recurrent kernels map out_ch -> out_ch.
// Biases are [out_ch] and start at zero, so a freshly built cell evaluates the
// bias-free equations exactly.

template <typename T>
struct GruConvParams {
  Tensor<T> w_zh, w_zx, w_rh, w_rx, w_hh, w_hx;
  Tensor<T> b_z, b_r, b_h;

  static GruConvParams init(std::size_t in_ch, std::size_t out_ch, std::mt19937_64& rng);
  static GruConvParams zeros(std::size_t in_ch, std::size_t out_ch);
  std::vector<NamedTensor<T>> named() const;
};

/// Peephole-free convolutional LSTM with input (i), forget (f), output (o)
/// gates and candidate (g).
template <typename T>
struct LstmConvParams {
  Tensor<T> w_ix, w_ih, w_fx, w_fh, w_ox, w_oh, w_gx, w_gh;
  Tensor<T> b_i, b_f, b_o, b_g;

  static LstmConvParams init(std::size_t in_ch, std::size_t out_ch, std::mt19937_64& rng);
  static LstmConvParams zeros(std::size_t in_ch, std::size_t out_ch);
  std::vector<NamedTensor<T>> named() const;
};

/// h_t = sigmoid(W_h * h + b_h) + W_x * x + b_x
template <typename T>
struct ElmanConvParams {
  Tensor<T> w_h, w_x;
  Tensor<T> b_h, b_x;

  static ElmanConvParams init(std::size_t in_ch, std::size_t out_ch, std::mt19937_64& rng);
  static ElmanConvParams zeros(std::size_t in_ch, std::size_t out_ch);
  std::vector<NamedTensor<T>> named() const;
};

/// Recurrent gated cell with two coupled states:
///   h_t = (1 - s(W_ch*c)) o (W_xh*x) + (1 - s(W_hh*h)) o (W_h*h)
///   c_t = (1 - s(W_hc*h)) o (W_xc*x) + (1 - s(W_cc*c)) o (W_c*c)
/// Gate biases sit inside each sigmoid; b_xh / b_xc are added to the input drives.
template <typename T>
struct RgConvParams {
  Tensor<T> w_ch, w_xh, w_hh, w_h, w_hc, w_xc, w_cc, w_c;
  Tensor<T> b_ch, b_hh, b_hc, b_cc, b_xh, b_xc;

  static RgConvParams init(std::size_t in_ch, std::size_t out_ch, std::mt19937_64& rng);
  static RgConvParams zeros(std::size_t in_ch, std::size_t out_ch);
  std::vector<NamedTensor<T>> named() const;
};

template <typename T>
struct FeedforwardConvParams {
  Tensor<T> w, b;

  static FeedforwardConvParams init(std::size_t in_ch, std::size_t out_ch, std::mt19937_64& rng);
  std::vector<NamedTensor<T>> named() const;
};

/// GRU over flat vectors: the same gating with dense maps instead of convolutions.
/// Input weights are [m, n], recurrent weights [m, m].
template <typename T>
struct GruDenseParams {
  Tensor<T> w_zh, w_zx, w_rh, w_rx, w_hh, w_hx;
  Tensor<T> b_z, b_r, b_h;

  static GruDenseParams init(std::size_t n_in, std::size_t m_out, std::mt19937_64& rng);
  static GruDenseParams zeros(std::size_t n_in, std::size_t m_out);
  std::vector<NamedTensor<T>> named() const;
};

// ---------------------------------------------------------------------------
// Single time steps. Inputs are [batch, ch, H, W] (dense: [batch, n]).

template <typename T>
Tensor<T> gru_conv_step(const Tensor<T>& x, const Tensor<T>& h_prev, const GruConvParams<T>& p);

template <typename T>
CellState<T> lstm_conv_step(const Tensor<T>& x, const CellState<T>& prev, const LstmConvParams<T>& p);

template <typename T>
Tensor<T> elman_conv_step(const Tensor<T>& x, const Tensor<T>& h_prev, const ElmanConvParams<T>& p);

template <typename T>
CellState<T> rg_conv_step(const Tensor<T>& x, const CellState<T>& prev, const RgConvParams<T>& p);

/// relu(conv2d(x)); stateless.
template <typename T>
Tensor<T> feedforward_conv_step(const Tensor<T>& x, const FeedforwardConvParams<T>& p);

template <typename T>
Tensor<T> gru_dense_step(const Tensor<T>& x, const Tensor<T>& h_prev, const GruDenseParams<T>& p);

// ---------------------------------------------------------------------------

/// Common step interface over all convolutional cell kinds:
/// (input frame, state) -> (output, new state).
template <typename T>
class ConvCell {
 public:
  virtual ~ConvCell() = default;

  virtual CellKind kind() const = 0;
  std::size_t in_channels() const { return in_ch_; }
  std::size_t out_channels() const { return out_ch_; }
  bool recurrent() const { return kind() != CellKind::FeedforwardConv; }

  /// Zero hidden (and cell) state for the given batch and spatial size.
  CellState<T> initial_state(std::size_t batch, std::size_t height, std::size_t width) const;

  /// Advances `state` in place and returns the layer output for this frame.
  virtual Tensor<T> step(const Tensor<T>& x, CellState<T>& state) const = 0;

  virtual std::vector<NamedTensor<T>> parameters() const = 0;

  static std::unique_ptr<ConvCell> create(CellKind kind, std::size_t in_ch, std::size_t out_ch,
                                          std::mt19937_64& rng);

 protected:
  ConvCell(std::size_t in_ch, std::size_t out_ch) : in_ch_(in_ch), out_ch_(out_ch) {}

 private:
  std::size_t in_ch_;
  std::size_t out_ch_;
};

}  // namespace grucnn
