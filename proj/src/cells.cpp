#include "grucnn/cells.hpp"

#include <cmath>
#include <stdexcept>

#include "grucnn/ops.hpp"

namespace grucnn {

std::string_view to_string(CellKind kind) {
  switch (kind) {
    case CellKind::FeedforwardConv: return "feedforward_conv";
    case CellKind::GruConv: return "gru_conv";
    case CellKind::LstmConv: return "lstm_conv";
    case CellKind::ElmanConv: return "elman_conv";
    case CellKind::RgConv: return "rg_conv";
  }
  return "unknown";
}

CellKind cell_kind_from_string(std::string_view name) {
  for (auto k : {CellKind::FeedforwardConv, CellKind::GruConv, CellKind::LstmConv, CellKind::ElmanConv,
                 CellKind::RgConv}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown cell kind: " + std::string(name));
}

template <typename T>
Tensor<T> fan_in_uniform(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double limit = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Buffer<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>::from_buffer(shape, std::move(values), true);
}

namespace {

template <typename T>
Tensor<T> kernel(std::size_t out_ch, std::size_t in_ch, std::mt19937_64& rng) {
  return fan_in_uniform<T>({out_ch, in_ch, 3, 3}, in_ch * 9, rng);
}

template <typename T>
Tensor<T> zero_kernel(std::size_t out_ch, std::size_t in_ch) {
  return Tensor<T>::zeros({out_ch, in_ch, 3, 3}, true);
}

template <typename T>
Tensor<T> zero_bias(std::size_t ch) {
  return Tensor<T>::zeros({ch}, true);
}

template <typename T>
void check_step_shapes(const Tensor<T>& x, const Tensor<T>& h, const char* cell) {
  const auto& xs = x.shape();
  const auto& hs = h.shape();
  if (xs.size() != hs.size() || xs[0] != hs[0] ||
      (xs.size() == 4 && (xs[2] != hs[2] || xs[3] != hs[3]))) {
    throw ShapeError(std::string(cell) + ": input " + shape_to_string(xs) + " and state " +
                     shape_to_string(hs) + " disagree on batch or spatial extents");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// parameter sets

template <typename T>
GruConvParams<T> GruConvParams<T>::init(std::size_t in_ch, std::size_t out_ch, std::mt19937_64& rng) {
  GruConvParams p;
  p.w_zh = kernel<T>(out_ch, out_ch, rng);
  p.w_zx = kernel<T>(out_ch, in_ch, rng);
  p.w_rh = kernel<T>(out_ch, out_ch, rng);
  p.w_rx = kernel<T>(out_ch, in_ch, rng);
  p.w_hh = kernel<T>(out_ch, out_ch, rng);
  p.w_hx = kernel<T>(out_ch, in_ch, rng);
  p.b_z = zero_bias<T>(out_ch);
  p.b_r = zero_bias<T>(out_ch);
  p.b_h = zero_bias<T>(out_ch);
  return p;
}

template <typename T>
GruConvParams<T> GruConvParams<T>::zeros(std::size_t in_ch, std::size_t out_ch) {
  GruConvParams p;
  p.w_zh = zero_kernel<T>(out_ch, out_ch);
  p.w_zx = zero_kernel<T>(out_ch, in_ch);
  p.w_rh = zero_kernel<T>(out_ch, out_ch);
  p.w_rx = zero_kernel<T>(out_ch, in_ch);
  p.w_hh = zero_kernel<T>(out_ch, out_ch);
  p.w_hx = zero_kernel<T>(out_ch, in_ch);
  p.b_z = zero_bias<T>(out_ch);
  p.b_r = zero_bias<T>(out_ch);
  p.b_h = zero_bias<T>(out_ch);
  return p;
}

template <typename T>
std::vector<NamedTensor<T>> GruConvParams<T>::named() const {
  return {{"w_zh", w_zh}, {"w_zx", w_zx}, {"w_rh", w_rh}, {"w_rx", w_rx}, {"w_hh", w_hh},
          {"w_hx", w_hx}, {"b_z", b_z},   {"b_r", b_r},   {"b_h", b_h}};
}

template <typename T>
LstmConvParams<T> LstmConvParams<T>::init(std::size_t in_ch, std::size_t out_ch, std::mt19937_64& rng) {
  LstmConvParams p;
  p.w_ix = kernel<T>(out_ch, in_ch, rng);
  p.w_ih = kernel<T>(out_ch, out_ch, rng);
  p.w_fx = kernel<T>(out_ch, in_ch, rng);
  p.w_fh = kernel<T>(out_ch, out_ch, rng);
  p.w_ox = kernel<T>(out_ch, in_ch, rng);
  p.w_oh = kernel<T>(out_ch, out_ch, rng);
  p.w_gx = kernel<T>(out_ch, in_ch, rng);
  p.w_gh = kernel<T>(out_ch, out_ch, rng);
  p.b_i = zero_bias<T>(out_ch);
  p.b_f = zero_bias<T>(out_ch);
  p.b_o = zero_bias<T>(out_ch);
  p.b_g = zero_bias<T>(out_ch);
  return p;
}

template <typename T>
LstmConvParams<T> LstmConvParams<T>::zeros(std::size_t in_ch, std::size_t out_ch) {
  LstmConvParams p;
  p.w_ix = zero_kernel<T>(out_ch, in_ch);
  p.w_ih = zero_kernel<T>(out_ch, out_ch);
  p.w_fx = zero_kernel<T>(out_ch, in_ch);
  p.w_fh = zero_kernel<T>(out_ch, out_ch);
  p.w_ox = zero_kernel<T>(out_ch, in_ch);
  p.w_oh = zero_kernel<T>(out_ch, out_ch);
  p.w_gx = zero_kernel<T>(out_ch, in_ch);
  p.w_gh = zero_kernel<T>(out_ch, out_ch);
  p.b_i = zero_bias<T>(out_ch);
  p.b_f = zero_bias<T>(out_ch);
  p.b_o = zero_bias<T>(out_ch);
  p.b_g = zero_bias<T>(out_ch);
  return p;
}

template <typename T>
std::vector<NamedTensor<T>> LstmConvParams<T>::named() const {
  return {{"w_ix", w_ix}, {"w_ih", w_ih}, {"w_fx", w_fx}, {"w_fh", w_fh}, {"w_ox", w_ox}, {"w_oh", w_oh},
          {"w_gx", w_gx}, {"w_gh", w_gh}, {"b_i", b_i},   {"b_f", b_f},   {"b_o", b_o},   {"b_g", b_g}};
}

template <typename T>
ElmanConvParams<T> ElmanConvParams<T>::init(std::size_t in_ch, std::size_t out_ch, std::mt19937_64& rng) {
  ElmanConvParams p;
  p.w_h = kernel<T>(out_ch, out_ch, rng);
  p.w_x = kernel<T>(out_ch, in_ch, rng);
  p.b_h = zero_bias<T>(out_ch);
  p.b_x = zero_bias<T>(out_ch);
  return p;
}

template <typename T>
ElmanConvParams<T> ElmanConvParams<T>::zeros(std::size_t in_ch, std::size_t out_ch) {
  ElmanConvParams p;
  p.w_h = zero_kernel<T>(out_ch, out_ch);
  p.w_x = zero_kernel<T>(out_ch, in_ch);
  p.b_h = zero_bias<T>(out_ch);
  p.b_x = zero_bias<T>(out_ch);
  return p;
}

template <typename T>
std::vector<NamedTensor<T>> ElmanConvParams<T>::named() const {
  return {{"w_h", w_h}, {"w_x", w_x}, {"b_h", b_h}, {"b_x", b_x}};
}

template <typename T>
RgConvParams<T> RgConvParams<T>::init(std::size_t in_ch, std::size_t out_ch, std::mt19937_64& rng) {
  RgConvParams p;
  p.w_ch = kernel<T>(out_ch, out_ch, rng);
  p.w_xh = kernel<T>(out_ch, in_ch, rng);
  p.w_hh = kernel<T>(out_ch, out_ch, rng);
  p.w_h = kernel<T>(out_ch, out_ch, rng);
  p.w_hc = kernel<T>(out_ch, out_ch, rng);
  p.w_xc = kernel<T>(out_ch, in_ch, rng);
  p.w_cc = kernel<T>(out_ch, out_ch, rng);
  p.w_c = kernel<T>(out_ch, out_ch, rng);
  for (auto* b : {&p.b_ch, &p.b_hh, &p.b_hc, &p.b_cc, &p.b_xh, &p.b_xc}) *b = zero_bias<T>(out_ch);
  return p;
}

template <typename T>
RgConvParams<T> RgConvParams<T>::zeros(std::size_t in_ch, std::size_t out_ch) {
  RgConvParams p;
  p.w_ch = zero_kernel<T>(out_ch, out_ch);
  p.w_xh = zero_kernel<T>(out_ch, in_ch);
  p.w_hh = zero_kernel<T>(out_ch, out_ch);
  p.w_h = zero_kernel<T>(out_ch, out_ch);
  p.w_hc = zero_kernel<T>(out_ch, out_ch);
  p.w_xc = zero_kernel<T>(out_ch, in_ch);
  p.w_cc = zero_kernel<T>(out_ch, out_ch);
  p.w_c = zero_kernel<T>(out_ch, out_ch);
  for (auto* b : {&p.b_ch, &p.b_hh, &p.b_hc, &p.b_cc, &p.b_xh, &p.b_xc}) *b = zero_bias<T>(out_ch);
  return p;
}

template <typename T>
std::vector<NamedTensor<T>> RgConvParams<T>::named() const {
  return {{"w_ch", w_ch}, {"w_xh", w_xh}, {"w_hh", w_hh}, {"w_h", w_h},   {"w_hc", w_hc},
          {"w_xc", w_xc}, {"w_cc", w_cc}, {"w_c", w_c},   {"b_ch", b_ch}, {"b_hh", b_hh},
          {"b_hc", b_hc}, {"b_cc", b_cc}, {"b_xh", b_xh}, {"b_xc", b_xc}};
}

template <typename T>
FeedforwardConvParams<T> FeedforwardConvParams<T>::init(std::size_t in_ch, std::size_t out_ch,
                                                        std::mt19937_64& rng) {
  return {kernel<T>(out_ch, in_ch, rng), zero_bias<T>(out_ch)};
}

template <typename T>
std::vector<NamedTensor<T>> FeedforwardConvParams<T>::named() const {
  return {{"w", w}, {"b", b}};
}

template <typename T>
GruDenseParams<T> GruDenseParams<T>::init(std::size_t n_in, std::size_t m_out, std::mt19937_64& rng) {
  GruDenseParams p;
  p.w_zh = fan_in_uniform<T>({m_out, m_out}, m_out, rng);
  p.w_zx = fan_in_uniform<T>({m_out, n_in}, n_in, rng);
  p.w_rh = fan_in_uniform<T>({m_out, m_out}, m_out, rng);
  p.w_rx = fan_in_uniform<T>({m_out, n_in}, n_in, rng);
  p.w_hh = fan_in_uniform<T>({m_out, m_out}, m_out, rng);
  p.w_hx = fan_in_uniform<T>({m_out, n_in}, n_in, rng);
  p.b_z = zero_bias<T>(m_out);
  p.b_r = zero_bias<T>(m_out);
  p.b_h = zero_bias<T>(m_out);
  return p;
}

template <typename T>
GruDenseParams<T> GruDenseParams<T>::zeros(std::size_t n_in, std::size_t m_out) {
  GruDenseParams p;
  p.w_zh = Tensor<T>::zeros({m_out, m_out}, true);
  p.w_zx = Tensor<T>::zeros({m_out, n_in}, true);
  p.w_rh = Tensor<T>::zeros({m_out, m_out}, true);
  p.w_rx = Tensor<T>::zeros({m_out, n_in}, true);
  p.w_hh = Tensor<T>::zeros({m_out, m_out}, true);
  p.w_hx = Tensor<T>::zeros({m_out, n_in}, true);
  p.b_z = zero_bias<T>(m_out);
  p.b_r = zero_bias<T>(m_out);
  p.b_h = zero_bias<T>(m_out);
  return p;
}

template <typename T>
std::vector<NamedTensor<T>> GruDenseParams<T>::named() const {
  return {{"w_zh", w_zh}, {"w_zx", w_zx}, {"w_rh", w_rh}, {"w_rx", w_rx}, {"w_hh", w_hh},
          {"w_hx", w_hx}, {"b_z", b_z},   {"b_r", b_r},   {"b_h", b_h}};
}

// ---------------------------------------------------------------------------
// steps
//
// Gate convolutions that share an operand are fused into one convolution over
// stacked kernels and split afterwards.

template <typename T>
Tensor<T> gru_conv_step(const Tensor<T>& x, const Tensor<T>& h_prev, const GruConvParams<T>& p) {
  check_step_shapes(x, h_prev, "gru_conv_step");
  const std::size_t C = p.w_zh.dim(0);
  auto from_x = conv2d(x, concat0<T>({p.w_zx, p.w_rx, p.w_hx}), concat0<T>({p.b_z, p.b_r, p.b_h}));
  auto from_h = conv2d(h_prev, concat0<T>({p.w_zh, p.w_rh}));
  auto z = sigmoid(add(slice1(from_h, 0, C), slice1(from_x, 0, C)));
  auto r = sigmoid(add(slice1(from_h, C, C), slice1(from_x, C, C)));
  auto candidate = tanh(add(conv2d(hadamard(r, h_prev), p.w_hh), slice1(from_x, 2 * C, C)));
  return add(hadamard(z, h_prev), hadamard(one_minus(z), candidate));
}

template <typename T>
CellState<T> lstm_conv_step(const Tensor<T>& x, const CellState<T>& prev, const LstmConvParams<T>& p) {
  check_step_shapes(x, prev.hidden, "lstm_conv_step");
  const std::size_t C = p.w_ih.dim(0);
  auto from_x = conv2d(x, concat0<T>({p.w_ix, p.w_fx, p.w_ox, p.w_gx}), concat0<T>({p.b_i, p.b_f, p.b_o, p.b_g}));
  auto from_h = conv2d(prev.hidden, concat0<T>({p.w_ih, p.w_fh, p.w_oh, p.w_gh}));
  auto pre = add(from_x, from_h);
  auto i = sigmoid(slice1(pre, 0, C));
  auto f = sigmoid(slice1(pre, C, C));
  auto o = sigmoid(slice1(pre, 2 * C, C));
  auto g = tanh(slice1(pre, 3 * C, C));
  auto c = add(hadamard(f, prev.cell), hadamard(i, g));
  return {hadamard(o, tanh(c)), c};
}

template <typename T>
Tensor<T> elman_conv_step(const Tensor<T>& x, const Tensor<T>& h_prev, const ElmanConvParams<T>& p) {
  check_step_shapes(x, h_prev, "elman_conv_step");
  return add(sigmoid(conv2d(h_prev, p.w_h, p.b_h)), conv2d(x, p.w_x, p.b_x));
}

template <typename T>
CellState<T> rg_conv_step(const Tensor<T>& x, const CellState<T>& prev, const RgConvParams<T>& p) {
  check_step_shapes(x, prev.hidden, "rg_conv_step");
  const std::size_t C = p.w_h.dim(0);
  const auto no_bias = Tensor<T>::zeros({C});
  auto from_x = conv2d(x, concat0<T>({p.w_xh, p.w_xc}), concat0<T>({p.b_xh, p.b_xc}));
  auto from_h = conv2d(prev.hidden, concat0<T>({p.w_hh, p.w_h, p.w_hc}), concat0<T>({p.b_hh, no_bias, p.b_hc}));
  auto from_c = conv2d(prev.cell, concat0<T>({p.w_ch, p.w_cc, p.w_c}), concat0<T>({p.b_ch, p.b_cc, no_bias}));
  auto h = add(hadamard(one_minus(sigmoid(slice1(from_c, 0, C))), slice1(from_x, 0, C)),
               hadamard(one_minus(sigmoid(slice1(from_h, 0, C))), slice1(from_h, C, C)));
  auto c = add(hadamard(one_minus(sigmoid(slice1(from_h, 2 * C, C))), slice1(from_x, C, C)),
               hadamard(one_minus(sigmoid(slice1(from_c, C, C))), slice1(from_c, 2 * C, C)));
  return {h, c};
}

template <typename T>
Tensor<T> feedforward_conv_step(const Tensor<T>& x, const FeedforwardConvParams<T>& p) {
  return relu(conv2d(x, p.w, p.b));
}

template <typename T>
Tensor<T> gru_dense_step(const Tensor<T>& x, const Tensor<T>& h_prev, const GruDenseParams<T>& p) {
  check_step_shapes(x, h_prev, "gru_dense_step");
  const std::size_t M = p.w_zh.dim(0);
  auto from_x = dense(x, concat0<T>({p.w_zx, p.w_rx, p.w_hx}), concat0<T>({p.b_z, p.b_r, p.b_h}));
  auto from_h = dense(h_prev, concat0<T>({p.w_zh, p.w_rh}));
  auto z = sigmoid(add(slice1(from_h, 0, M), slice1(from_x, 0, M)));
  auto r = sigmoid(add(slice1(from_h, M, M), slice1(from_x, M, M)));
  auto candidate = tanh(add(dense(hadamard(r, h_prev), p.w_hh), slice1(from_x, 2 * M, M)));
  return add(hadamard(z, h_prev), hadamard(one_minus(z), candidate));
}

// ---------------------------------------------------------------------------
// ConvCell implementations

template <typename T>
CellState<T> ConvCell<T>::initial_state(std::size_t batch, std::size_t height, std::size_t width) const {
  CellState<T> s;
  if (!recurrent()) return s;
  s.hidden = Tensor<T>::zeros({batch, out_ch_, height, width});
  if (kind() == CellKind::LstmConv || kind() == CellKind::RgConv) {
    s.cell = Tensor<T>::zeros({batch, out_ch_, height, width});
  }
  return s;
}

namespace {

template <typename T>
class FeedforwardCell final : public ConvCell<T> {
 public:
  FeedforwardCell(std::size_t in_ch, std::size_t out_ch, std::mt19937_64& rng)
      : ConvCell<T>(in_ch, out_ch), p_(FeedforwardConvParams<T>::init(in_ch, out_ch, rng)) {}
  CellKind kind() const override { return CellKind::FeedforwardConv; }
  Tensor<T> step(const Tensor<T>& x, CellState<T>&) const override { return feedforward_conv_step(x, p_); }
  std::vector<NamedTensor<T>> parameters() const override { return p_.named(); }

 private:
  FeedforwardConvParams<T> p_;
};

template <typename T>
class GruCell final : public ConvCell<T> {
 public:
  GruCell(std::size_t in_ch, std::size_t out_ch, std::mt19937_64& rng)
      : ConvCell<T>(in_ch, out_ch), p_(GruConvParams<T>::init(in_ch, out_ch, rng)) {}
  CellKind kind() const override { return CellKind::GruConv; }
  Tensor<T> step(const Tensor<T>& x, CellState<T>& s) const override {
    s.hidden = gru_conv_step(x, s.hidden, p_);
    return s.hidden;
  }
  std::vector<NamedTensor<T>> parameters() const override { return p_.named(); }

 private:
  GruConvParams<T> p_;
};

template <typename T>
class LstmCell final : public ConvCell<T> {
 public:
  LstmCell(std::size_t in_ch, std::size_t out_ch, std::mt19937_64& rng)
      : ConvCell<T>(in_ch, out_ch), p_(LstmConvParams<T>::init(in_ch, out_ch, rng)) {}
  CellKind kind() const override { return CellKind::LstmConv; }
  Tensor<T> step(const Tensor<T>& x, CellState<T>& s) const override {
    s = lstm_conv_step(x, s, p_);
    return s.hidden;
  }
  std::vector<NamedTensor<T>> parameters() const override { return p_.named(); }

 private:
  LstmConvParams<T> p_;
};

template <typename T>
class ElmanCell final : public ConvCell<T> {
 public:
  ElmanCell(std::size_t in_ch, std::size_t out_ch, std::mt19937_64& rng)
      : ConvCell<T>(in_ch, out_ch), p_(ElmanConvParams<T>::init(in_ch, out_ch, rng)) {}
  CellKind kind() const override { return CellKind::ElmanConv; }
  Tensor<T> step(const Tensor<T>& x, CellState<T>& s) const override {
    s.hidden = elman_conv_step(x, s.hidden, p_);
    return s.hidden;
  }
  std::vector<NamedTensor<T>> parameters() const override { return p_.named(); }

 private:
  ElmanConvParams<T> p_;
};

template <typename T>
class RgCell final : public ConvCell<T> {
 public:
  RgCell(std::size_t in_ch, std::size_t out_ch, std::mt19937_64& rng)
      : ConvCell<T>(in_ch, out_ch), p_(RgConvParams<T>::init(in_ch, out_ch, rng)) {}
  CellKind kind() const override { return CellKind::RgConv; }
  Tensor<T> step(const Tensor<T>& x, CellState<T>& s) const override {
    s = rg_conv_step(x, s, p_);
    return s.hidden;
  }
  std::vector<NamedTensor<T>> parameters() const override { return p_.named(); }

 private:
  RgConvParams<T> p_;
};

}  // namespace

template <typename T>
std::unique_ptr<ConvCell<T>> ConvCell<T>::create(CellKind kind, std::size_t in_ch, std::size_t out_ch,
                                                 std::mt19937_64& rng) {
  switch (kind) {
    case CellKind::FeedforwardConv: return std::make_unique<FeedforwardCell<T>>(in_ch, out_ch, rng);
    case CellKind::GruConv: return std::make_unique<GruCell<T>>(in_ch, out_ch, rng);
    case CellKind::LstmConv: return std::make_unique<LstmCell<T>>(in_ch, out_ch, rng);
    case CellKind::ElmanConv: return std::make_unique<ElmanCell<T>>(in_ch, out_ch, rng);
    case CellKind::RgConv: return std::make_unique<RgCell<T>>(in_ch, out_ch, rng);
  }
  throw std::invalid_argument("unknown cell kind");
}

#define GRUCNN_INSTANTIATE_CELLS(T)                                                                  \
  template Tensor<T> fan_in_uniform(const Shape&, std::size_t, std::mt19937_64&);                    \
  template struct GruConvParams<T>;                                                                  \
  template struct LstmConvParams<T>;                                                                 \
  template struct ElmanConvParams<T>;                                                                \
  template struct RgConvParams<T>;                                                                   \
  template struct FeedforwardConvParams<T>;                                                          \
  template struct GruDenseParams<T>;                                                                 \
  template Tensor<T> gru_conv_step(const Tensor<T>&, const Tensor<T>&, const GruConvParams<T>&);     \
  template CellState<T> lstm_conv_step(const Tensor<T>&, const CellState<T>&, const LstmConvParams<T>&); \
  template Tensor<T> elman_conv_step(const Tensor<T>&, const Tensor<T>&, const ElmanConvParams<T>&); \
  template CellState<T> rg_conv_step(const Tensor<T>&, const CellState<T>&, const RgConvParams<T>&); \
  template Tensor<T> feedforward_conv_step(const Tensor<T>&, const FeedforwardConvParams<T>&);       \
  template Tensor<T> gru_dense_step(const Tensor<T>&, const Tensor<T>&, const GruDenseParams<T>&);   \
  template class ConvCell<T>;

GRUCNN_INSTANTIATE_CELLS(float)
GRUCNN_INSTANTIATE_CELLS(double)

}  // namespace grucnn
