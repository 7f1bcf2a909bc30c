#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "grucnn/ops.hpp"
#include "grucnn/tensor.hpp"
#include "grad_cases.hpp"
#include "test_util.hpp"

using namespace grucnn;
using grucnn::testing::check_gradients;
using grucnn::testing::random_tensor;
using grucnn::testing::weighted_sum;
using TD = Tensor<double>;

namespace {

// Direct 3x3 same-padded cross-correlation.
std::vector<double> conv_oracle(const TD& x, const TD& k, const TD& b) {
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), O = k.dim(0);
  std::vector<double> out(N * O * H * W);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          double s = b.defined() ? b.at(o) : 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (int di = -1; di <= 1; ++di)
              for (int dj = -1; dj <= 1; ++dj) {
                const long ii = static_cast<long>(i) + di, jj = static_cast<long>(j) + dj;
                if (ii < 0 || jj < 0 || ii >= static_cast<long>(H) || jj >= static_cast<long>(W)) continue;
                s += x.at(((n * C + c) * H + ii) * W + jj) * k.at(((o * C + c) * 3 + (di + 1)) * 3 + (dj + 1));
              }
          out[((n * O + o) * H + i) * W + j] = s;
        }
  return out;
}

}  // namespace

TEST(Tensor, ShapeInvariants) {
  auto t = TD::zeros({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_FALSE(t.requires_grad());
  EXPECT_THROW(TD::from_vector({2, 2}, {1, 2, 3}), ShapeError);
}

TEST(Tensor, UntrackedTensorNeverGetsGrad) {
  auto a = TD::from_vector({2}, {1, 2});
  auto b = TD::from_vector({2}, {3, 4}, true);
  sum(hadamard(a, b)).backward();
  EXPECT_FALSE(a.has_grad());
  ASSERT_TRUE(b.has_grad());
  EXPECT_DOUBLE_EQ(b.grad()[0], 1);
  EXPECT_DOUBLE_EQ(b.grad()[1], 2);
}

TEST(Conv2d, TwoByTwoAllOnesKernel) {
  auto x = TD::from_vector({1, 1, 2, 2}, {1, 2, 3, 4});
  auto k = TD::full({1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, k, TD::zeros({1}));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 10.0);
}

TEST(Conv2d, IdentityKernel) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({2, 3, 5, 4}, rng, -1, 1, false);
  std::vector<double> kv(3 * 3 * 9, 0.0);
  for (std::size_t c = 0; c < 3; ++c) kv[(c * 3 + c) * 9 + 4] = 1.0;
  auto y = conv2d(x, TD::from_vector({3, 3, 3, 3}, kv));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.at(i), x.at(i));
}

TEST(Conv2d, ZeroInputGivesBias) {
  std::mt19937_64 rng(2);
  auto k = random_tensor({4, 2, 3, 3}, rng, -1, 1, false);
  auto b = TD::from_vector({4}, {0.5, -1, 2, 3});
  auto y = conv2d(TD::zeros({1, 2, 3, 3}), k, b);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(y.at(c * 9 + i), b.at(c));
}

TEST(Conv2d, MatchesDirectOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    std::uniform_int_distribution<std::size_t> d(1, 5);
    const auto N = d(rng), C = d(rng), O = d(rng), H = d(rng), W = d(rng);
    auto x = random_tensor({N, C, H, W}, rng, -1, 1, false);
    auto k = random_tensor({O, C, 3, 3}, rng, -1, 1, false);
    auto b = random_tensor({O}, rng, -1, 1, false);
    const auto ref = conv_oracle(x, k, b);
    auto y = conv2d(x, k, b);
    ASSERT_EQ(y.shape(), (Shape{N, O, H, W}));
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.at(i), ref[i], 1e-12);
  }
}

TEST(Conv2d, Linearity) {
  std::mt19937_64 rng(4);
  auto x = random_tensor({2, 3, 6, 6}, rng, -1, 1, false);
  auto z = random_tensor({2, 3, 6, 6}, rng, -1, 1, false);
  auto k = random_tensor({2, 3, 3, 3}, rng, -1, 1, false);
  const double a = 1.7, b = -0.4;
  auto lhs = conv2d(add(scale(x, a), scale(z, b)), k);
  auto rhs = add(scale(conv2d(x, k), a), scale(conv2d(z, k), b));
  for (std::size_t i = 0; i < lhs.numel(); ++i)
    EXPECT_NEAR(lhs.at(i), rhs.at(i), 1e-5 * std::max(1.0, std::abs(rhs.at(i))));
  auto k2 = random_tensor({2, 3, 3, 3}, rng, -1, 1, false);
  auto lhs_k = conv2d(x, add(scale(k, a), scale(k2, b)));
  auto rhs_k = add(scale(conv2d(x, k), a), scale(conv2d(x, k2), b));
  for (std::size_t i = 0; i < lhs_k.numel(); ++i)
    EXPECT_NEAR(lhs_k.at(i), rhs_k.at(i), 1e-5 * std::max(1.0, std::abs(rhs_k.at(i))));
}

TEST(Conv2d, ChannelMismatchNamesShapes) {
  try {
    conv2d(TD::zeros({1, 2, 4, 4}), TD::zeros({1, 3, 3, 3}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1, 2, 4, 4]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[1, 3, 3, 3]"), std::string::npos) << msg;
  }
}

TEST(MaxPool, Examples) {
  auto y = max_pool_2x2(TD::from_vector({1, 1, 2, 2}, {1, 2, 3, 4}));
  ASSERT_EQ(y.numel(), 1u);
  EXPECT_EQ(y.item(), 4.0);
  auto c = max_pool_2x2(TD::full({2, 3, 4, 6}, 2.5));
  for (double v : c.data()) EXPECT_EQ(v, 2.5);
  EXPECT_THROW(max_pool_2x2(TD::zeros({1, 1, 3, 4})), ShapeError);
}

TEST(MaxPool, BruteForceWindowScan) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({2, 2, 4, 4}, rng, -1, 1, false);
    auto y = max_pool_2x2(x);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < 2; ++i)
          for (std::size_t j = 0; j < 2; ++j) {
            double m = -1e300;
            for (std::size_t a = 0; a < 2; ++a)
              for (std::size_t b = 0; b < 2; ++b) m = std::max(m, x.at(((n * 2 + c) * 4 + 2 * i + a) * 4 + 2 * j + b));
            EXPECT_EQ(y.at(((n * 2 + c) * 2 + i) * 2 + j), m);
          }
  }
}

TEST(MaxPool, TieRoutesGradientToFirst) {
  auto x = TD::from_vector({1, 1, 2, 2}, {3, 3, 3, 3}, true);
  sum(max_pool_2x2(x)).backward();
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 0, 0, 0}));
}

TEST(Elementwise, Examples) {
  EXPECT_DOUBLE_EQ(sigmoid(TD::scalar(0)).item(), 0.5);
  EXPECT_DOUBLE_EQ(tanh(TD::scalar(0)).item(), 0.0);
  auto h = hadamard(TD::from_vector({2}, {2, 3}), TD::from_vector({2}, {4, 5}));
  EXPECT_DOUBLE_EQ(h.at(0), 8);
  EXPECT_DOUBLE_EQ(h.at(1), 15);
  EXPECT_DOUBLE_EQ(one_minus(TD::scalar(0.25)).item(), 0.75);
  EXPECT_DOUBLE_EQ(relu(TD::scalar(-2)).item(), 0.0);
  EXPECT_THROW(add(TD::zeros({2}), TD::zeros({3})), ShapeError);
}

TEST(Dense, Examples) {
  auto x = TD::from_vector({2, 2}, {2, 3, -1, 4});
  auto id = dense(x, TD::from_vector({2, 2}, {1, 0, 0, 1}), TD::zeros({2}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(id.at(i), x.at(i));
  EXPECT_DOUBLE_EQ(dense(TD::from_vector({1, 2}, {2, 3}), TD::from_vector({1, 2}, {1, 1}), TD::zeros({1})).item(), 5);
  auto zb = dense(x, TD::zeros({3, 2}), TD::from_vector({3}, {1, 2, 3}));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(zb.at(r * 3 + c), c + 1.0);
  EXPECT_THROW(dense(x, TD::zeros({3, 4})), ShapeError);
}

TEST(SoftmaxCrossEntropy, Examples) {
  const std::vector<int> t0{0};
  auto u = softmax_cross_entropy(TD::zeros({1, 10}), t0);
  for (double p : u.probs.data()) EXPECT_NEAR(p, 0.1, 1e-15);
  EXPECT_NEAR(u.loss.item(), std::log(10.0), 1e-14);

  auto big = softmax_cross_entropy(TD::from_vector({1, 2}, {1000, 0}), t0);
  EXPECT_TRUE(std::isfinite(big.loss.item()));
  EXPECT_NEAR(big.probs.at(0), 1.0, 1e-15);
  EXPECT_NEAR(big.probs.at(1), 0.0, 1e-15);

  const std::vector<int> t2{2};
  auto s = softmax_cross_entropy(TD::from_vector({1, 3}, {1, 2, 3}), t2);
  const long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  EXPECT_NEAR(s.loss.item(), static_cast<double>(-std::log(std::exp(3.0L) / z)), 1e-14);

  const std::vector<int> bad{10};
  EXPECT_THROW(softmax_cross_entropy(TD::zeros({1, 10}), bad), std::out_of_range);
}

TEST(SoftmaxCrossEntropy, RowsSumToOneAndPositive) {
  std::mt19937_64 rng(6);
  auto logits = random_tensor({16, 10}, rng, -30, 30, false);
  auto p = softmax(logits);
  for (std::size_t r = 0; r < 16; ++r) {
    double s = 0;
    for (std::size_t k = 0; k < 10; ++k) {
      EXPECT_GT(p.at(r * 10 + k), 0.0);
      s += p.at(r * 10 + k);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Dropout, Examples) {
  std::mt19937_64 rng(7);
  auto x = random_tensor({1000}, rng, 1, 2, false);
  auto eval = dropout(x, 0.5, false, rng);
  auto zero = dropout(x, 0.0, true, rng);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    EXPECT_EQ(eval.at(i), x.at(i));
    EXPECT_EQ(zero.at(i), x.at(i));
  }
  auto ones = TD::full({200000}, 1.0);
  auto d = dropout(ones, 0.25, true, rng);
  std::size_t zeros = 0;
  for (double v : d.data()) {
    if (v == 0) ++zeros;
    else EXPECT_DOUBLE_EQ(v, 1.0 / 0.75);
  }
  EXPECT_NEAR(static_cast<double>(zeros) / 200000.0, 0.25, 0.01);
  EXPECT_THROW(dropout(ones, 1.0, true, rng), std::invalid_argument);
}

TEST(BatchNorm, TrainingNormalizesPerChannel) {
  std::mt19937_64 rng(8);
  auto x = random_tensor({4, 3, 5, 5}, rng, -3, 7, false);
  auto st = BatchNormState<double>::create(3);
  st.eps = 0;
  auto y = batch_norm(x, st, true);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) m += y.at((n * 3 + c) * 25 + i);
    m /= 100;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) v += std::pow(y.at((n * 3 + c) * 25 + i) - m, 2);
    v /= 100;
    EXPECT_NEAR(m, 0, 1e-4);
    EXPECT_NEAR(v, 1, 1e-4);
  }
}

TEST(BatchNorm, EvalUsesRunningStats) {
  auto st = BatchNormState<double>::create(2);
  st.running_mean = TD::from_vector({2}, {1.0, -2.0});
  st.running_var = TD::from_vector({2}, {4.0, 0.25});
  std::mt19937_64 rng(9);
  auto x = random_tensor({3, 2, 2, 2}, rng, -1, 1, false);
  auto y = batch_norm(x, st, false);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 4; ++i) {
        const auto idx = (n * 2 + c) * 4 + i;
        EXPECT_NEAR(y.at(idx), (x.at(idx) - st.running_mean.at(c)) / std::sqrt(st.running_var.at(c) + st.eps), 1e-12);
      }
}

TEST(BatchNorm, IdenticalFramesNormalizeIdentically) {
  std::mt19937_64 rng(10);
  auto frame = random_tensor({4, 2, 3, 3}, rng, -1, 1, false);
  auto st = BatchNormState<double>::create(2);
  auto a = batch_norm(frame, st, true);
  auto b = batch_norm(frame, st, true);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.at(i), b.at(i));
}

TEST(BatchNorm, BatchOfOneInTrainingThrows) {
  auto st = BatchNormState<double>::create(1);
  EXPECT_THROW(batch_norm(TD::zeros({1, 1, 2, 2}), st, true), std::invalid_argument);
}

TEST(Backward, Examples) {
  auto x = TD::from_vector({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  auto y = TD::from_vector({2}, {1, 2}, true);
  sum(hadamard(y, y)).backward();
  EXPECT_DOUBLE_EQ(y.grad()[0], 2);
  EXPECT_DOUBLE_EQ(y.grad()[1], 4);

  // Accumulates across calls.
  sum(hadamard(y, y)).backward();
  EXPECT_DOUBLE_EQ(y.grad()[1], 8);
}

TEST(Backward, Errors) {
  auto x = TD::from_vector({2}, {1, 2}, true);
  EXPECT_THROW(hadamard(x, x).backward(), AutodiffError);
  EXPECT_THROW(TD::scalar(1.0).backward(), AutodiffError);
}

TEST(Backward, FanOutSumsContributions) {
  std::mt19937_64 rng(11);
  auto x = random_tensor({3, 4}, rng);
  auto r = check_gradients({x}, [](const auto& in) {
    auto s = sigmoid(in[0]);
    return sum(add(hadamard(s, in[0]), tanh(s)));
  });
  EXPECT_LT(r.max_error, 1e-4);
}

TEST(ComputationRecord, TopologicalAndUnique) {
  std::mt19937_64 rng(12);
  auto a = random_tensor({2, 2}, rng);
  auto b = random_tensor({2, 2}, rng);
  auto s = sigmoid(a);
  auto loss = sum(add(hadamard(s, b), s));
  const auto rec = loss.computation_record();
  std::set<std::uint64_t> produced{a.id(), b.id()};
  std::set<std::uint64_t> seen;
  for (const auto& e : rec) {
    for (auto in : e.input_ids) EXPECT_TRUE(produced.count(in)) << e.op;
    EXPECT_TRUE(seen.insert(e.output_id).second);
    produced.insert(e.output_id);
  }
  EXPECT_EQ(rec.back().output_id, loss.id());
  EXPECT_EQ(rec.size(), 4u);
}

TEST(NoGradGuard, DisablesRecording) {
  auto x = TD::from_vector({2}, {1, 2}, true);
  TD y;
  {
    NoGradGuard g;
    y = sum(x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(NoGradGuard::grad_enabled());
}

TEST(Shapes, ReshapeConcatSlice) {
  auto x = TD::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(reshape(x, {3, 2}).shape(), (Shape{3, 2}));
  EXPECT_THROW(reshape(x, {4, 2}), ShapeError);
  auto c = concat0<double>({x, x});
  EXPECT_EQ(c.shape(), (Shape{4, 3}));
  auto s = slice1(x, 1, 2);
  EXPECT_EQ(std::vector<double>(s.data().begin(), s.data().end()), (std::vector<double>{2, 3, 5, 6}));
}

// Twenty random instances per op; the acceptance runner repeats this at a
// larger scale.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, FiniteDifferences) {
  std::mt19937_64 rng(1000 + GetParam());
  for (const auto& c : grucnn::testing::op_gradient_cases(rng)) {
    auto r = check_gradients(c.inputs, c.f);
    EXPECT_LT(r.max_error, 1e-4) << c.name;
  }
}

INSTANTIATE_TEST_SUITE_P(Random, OpGradient, ::testing::Range(0, 20));
