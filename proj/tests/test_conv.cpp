#include <gtest/gtest.h>

#include <cmath>

#include "msr/conv.hpp"
#include "msr/msr_kit.hpp"
#include "test_support.hpp"

using msr::ConvFilterParams;
using msr::Prng;
using msr::Shape;
using Tensor = msr::Tensor<double>;
namespace mt = msr::testing;

namespace {

// Direct-loop cross-correlation, independent of the im2col/GEMM path.
Tensor naive_conv(const Tensor& x, const ConvFilterParams<double>& p) {
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto F = p.filters(), K = p.kernel_h(), L = p.kernel_w(), s = p.stride, pad = p.padding;
  const auto Ho = (H + 2 * pad - K) / s + 1, Wo = (W + 2 * pad - L) / s + 1;
  const auto scales = p.filter_scales();
  Tensor y({N, F, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = p.b ? (*p.b)[f] : 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t a = 0; a < K; ++a)
              for (std::size_t b = 0; b < L; ++b) {
                const long yy = static_cast<long>(i * s + a) - static_cast<long>(pad);
                const long xx = static_cast<long>(j * s + b) - static_cast<long>(pad);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                acc += scales[f] * p.V.at(f, c, a, b) * x.at(n, c, yy, xx);
              }
          y.at(n, f, i, j) = acc;
        }
  return y;
}

ConvFilterParams<double> random_conv(Prng& rng, std::size_t F, std::size_t C, std::size_t K, bool scale,
                                     bool bias, std::size_t stride = 1, std::size_t pad = 0) {
  ConvFilterParams<double> p;
  p.V = mt::random_tensor(rng, {F, C, K, K});
  if (scale) p.g = mt::random_tensor(rng, {F}, -0.5, 0.5);
  if (bias) p.b = mt::random_tensor(rng, {F});
  p.stride = stride;
  p.padding = pad;
  return p;
}

}  // namespace

TEST(Conv2d, PointwiseScalingExample) {
  ConvFilterParams<double> p;
  p.V = Tensor({1, 1, 1, 1}, 1.0);
  p.g = Tensor({1}, std::log(2.0));
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor y = msr::conv2d_forward(x, p);
  const double expect[] = {2, 4, 6, 8};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(y[i], expect[i], 1e-15);
}

TEST(Conv2d, ZeroMeanKernelRejectsConstantInput) {
  Prng rng(1);
  ConvFilterParams<double> p;
  p.V = msr::czm_project(mt::random_tensor(rng, {1, 1, 3, 3}));
  p.b = Tensor({1}, 0.0);
  Tensor x({1, 1, 6, 6}, 5.0);
  EXPECT_LE(msr::max_abs(msr::conv2d_forward(x, p)), 1e-14);
}

TEST(Conv2d, HandCrossCorrelation) {
  ConvFilterParams<double> p;
  p.V = Tensor({1, 1, 2, 2}, {1, 0, 0, 1});
  p.g = Tensor({1}, 0.0);
  Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  EXPECT_EQ(msr::conv2d_forward(x, p), Tensor({1, 1, 2, 2}, {6, 8, 12, 14}));
}

TEST(Conv2d, MatchesDirectLoops) {
  Prng rng(2);
  int compared = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t K = 1 + rng.uniform_index(3), s = 1 + rng.uniform_index(2), pad = rng.uniform_index(2);
    auto p = random_conv(rng, 1 + rng.uniform_index(4), 1 + rng.uniform_index(3), K, rng.bernoulli(0.5),
                         rng.bernoulli(0.5), s, pad);
    const std::size_t H = K + s * (1 + rng.uniform_index(3)) - 2 * pad + (s > 1 ? 0 : 1);
    Tensor x = mt::random_tensor(rng, {1 + rng.uniform_index(2), p.channels(), H + 2, H + 2});
    Tensor fast, slow;
    try {
      fast = msr::conv2d_forward(x, p);
    } catch (const std::invalid_argument&) {
      continue;  // geometry rejected; covered by NonIntegralOutputRejected
    }
    slow = naive_conv(x, p);
    ASSERT_EQ(fast.shape(), slow.shape());
    for (std::size_t i = 0; i < fast.size(); ++i) EXPECT_NEAR(fast[i], slow[i], 1e-12);
    ++compared;
  }
  EXPECT_GE(compared, 20);
}

TEST(Conv2d, ErrorPaths) {
  Prng rng(3);
  auto p = random_conv(rng, 2, 3, 3, true, false);
  EXPECT_THROW((void)msr::conv2d_forward(mt::random_tensor(rng, {1, 2, 5, 5}), p), std::invalid_argument);
  p.stride = 2;
  // (6 - 3) = 3 is odd with no padding: the last input column would be dropped.
  EXPECT_THROW((void)msr::conv2d_forward(mt::random_tensor(rng, {1, 3, 6, 6}), p), std::invalid_argument);
  // With padding 1 the remainder falls inside the padding: 32 -> 16.
  p.padding = 1;
  EXPECT_EQ(msr::conv2d_forward(mt::random_tensor(rng, {1, 3, 32, 32}), p).shape(), (Shape{1, 2, 16, 16}));
  p.stride = 1;
  p.padding = 0;
  Tensor x = mt::random_tensor(rng, {1, 3, 5, 5});
  EXPECT_THROW((void)msr::conv2d_backward(x, p, Tensor({1, 2, 4, 4})), std::invalid_argument);
}

TEST(Conv2d, NonIntegralOutputRejected) {
  EXPECT_THROW((void)msr::conv_output_dim(6, 3, 0, 2), std::invalid_argument);
  EXPECT_THROW((void)msr::conv_output_dim(2, 3, 0, 1), std::invalid_argument);
  EXPECT_EQ(msr::conv_output_dim(7, 3, 0, 2), 3u);
  EXPECT_EQ(msr::conv_output_dim(32, 3, 1, 2), 16u);
}

TEST(Conv2d, BackwardMatchesFiniteDifferences) {
  Prng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto p = random_conv(rng, 2, 2, 3, true, true, 1 + trial % 2, trial % 3 == 0 ? 1 : 0);
    Tensor x = mt::random_tensor(rng, {2, 2, 5, 5});
    Tensor y = msr::conv2d_forward(x, p);
    auto probe = mt::make_probe(rng, y.shape());
    auto g = msr::conv2d_backward(x, p, probe.grad());

    auto nx = mt::numeric_gradient([&](const Tensor& t) { return probe(msr::conv2d_forward(t, p)); }, x);
    auto nV = mt::numeric_gradient(
        [&](const Tensor& t) {
          auto q = p;
          q.V = t;
          return probe(msr::conv2d_forward(x, q));
        },
        p.V);
    auto ng = mt::numeric_gradient(
        [&](const Tensor& t) {
          auto q = p;
          q.g = t;
          return probe(msr::conv2d_forward(x, q));
        },
        *p.g);
    auto nb = mt::numeric_gradient(
        [&](const Tensor& t) {
          auto q = p;
          q.b = t;
          return probe(msr::conv2d_forward(x, q));
        },
        *p.b);
    EXPECT_LE(mt::compare_gradients(g.dx, nx).worst, 1e-5);
    EXPECT_LE(mt::compare_gradients(g.dV, nV).worst, 1e-5);
    EXPECT_LE(mt::compare_gradients(*g.dg, ng).worst, 1e-5);
    EXPECT_LE(mt::compare_gradients(*g.db, nb).worst, 1e-5);
  }
}

TEST(Conv2d, UnitScaleGivesClassicalWeightGradient) {
  Prng rng(5);
  auto p = random_conv(rng, 3, 2, 3, true, false);
  p.g->fill(0.0);
  auto plain = p;
  plain.g.reset();
  Tensor x = mt::random_tensor(rng, {2, 2, 6, 6});
  Tensor dy = mt::random_tensor(rng, {2, 3, 4, 4});
  auto a = msr::conv2d_backward(x, p, dy);
  auto b = msr::conv2d_backward(x, plain, dy);
  EXPECT_EQ(a.dV, b.dV);
  EXPECT_EQ(a.dx, b.dx);
  EXPECT_FALSE(b.dg.has_value());
}

TEST(Conv2d, ZeroUpstreamGivesZeroGradients) {
  Prng rng(6);
  auto p = random_conv(rng, 2, 2, 3, true, true);
  Tensor x = mt::random_tensor(rng, {2, 2, 5, 5});
  auto g = msr::conv2d_backward(x, p, Tensor({2, 2, 3, 3}, 0.0));
  EXPECT_EQ(msr::max_abs(g.dx), 0.0);
  EXPECT_EQ(msr::max_abs(g.dV), 0.0);
  EXPECT_EQ(msr::max_abs(*g.dg), 0.0);
  EXPECT_EQ(msr::max_abs(*g.db), 0.0);
}

TEST(Conv2d, LinearInInputWithoutBias) {
  Prng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto p = random_conv(rng, 3, 2, 3, true, false, 1, rng.uniform_index(2));
    Tensor x = mt::random_tensor(rng, {1, 2, 6, 6});
    const double alpha = rng.uniform(-3.0, 3.0);
    Tensor lhs = msr::conv2d_forward(msr::scale(x, alpha), p);
    Tensor rhs = msr::scale(msr::conv2d_forward(x, p), alpha);
    for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], rhs[i], 1e-12);
  }
}

TEST(Conv2d, ShiftRejectionForZeroMeanKernels) {
  Prng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t C = 1 + rng.uniform_index(4);
    auto p = random_conv(rng, 1 + rng.uniform_index(4), C, 2 + rng.uniform_index(3), true, rng.bernoulli(0.5));
    p.V = msr::czm_project(p.V);
    Tensor x = mt::random_tensor(rng, {2, C, 7, 7});
    Tensor shifted = x;
    const std::size_t plane = 49;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const double s = rng.uniform(-10.0, 10.0);
        for (std::size_t k = 0; k < plane; ++k) shifted[(n * C + c) * plane + k] += s;
      }
    Tensor a = msr::conv2d_forward(x, p), b = msr::conv2d_forward(shifted, p);
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], 1e-9);
  }
}
