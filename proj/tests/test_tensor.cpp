#include <gtest/gtest.h>

#include <cstring>

#include "msr/prng.hpp"
#include "msr/tensor.hpp"
#include "test_support.hpp"

using msr::Prng;
using msr::Shape;
using Tensor = msr::Tensor<double>;

TEST(Tensor, ElementwiseExamples) {
  Tensor a({2}, {1, 2});
  Tensor b({2}, {3, 4});
  EXPECT_EQ(msr::add(a, b), Tensor({2}, {4, 6}));
  EXPECT_EQ(msr::mul(Tensor({3}, {1, 2, 3}), 0.0), Tensor({3}, {0, 0, 0}));
  Prng rng(3);
  Tensor x = msr::testing::random_tensor(rng, {4, 5});
  EXPECT_EQ(msr::sub(x, x), Tensor({4, 5}, 0.0));
  EXPECT_EQ(msr::div(Tensor({2}, {6, 8}), Tensor({2}, {3, 4})), Tensor({2}, {2, 2}));
  EXPECT_EQ(msr::scale(a, 3.0), Tensor({2}, {3, 6}));
}

TEST(Tensor, ShapeMismatchNamesBothShapes) {
  Tensor a({2, 3});
  Tensor b({3, 2});
  try {
    (void)msr::add(a, b);
    FAIL() << "expected throw";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[3,2]"), std::string::npos);
  }
}

TEST(Tensor, ConstructionInvariants) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), std::invalid_argument);
  EXPECT_THROW(Tensor({2, 0}), std::invalid_argument);
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor r = t.reshape({3, 2});
  EXPECT_EQ(r.shape(), (Shape{3, 2}));
  EXPECT_EQ(t.shape(), (Shape{2, 3}));
  EXPECT_THROW((void)t.reshape({4, 2}), std::invalid_argument);
  EXPECT_EQ(t.at(1, 2), 6.0);
}

TEST(Tensor, ElementwiseShapePropertyOverRandomShapes) {
  Prng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    Shape s;
    const auto rank = 1 + rng.uniform_index(4);
    for (std::size_t i = 0; i < rank; ++i) s.push_back(1 + rng.uniform_index(5));
    Tensor a = msr::testing::random_tensor(rng, s);
    Tensor b = msr::testing::random_tensor(rng, s, 0.5, 2.0);
    EXPECT_EQ(msr::add(a, b).shape(), s);
    EXPECT_EQ(msr::sub(a, b).shape(), s);
    EXPECT_EQ(msr::mul(a, b).shape(), s);
    EXPECT_EQ(msr::div(a, b).shape(), s);
    EXPECT_EQ(msr::scale(a, 2.0).shape(), s);
  }
}

TEST(Tensor, ReduceMeanExamples) {
  Tensor fives({1, 3, 3}, 5.0);
  auto m = msr::reduce_mean(fives, {1, 2});
  EXPECT_EQ(m.shape(), (Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(m[0], 5.0);

  Tensor seq({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  EXPECT_DOUBLE_EQ(msr::reduce_mean(seq, {1, 2})[0], 45.0 / 9.0);
  EXPECT_EQ(msr::reduce_mean(seq, {}), seq);
  EXPECT_THROW((void)msr::reduce_mean(seq, {3}), std::invalid_argument);

  Tensor rows({2, 3}, {1, 2, 3, 10, 20, 30});
  EXPECT_EQ(msr::reduce_mean(rows, {1}), Tensor({2, 1}, {2, 20}));
  EXPECT_EQ(msr::reduce_mean(rows, {0}), Tensor({1, 3}, {5.5, 11, 16.5}));
}

TEST(Tensor, ReduceThenBroadcastSubtractIsZeroMean) {
  Prng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Shape s{1 + rng.uniform_index(4), 1 + rng.uniform_index(4), 1 + rng.uniform_index(5),
            1 + rng.uniform_index(5)};
    Tensor x = msr::testing::random_tensor(rng, s, -10.0, 10.0);
    Tensor c = msr::broadcast_sub(x, msr::reduce_mean(x, {2, 3}));
    EXPECT_LE(msr::max_abs(msr::reduce_mean(c, {2, 3})), 1e-12);
  }
}

TEST(Tensor, L2Norm) {
  EXPECT_DOUBLE_EQ(msr::l2_norm(Tensor({2}, {3, 4})), 5.0);
  EXPECT_EQ(msr::l2_norm(Tensor({7}, 0.0)), 0.0);
  Tensor seq({9}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  EXPECT_NEAR(msr::l2_norm(msr::sub(seq, 5.0)), std::sqrt(60.0), 1e-12);
  EXPECT_NEAR(std::sqrt(60.0), 7.74597, 1e-5);
}

TEST(Prng, StandardEngineVector) {
  // The engine's 10000th output for the default seed is fixed by the C++ standard.
  std::mt19937_64 ref;
  ref.discard(9999);
  EXPECT_EQ(ref(), 9981545732273789042ULL);
  Prng p(5489);  // mt19937_64::default_seed
  for (int i = 0; i < 9999; ++i) p.next_u64();
  EXPECT_EQ(p.next_u64(), 9981545732273789042ULL);
}

TEST(Prng, FrozenUniformVectors) {
  // Frozen outputs of this generator for seed 42; a change here breaks
  // reproducibility of every recorded run.
  Prng p(42);
  const std::uint64_t first = p.next_u64();
  Prng q(42);
  EXPECT_EQ(q.next_unit(), static_cast<double>(first >> 11) * 0x1.0p-53);
  Prng r(42);
  EXPECT_EQ(first, 13930160852258120406ULL);
  EXPECT_EQ(r.next_u64(), first);
}

TEST(Prng, UniformTensorStatisticsAndBounds) {
  Prng rng(2024);
  Tensor u = msr::uniform_tensor<double>(rng, {100000}, -1.0, 1.0);
  EXPECT_NEAR(msr::sum(u) / 1e5, 0.0, 0.02);
  double lo = 1, hi = -1;
  for (double v : u.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  EXPECT_GE(lo, -1.0);
  EXPECT_LT(hi, 1.0);
  EXPECT_THROW((void)msr::uniform_tensor<double>(rng, {3}, 1.0, 1.0), std::invalid_argument);
}

TEST(Prng, SameSeedSameBytes) {
  Prng a(99), b(99);
  Tensor x = msr::uniform_tensor<double>(a, {257}, -1.0, 1.0);
  Tensor y = msr::uniform_tensor<double>(b, {257}, -1.0, 1.0);
  EXPECT_EQ(std::memcmp(x.raw(), y.raw(), x.size() * sizeof(double)), 0);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Prng, StateRoundTrip) {
  Prng a(7);
  for (int i = 0; i < 37; ++i) a.next_u64();
  Prng b;
  b.restore(a.state());
  EXPECT_EQ(a, b);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.uniform(-1, 1), b.uniform(-1, 1));
  EXPECT_THROW(b.restore("garbage"), std::runtime_error);
}

TEST(Prng, UniformIndexInRange) {
  Prng rng(1);
  std::vector<int> hist(7, 0);
  for (int i = 0; i < 7000; ++i) ++hist[rng.uniform_index(7)];
  for (int h : hist) EXPECT_GT(h, 850);
  EXPECT_THROW(rng.uniform_index(0), std::invalid_argument);
}
