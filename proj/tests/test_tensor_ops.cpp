#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "gradient_cases.hpp"
#include "mlosr/ops.hpp"

using namespace mlosr;
using mlosr::testing::random_tensor;

namespace {

Tensor forward(const std::function<Var(Tape&)>& f) {
  Tape t;
  return t.value(f(t));
}

double dot(const Tensor& a, const Tensor& b) {
  return std::inner_product(a.values().begin(), a.values().end(), b.values().begin(), 0.0);
}

}  // namespace

TEST(Tensor, RejectsZeroDimensionsAndBadLength) {
  EXPECT_THROW(Tensor(Shape{2, 0}), DimensionError);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor(Shape{2, 3}).reshaped({4}), DimensionError);
  EXPECT_EQ(Tensor(Shape{2, 3}, 1.5).reshaped({3, 2}).shape(), (Shape{3, 2}));
}

TEST(Tensor, SliceAndGatherRows) {
  Tensor t({3, 2}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.slice_rows(1, 3).values(), (std::vector<double>{3, 4, 5, 6}));
  const std::vector<std::size_t> rows{2, 0};
  EXPECT_EQ(t.gather_rows(rows).values(), (std::vector<double>{5, 6, 1, 2}));
  EXPECT_THROW(t.slice_rows(2, 4), DimensionError);
}

TEST(Affine, Examples) {
  const Tensor id = forward([](Tape& t) {
    return affine(t.leaf(Tensor({1, 2}, {1, 2})), t.leaf(Tensor({2, 2}, {1, 0, 0, 1})), t.leaf(Tensor({2}, {0, 0})));
  });
  EXPECT_EQ(id.values(), (std::vector<double>{1, 2}));
  const Tensor b = forward([](Tape& t) {
    return affine(t.leaf(Tensor({1, 2}, {1, 2})), t.leaf(Tensor({2, 2}, {1, 0, 0, 1})), t.leaf(Tensor({2}, {3, 4})));
  });
  EXPECT_EQ(b.values(), (std::vector<double>{4, 6}));
}

TEST(Affine, ShapeMismatchNamesBothShapes) {
  Tape t;
  try {
    affine(t.leaf(Tensor({1, 3})), t.leaf(Tensor({2, 2})), t.leaf(Tensor({2})));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2x2]"), std::string::npos) << msg;
  }
}

TEST(Conv2d, EncoderShape) {
  Tape t;
  Var y = conv2d(t.leaf(Tensor({1, 1, 64, 64})), t.leaf(Tensor({32, 1, 3, 3})));
  EXPECT_EQ(t.value(y).shape(), (Shape{1, 32, 32, 32}));
  Var odd = conv2d(t.leaf(Tensor({1, 1, 5, 7})), t.leaf(Tensor({2, 1, 3, 3})));
  EXPECT_EQ(t.value(odd).shape(), (Shape{1, 2, 3, 4}));
}

TEST(Conv2d, DeltaKernelWithStrideOneIsIdentity) {
  Rng rng(3);
  const Tensor x = random_tensor({2, 1, 5, 4}, rng);
  Tensor k({1, 1, 3, 3}, 0.0);
  k[4] = 1.0;
  Tape t;
  Var y = conv2d(t.leaf(x), t.leaf(k), 1, 1);
  EXPECT_EQ(t.value(y), x);
}

TEST(Conv2d, ChannelMismatchThrows) {
  Tape t;
  EXPECT_THROW(conv2d(t.leaf(Tensor({1, 2, 4, 4})), t.leaf(Tensor({3, 1, 3, 3}))), DimensionError);
  EXPECT_THROW(conv_transpose2d(t.leaf(Tensor({1, 2, 4, 4})), t.leaf(Tensor({3, 1, 3, 3}))), DimensionError);
}

TEST(ConvTranspose2d, DecoderShape) {
  Tape t;
  Var y = conv_transpose2d(t.leaf(Tensor({1, 64, 32, 32})), t.leaf(Tensor({64, 1, 3, 3})));
  EXPECT_EQ(t.value(y).shape(), (Shape{1, 1, 64, 64}));
}

TEST(ConvTranspose2d, AdjointOfConv2d) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = 2 * (1 + rng.below(4)), w = 2 * (1 + rng.below(4));
    const std::size_t c = 1 + rng.below(3), f = 1 + rng.below(3);
    const Tensor x = random_tensor({2, c, h, w}, rng);
    const Tensor k = random_tensor({f, c, 3, 3}, rng);
    const Tensor y = random_tensor({2, f, h / 2, w / 2}, rng);
    Tape t;
    const Tensor cx = t.value(conv2d(t.leaf(x), t.leaf(k)));
    // conv_transpose2d takes kernels as C_in(=f) x C_out(=c); the adjoint
    // uses the same buffer read as f x c x 3 x 3
    const Tensor ty = t.value(conv_transpose2d(t.leaf(y), t.leaf(k)));
    EXPECT_NEAR(dot(cx, y), dot(x, ty), 1e-10);
  }
}

TEST(Activations, Examples) {
  const Tensor r = forward([](Tape& t) { return relu(t.leaf(Tensor({3}, {-1, 0, 2}))); });
  EXPECT_EQ(r.values(), (std::vector<double>{0, 0, 2}));
  const Tensor z = forward([](Tape& t) { return mlosr::tanh(t.leaf(Tensor({1}, {0.0}))); });
  EXPECT_EQ(z[0], 0.0);
  const Tensor big = forward([](Tape& t) { return mlosr::tanh(t.leaf(Tensor({2}, {50.0, -50.0}))); });
  EXPECT_LE(big[0], 1.0);
  EXPECT_GE(big[1], -1.0);
}

TEST(Softmax, Examples) {
  const Tensor u = forward([](Tape& t) { return softmax(t.leaf(Tensor({1, 4}, 0.0))); });
  for (double v : u.values()) EXPECT_DOUBLE_EQ(v, 0.25);
  const Tensor s = forward([](Tape& t) { return softmax(t.leaf(Tensor({1, 2}, {1000, 0}))); });
  EXPECT_EQ(s[0], 1.0);
  EXPECT_EQ(s[1], 0.0);
}

TEST(Softmax, RowsSumToOneAndStayFinite) {
  Rng rng(5);
  const Tensor x = random_tensor({50, 7}, rng, -1e3, 1e3);
  const Tensor p = forward([&](Tape& t) { return softmax(t.leaf(x)); });
  for (std::size_t r = 0; r < 50; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) {
      ASSERT_TRUE(std::isfinite(p[r * 7 + j]));
      ASSERT_GE(p[r * 7 + j], 0.0);
      s += p[r * 7 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(CrossEntropy, Examples) {
  const Tensor zero = forward([](Tape& t) {
    return cross_entropy(t.leaf(Tensor({1, 3}, {0, 1, 0})), t.leaf(Tensor({1, 3}, {0, 1, 0})));
  });
  EXPECT_EQ(zero.item(), 0.0);
  const Tensor ln4 = forward([](Tape& t) {
    return cross_entropy(t.leaf(Tensor({1, 4}, {0, 0, 1, 0})), t.leaf(Tensor({1, 4}, 0.25)));
  });
  EXPECT_NEAR(ln4.item(), std::log(4.0), 1e-12);
  EXPECT_NEAR(ln4.item(), 1.3863, 1e-4);
  // a zero probability is clamped, not -inf
  const Tensor clamped = forward([](Tape& t) {
    return cross_entropy(t.leaf(Tensor({1, 2}, {1, 0})), t.leaf(Tensor({1, 2}, {0, 1})));
  });
  EXPECT_NEAR(clamped.item(), -std::log(kProbabilityFloor), 1e-9);
}

TEST(CrossEntropy, RejectsNonOneHotTarget) {
  Tape t;
  EXPECT_THROW(cross_entropy(t.leaf(Tensor({1, 2}, {0.5, 0.5})), t.leaf(Tensor({1, 2}, 0.5))), ValidationError);
  EXPECT_THROW(cross_entropy(t.leaf(Tensor({1, 2}, {1, 1})), t.leaf(Tensor({1, 2}, 0.5))), ValidationError);
}

TEST(CrossEntropy, LogitGradientIsProbabilityMinusTarget) {
  Rng rng(9);
  const Tensor logits = random_tensor({4, 3}, rng, -2, 2);
  const Tensor y({4, 3}, {1, 0, 0, 0, 0, 1, 0, 1, 0, 1, 0, 0});
  Tape t;
  Var z = t.leaf(logits, true);
  Var p = softmax(z);
  t.backward(cross_entropy(t.leaf(y), p));
  const Tensor g = t.grad(z);
  const Tensor pv = t.value(p);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], (pv[i] - y[i]) / 4.0, 1e-12);
}

TEST(L1Loss, Examples) {
  const Tensor same = forward([](Tape& t) { return l1_loss(t.leaf(Tensor({2, 2}, 0.3)), t.leaf(Tensor({2, 2}, 0.3))); });
  EXPECT_EQ(same.item(), 0.0);
  const Tensor three = forward([](Tape& t) { return l1_loss(t.leaf(Tensor({1, 2}, {1, 2})), t.leaf(Tensor({1, 2}, 0.0))); });
  EXPECT_EQ(three.item(), 3.0);
  Tape t;
  EXPECT_THROW(l1_loss(t.leaf(Tensor({1, 2})), t.leaf(Tensor({2, 1}))), DimensionError);
}

TEST(L1Loss, SubgradientAtZeroIsZero) {
  Tape t;
  Var a = t.leaf(Tensor({1, 2}, {1.0, 2.0}), true);
  t.backward(l1_loss(a, t.leaf(Tensor({1, 2}, {1.0, 0.0}))));
  EXPECT_EQ(t.grad(a).values(), (std::vector<double>{0.0, 1.0}));
}

TEST(Backward, SumGivesOnesAndUnusedGradIsZero) {
  Tape t;
  Var x = t.leaf(Tensor({2, 3}, 0.7), true);
  Var unused = t.leaf(Tensor({4}, 1.0), true);
  t.backward(sum(x));
  const Tensor gx = t.grad(x), gu = t.grad(unused);
  for (double g : gx.values()) EXPECT_EQ(g, 1.0);
  for (double g : gu.values()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, Contracts) {
  Tape t;
  Var x = t.leaf(Tensor({2}, 1.0), true);
  EXPECT_THROW(t.backward(x), ContractError);
  Var s = sum(x);
  t.backward(s);
  EXPECT_THROW(t.backward(s), ContractError);
  t.reset_grads();
  EXPECT_NO_THROW(t.backward(s));
  Tape other;
  Var y = other.leaf(Tensor({2}, 1.0));
  EXPECT_THROW(weighted_sum(x, 1.0, y, 1.0), ContractError);
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(21);
    const Tensor x = random_tensor({2, 2, 6, 6}, rng), k = random_tensor({3, 2, 3, 3}, rng);
    Tape t;
    Var kv = t.leaf(k, true);
    t.backward(sum(mlosr::tanh(conv2d(t.leaf(x), kv))));
    return t.grad(kv);
  };
  EXPECT_EQ(run(), run());
}

class OperationGradients : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OperationGradients, MatchFiniteDifferences) {
  const auto cases = mlosr::testing::operation_cases();
  const auto& c = cases[GetParam()];
  Rng rng(mix_seed(101, GetParam()));
  const auto res = mlosr::testing::run_case(c, rng, 10);
  EXPECT_LT(res.max_rel_error, 1e-4) << c.name;
  EXPECT_GT(res.coordinates, 0u);
}

INSTANTIATE_TEST_SUITE_P(AllOps, OperationGradients,
                         ::testing::Range<std::size_t>(0, mlosr::testing::operation_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           return mlosr::testing::operation_cases()[info.param].name;
                         });

TEST(CompositeGradient, EncoderClassifierDecoderLoss) {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const auto res = mlosr::testing::check_composite(seed, 25);
    EXPECT_LT(res.max_rel_error, 1e-4) << "seed " << seed;
  }
}
