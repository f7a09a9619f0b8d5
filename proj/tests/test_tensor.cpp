#include <gtest/gtest.h>

#include <random>
#include <unordered_set>

#include "grad_check.hpp"
#include "lumipower/error.hpp"
#include "lumipower/exact_sum.hpp"
#include "lumipower/tensor.hpp"
#include "oracles.hpp"

using namespace lumipower;
using namespace lumipower::testing;

namespace {

constexpr double kGradTol = 1e-4;
constexpr int kInstances = 10;

std::vector<double> as_vector(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace

// ---------------------------------------------------------------- exact sum

TEST(ExactSum, MatchesWidePrecisionOracle) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> mant(-1.0, 1.0);
  std::uniform_int_distribution<int> expo(-60, 60);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(1 + trial * 3);
    for (double& x : v) x = std::ldexp(mant(rng), expo(rng));
    EXPECT_EQ(exact_sum(v), mpfr_sum(v)) << "trial " << trial;
  }
}

TEST(ExactSum, OrderIndependentAndMergeable) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> dist(-1e3, 1e3);
  std::vector<double> v(1000);
  for (double& x : v) x = dist(rng) * std::pow(10.0, static_cast<int>(rng() % 12) - 6);
  const double forward = exact_sum(v);
  std::shuffle(v.begin(), v.end(), rng);
  EXPECT_EQ(exact_sum(v), forward);
  ExactSum a, b;
  for (std::size_t i = 0; i < v.size(); ++i) (i % 3 == 0 ? a : b).add(v[i]);
  a.merge(b);
  EXPECT_EQ(a.round(), forward);
}

TEST(ExactSum, CancellationIsExact) {
  const std::vector<double> v{1e100, 1.0, -1e100, 1e-100};
  EXPECT_EQ(exact_sum(v), 1.0 + 1e-100);
  EXPECT_EQ(exact_sum(std::vector<double>{0.1, 0.2, -0.3}), mpfr_sum(std::vector<double>{0.1, 0.2, -0.3}));
}

// ---------------------------------------------------------------- conv2d

TEST(Conv2d, IdentityPointwiseKernel) {
  Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor k = Tensor::full({1, 1, 1, 1}, 1.0);
  Tensor y = conv2d(x, k, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (double v : y.values()) EXPECT_EQ(v, 1.0);
}

TEST(Conv2d, IdentityKernelIsBitExactOnRandomInput) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({2, 3, 5, 7}, rng, -1e3, 1e3, false);
  std::vector<double> eye(9, 0.0);
  for (std::size_t c = 0; c < 3; ++c) eye[c * 3 + c] = 1.0;
  Tensor y = conv2d(x, Tensor({3, 3, 1, 1}, eye), 1, 0);
  EXPECT_EQ(as_vector(y.values()), as_vector(x.values()));
}

TEST(Conv2d, FullWindowSum) {
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor y = conv2d(x, Tensor::full({1, 1, 2, 2}, 1.0), 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 10.0);
}

TEST(Conv2d, MatchesNaiveLoopsWithStrideAndPadding) {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({2, 3, 8, 8}, rng, -1, 1, false);
  Tensor k = random_tensor({4, 3, 3, 3}, rng, -1, 1, false);
  Tensor y = conv2d(x, k, 2, 1);
  ASSERT_EQ(y.shape(), (Shape{2, 4, 4, 4}));
  const auto expected = naive_conv2d(x, k, 2, 1);
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(y.at(i), expected[i], 1e-12);
}

TEST(Conv2d, MatchesNaiveLoopsAcrossGeometries) {
  std::mt19937_64 rng(6);
  struct Case { Shape in, ker; std::size_t stride, pad; };
  const std::vector<Case> cases{{{1, 1, 9, 11}, {2, 1, 7, 7}, 2, 3},
                                {{3, 2, 6, 5}, {3, 2, 1, 1}, 2, 0},
                                {{1, 4, 5, 5}, {2, 4, 3, 3}, 1, 1},
                                {{2, 2, 4, 6}, {1, 2, 2, 3}, 1, 0}};
  for (const auto& c : cases) {
    Tensor x = random_tensor(c.in, rng, -1, 1, false);
    Tensor k = random_tensor(c.ker, rng, -1, 1, false);
    Tensor y = conv2d(x, k, c.stride, c.pad);
    const auto expected = naive_conv2d(x, k, c.stride, c.pad);
    ASSERT_EQ(y.numel(), expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(y.at(i), expected[i], 1e-12);
  }
}

TEST(Conv2d, RejectsChannelMismatch) {
  EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3})), ShapeError);
}

TEST(Conv2d, RejectsKernelLargerThanPaddedInput) {
  EXPECT_THROW(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), 1, 0), ShapeError);
  EXPECT_THROW(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 1, 1}), 0, 0), ShapeError);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(21);
  for (int i = 0; i < kInstances; ++i) {
    const std::size_t stride = 1 + i % 2, pad = i % 3 == 0 ? 0 : 1;
    Tensor x = random_tensor({2, 2, 5, 6}, rng);
    Tensor k = random_tensor({3, 2, 3, 3}, rng);
    auto r = check_gradients([&](std::vector<Tensor>& in) { return project(conv2d(in[0], in[1], stride, pad), 99); },
                             {x, k});
    EXPECT_LT(r.max_relative_error, kGradTol) << "instance " << i;
  }
}

TEST(Conv2d, PointwiseGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(22);
  for (int i = 0; i < kInstances; ++i) {
    Tensor x = random_tensor({2, 4, 3, 3}, rng);
    Tensor k = random_tensor({2, 4, 1, 1}, rng);
    auto r = check_gradients([&](std::vector<Tensor>& in) { return project(conv2d(in[0], in[1]), 98); }, {x, k});
    EXPECT_LT(r.max_relative_error, kGradTol);
  }
}

// ---------------------------------------------------------------- relu / abs

TEST(Relu, Definition) {
  Tensor y = relu(Tensor({3}, {-1, 0, 2}));
  EXPECT_EQ(as_vector(y.values()), (std::vector<double>{0, 0, 2}));
  Tensor z = relu(Tensor({4}, {-1, -2, -0.5, -3}));
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(std::isnan(relu(Tensor({1}, {std::nan("")})).item()));
}

TEST(Relu, SubgradientConvention) {
  Tensor x({2}, {-1, 2}, true);
  sum(relu(x)).backward();
  EXPECT_EQ(as_vector(x.grad()), (std::vector<double>{0, 1}));
  Tensor zero({1}, {0.0}, true);
  sum(relu(zero)).backward();
  EXPECT_EQ(zero.grad()[0], 0.0);
}

TEST(Relu, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(31);
  for (int i = 0; i < kInstances; ++i) {
    auto r = check_gradients([](std::vector<Tensor>& in) { return project(relu(in[0]), 7); },
                             {random_away_from_zero({4, 4}, rng)});
    EXPECT_LT(r.max_relative_error, kGradTol);
  }
}

TEST(Abs, Definition) {
  EXPECT_EQ(as_vector(abs(Tensor({2}, {-2, 3})).values()), (std::vector<double>{2, 3}));
  Tensor zeros = abs(Tensor::zeros({5}));
  for (double v : zeros.values()) EXPECT_EQ(v, 0.0);
  Tensor zero({1}, {0.0}, true);
  sum(abs(zero)).backward();
  EXPECT_EQ(zero.grad()[0], 0.0);
}

TEST(Abs, GradientsMatchFiniteDifferencesTightly) {
  std::mt19937_64 rng(32);
  for (int i = 0; i < kInstances; ++i) {
    auto r = check_gradients([](std::vector<Tensor>& in) { return project(abs(in[0]), 8); },
                             {random_away_from_zero({4, 4}, rng)});
    EXPECT_LT(r.max_relative_error, 1e-6);
  }
}

// ---------------------------------------------------------------- batchnorm

TEST(BatchNorm, EvalWithUnitStatsIsIdentity) {
  std::mt19937_64 rng(41);
  Tensor x = random_tensor({2, 3, 4, 4}, rng, -2, 2, false);
  auto stats = BatchNormStats::identity(3);
  Tensor y = batchnorm2d(x, Tensor::full({3}, 1.0), Tensor::zeros({3}), stats, Mode::eval);
  const double scale_eps = 1.0 / std::sqrt(1.0 + 1e-5);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.at(i), x.at(i) * scale_eps, 1e-15);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.at(i), x.at(i), 1e-5);
}

TEST(BatchNorm, TrainOnConstantInputGivesBeta) {
  auto stats = BatchNormStats::identity(2);
  Tensor beta({2}, {0.25, -1.5});
  Tensor y = batchnorm2d(Tensor::full({2, 2, 3, 3}, 4.0), Tensor::full({2}, 3.0), beta, stats, Mode::train);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_DOUBLE_EQ(y.at(i), i % 18 < 9 ? 0.25 : -1.5);
}

TEST(BatchNorm, TrainUpdatesRunningStatsWithMomentum) {
  auto stats = BatchNormStats::identity(1);
  Tensor x({2, 1, 1, 2}, {1, 2, 3, 6});
  batchnorm2d(x, Tensor::full({1}, 1.0), Tensor::zeros({1}), stats, Mode::train);
  // mean 3, unbiased variance 14/3.
  EXPECT_DOUBLE_EQ(stats.running_mean.at(0), 0.1 * 3.0);
  EXPECT_DOUBLE_EQ(stats.running_var.at(0), 0.9 + 0.1 * (14.0 / 3.0));
}

TEST(BatchNorm, TrainNeedsTwoValuesPerChannel) {
  auto stats = BatchNormStats::identity(1);
  EXPECT_THROW(batchnorm2d(Tensor::zeros({1, 1, 1, 1}), Tensor::full({1}, 1.0), Tensor::zeros({1}), stats, Mode::train),
               ShapeError);
  EXPECT_NO_THROW(
      batchnorm2d(Tensor::zeros({1, 1, 1, 1}), Tensor::full({1}, 1.0), Tensor::zeros({1}), stats, Mode::eval));
}

TEST(BatchNorm, TrainGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(42);
  for (int i = 0; i < kInstances; ++i) {
    Tensor x = random_tensor({2, 3, 4, 4}, rng, -2, 2);
    Tensor gamma = random_tensor({3}, rng, 0.5, 1.5);
    Tensor beta = random_tensor({3}, rng);
    auto r = check_gradients(
        [](std::vector<Tensor>& in) {
          auto stats = BatchNormStats::identity(3);
          return project(batchnorm2d(in[0], in[1], in[2], stats, Mode::train), 5);
        },
        {x, gamma, beta});
    EXPECT_LT(r.max_relative_error, kGradTol);
  }
}

TEST(BatchNorm, EvalGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(43);
  for (int i = 0; i < kInstances; ++i) {
    auto stats = BatchNormStats::identity(3);
    stats.running_mean = random_tensor({3}, rng, -1, 1, false);
    stats.running_var = random_tensor({3}, rng, 0.5, 2, false);
    auto r = check_gradients(
        [&](std::vector<Tensor>& in) { return project(batchnorm2d(in[0], in[1], in[2], stats, Mode::eval), 6); },
        {random_tensor({2, 3, 2, 2}, rng), random_tensor({3}, rng), random_tensor({3}, rng)});
    EXPECT_LT(r.max_relative_error, kGradTol);
  }
}

// ---------------------------------------------------------------- pooling

TEST(GlobalAvgPool, Examples) {
  EXPECT_EQ(global_avg_pool(Tensor::full({1, 1, 3, 5}, 7.0)).item(), 7.0);
  EXPECT_EQ(global_avg_pool(Tensor({1, 1, 2, 2}, {1, 3, 5, 7})).item(), 4.0);
}

TEST(GlobalAvgPool, EqualsSumOverAreaExactly) {
  std::mt19937_64 rng(51);
  Tensor x = random_tensor({3, 4, 5, 6}, rng, -10, 10, false);
  Tensor y = global_avg_pool(x);
  ASSERT_EQ(y.shape(), (Shape{3, 4}));
  for (std::size_t nc = 0; nc < 12; ++nc) {
    EXPECT_EQ(y.at(nc), mpfr_sum(x.values().subspan(nc * 30, 30)) / 30.0);
  }
}

TEST(GlobalAvgPool, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(52);
  for (int i = 0; i < kInstances; ++i) {
    auto r = check_gradients([](std::vector<Tensor>& in) { return project(global_avg_pool(in[0]), 4); },
                             {random_tensor({2, 3, 3, 4}, rng)});
    EXPECT_LT(r.max_relative_error, kGradTol);
  }
}

TEST(MaxPool, TwoByTwo) {
  Tensor x({1, 1, 2, 4}, {1, 5, 2, 0, 3, 4, 8, 7});
  Tensor y = max_pool2d(x, 2, 2, 0);
  EXPECT_EQ(as_vector(y.values()), (std::vector<double>{5, 8}));
}

TEST(MaxPool, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(53);
  for (int i = 0; i < kInstances; ++i) {
    // Distinct values spaced well beyond the step so the argmax is stable.
    std::vector<double> v(2 * 2 * 6 * 6);
    std::iota(v.begin(), v.end(), 0.0);
    std::shuffle(v.begin(), v.end(), rng);
    for (double& x : v) x *= 0.01;
    Tensor x({2, 2, 6, 6}, v, true);
    const std::size_t k = i % 2 ? 3 : 2, s = 2, p = i % 2 ? 1 : 0;
    auto r = check_gradients([&](std::vector<Tensor>& in) { return project(max_pool2d(in[0], k, s, p), 3); }, {x});
    EXPECT_LT(r.max_relative_error, kGradTol);
  }
}

TEST(Pad2d, ZeroBorderAndGradients) {
  Tensor x({1, 1, 1, 2}, {3, 4});
  Tensor y = pad2d(x, 1, 0, 0, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 4}));
  EXPECT_EQ(as_vector(y.values()), (std::vector<double>{0, 0, 0, 0, 3, 4, 0, 0}));
  std::mt19937_64 rng(54);
  for (int i = 0; i < kInstances; ++i) {
    auto r = check_gradients([](std::vector<Tensor>& in) { return project(pad2d(in[0], 1, 2, 0, 1), 2); },
                             {random_tensor({2, 2, 3, 3}, rng)});
    EXPECT_LT(r.max_relative_error, kGradTol);
  }
}

// ---------------------------------------------------------------- linear

TEST(Linear, BasisVectorSelectsFeature) {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor y = linear(x, Tensor({1, 3}, {0, 1, 0}));
  EXPECT_EQ(as_vector(y.values()), (std::vector<double>{2, 5}));
}

TEST(Linear, DotProduct) {
  EXPECT_EQ(linear(Tensor({1, 2}, {1, 2}), Tensor({1, 2}, {3, 4})).item(), 11.0);
  Tensor b({1}, {0.5});
  EXPECT_EQ(linear(Tensor({1, 2}, {1, 2}), Tensor({1, 2}, {3, 4}), &b).item(), 11.5);
}

TEST(Linear, RejectsDimensionMismatch) {
  EXPECT_THROW(linear(Tensor::zeros({1, 3}), Tensor::zeros({1, 2})), ShapeError);
}

TEST(Linear, GradientsMatchFiniteDifferencesTightly) {
  std::mt19937_64 rng(61);
  for (int i = 0; i < kInstances; ++i) {
    Tensor b = random_tensor({2}, rng);
    auto r = check_gradients(
        [](std::vector<Tensor>& in) { return project(linear(in[0], in[1], &in[2]), 1); },
        {random_tensor({3, 5}, rng), random_tensor({2, 5}, rng), b});
    EXPECT_LT(r.max_relative_error, 1e-6);
  }
}

// ---------------------------------------------------------------- elementwise + reductions

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(71);
  for (int i = 0; i < kInstances; ++i) {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
    auto r = check_gradients(
        [](std::vector<Tensor>& in) {
          Tensor t = add(mul(in[0], in[1]), scale(sub(in[0], in[1]), 1.7));
          return project(add_scalar(neg(t), 0.3), 11);
        },
        {a, b});
    EXPECT_LT(r.max_relative_error, kGradTol);
  }
}

TEST(Reductions, AxisSumAndReshape) {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(as_vector(sum(x, {0}).values()), (std::vector<double>{5, 7, 9}));
  EXPECT_EQ(as_vector(sum(x, {1}).values()), (std::vector<double>{6, 15}));
  EXPECT_EQ(sum(x, {1}, true).shape(), (Shape{2, 1}));
  EXPECT_EQ(sum(x).item(), 21.0);
  EXPECT_EQ(mean(x).item(), 3.5);
  EXPECT_EQ(reshape(x, {3, 2}).shape(), (Shape{3, 2}));
  EXPECT_THROW(reshape(x, {4, 2}), ShapeError);
  EXPECT_THROW(sum(x, {2}), ShapeError);
}

TEST(Reductions, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(72);
  for (int i = 0; i < kInstances; ++i) {
    auto r = check_gradients(
        [](std::vector<Tensor>& in) {
          Tensor s = sum(in[0], {0, 2});
          return add(project(reshape(s, {3}), 12), mean(mul(in[0], in[0])));
        },
        {random_tensor({2, 3, 4}, rng)});
    EXPECT_LT(r.max_relative_error, kGradTol);
  }
}

TEST(ChannelBias, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(73);
  for (int i = 0; i < kInstances; ++i) {
    auto r = check_gradients([](std::vector<Tensor>& in) { return project(add_channel_bias(in[0], in[1]), 13); },
                             {random_tensor({2, 3, 2, 2}, rng), random_tensor({3}, rng)});
    EXPECT_LT(r.max_relative_error, kGradTol);
  }
}

// ---------------------------------------------------------------- backward semantics

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::full({2, 3}, 5.0, true);
  sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, HalfSquaredNormGivesInput) {
  Tensor x({4}, {1.5, -2, 0.25, 3}, true);
  scale(sum(mul(x, x)), 0.5).backward();
  EXPECT_EQ(as_vector(x.grad()), as_vector(x.values()));
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor x({2}, {1, 2}, true);
  Tensor loss = sum(mul(x, x));
  loss.backward();
  loss.backward();
  EXPECT_EQ(as_vector(x.grad()), (std::vector<double>{4, 8}));
}

TEST(Backward, RejectsNonScalarLoss) {
  Tensor x = Tensor::full({2}, 1.0, true);
  EXPECT_THROW(relu(x).backward(), ShapeError);
}

TEST(Backward, OffPathTensorsGetNoGradient) {
  Tensor x = Tensor::full({2}, 1.0, true);
  Tensor unused = Tensor::full({2}, 1.0, true);
  Tensor other = scale(unused, 2.0);
  sum(x).backward();
  EXPECT_FALSE(unused.has_grad());
  (void)other;
}

TEST(Backward, TwoConsumersSumTheirContributions) {
  std::mt19937_64 rng(81);
  for (int i = 0; i < kInstances; ++i) {
    Tensor x = random_away_from_zero({3, 3}, rng);
    auto f = [](const Tensor& t) { return add(project(relu(t), 1), project(scale(mul(t, t), 0.5), 2)); };
    x.clear_grad();
    f(x).backward();
    // Perturbation oracle on the full function.
    const double h = 1e-6;
    auto values = x.mutable_values();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double saved = values[k];
      double plus, minus;
      {
        NoGradGuard guard;
        values[k] = saved + h;
        plus = f(x).item();
        values[k] = saved - h;
        minus = f(x).item();
      }
      values[k] = saved;
      EXPECT_NEAR(x.grad()[k], (plus - minus) / (2 * h), 1e-6);
    }
  }
}

TEST(Backward, CompositeNetworkMatchesFiniteDifferences) {
  std::mt19937_64 rng(82);
  for (int i = 0; i < kInstances; ++i) {
    Tensor image = random_tensor({2, 1, 6, 6}, rng, -1, 1, false);
    Tensor k1 = random_tensor({3, 1, 3, 3}, rng);
    Tensor k2 = random_tensor({4, 3, 3, 3}, rng);
    Tensor w = random_tensor({1, 4}, rng);
    auto r = check_gradients(
        [&](std::vector<Tensor>& in) {
          Tensor h = relu(conv2d(image, in[0], 1, 1));
          h = max_pool2d(h, 2, 2, 0);
          h = relu(conv2d(h, in[1], 1, 1));
          Tensor y = linear(global_avg_pool(h), in[2]);
          return mean(mul(y, y));
        },
        {k1, k2, w});
    EXPECT_LT(r.max_relative_error, kGradTol);
  }
}

TEST(ComputationTape, TopologicalAndEachOpOnce) {
  Tensor x = Tensor::full({2, 2}, 0.5, true);
  Tensor a = relu(x);
  Tensor b = mul(a, a);
  Tensor c = add(b, a);
  Tensor loss = sum(c);
  auto tape = ComputationTape::record(loss);
  ASSERT_EQ(tape.size(), 4u);
  std::unordered_set<const detail::TensorImpl*> produced;
  for (const auto& e : tape.entries()) {
    for (const auto& in : e.node->inputs) {
      if (in->node) EXPECT_TRUE(produced.count(in.get())) << e.node->op << " before its operand";
    }
    EXPECT_TRUE(produced.insert(e.output).second);
  }
  EXPECT_EQ(tape.entries().back().output, loss.id());
}

TEST(NoGrad, RecordsNothing) {
  Tensor x = Tensor::full({2}, 1.0, true);
  NoGradGuard guard;
  Tensor y = relu(x);
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}
