#include <gtest/gtest.h>

#include <random>

#include "grad_check.hpp"
#include "lumipower/error.hpp"
#include "lumipower/model.hpp"
#include "oracles.hpp"

using namespace lumipower;
using namespace lumipower::testing;

namespace {

ModelSpec small_spec(HeadKind head, std::size_t h = 64, std::size_t w = 64) {
  ModelSpec s = ModelSpec::mini();
  s.head = head;
  s.input_height = h;
  s.input_width = w;
  return s;
}

void randomize_parameters(PowerModel& model, std::mt19937_64& rng, double spread) {
  std::normal_distribution<double> dist(0.0, spread);
  for (auto& p : model.parameters())
    for (double& v : p.tensor.mutable_values()) v += dist(rng);
}

}  // namespace

TEST(ModelSpec, PresetsAndMapGeometry) {
  EXPECT_EQ(ModelSpec::full().embedding_dim(), 512u);
  EXPECT_EQ(ModelSpec::mini().embedding_dim(), 64u);
  ModelSpec full = ModelSpec::full();
  full.input_height = 192;
  full.input_width = 384;
  EXPECT_EQ(full.output_stride(), 32u);
  EXPECT_EQ(full.map_height(), 192u / 32);
  EXPECT_EQ(full.map_width(), 384u / 32);
  EXPECT_EQ(ModelSpec::parse(full.serialize()), full);
  full.map_scale = MapScale::sum;
  EXPECT_EQ(ModelSpec::parse(full.serialize()), full);
  EXPECT_THROW(ModelSpec::parse("bogus=1\n"), DataError);
  EXPECT_THROW(ModelSpec::parse("map_scale=max\n"), DataError);
}

TEST(CountParameters, Deterministic) {
  EXPECT_EQ(count_parameters(ModelSpec::mini()), count_parameters(ModelSpec::mini()));
  PowerModel model(ModelSpec::mini(), 1);
  std::size_t actual = 0;
  for (const auto& p : model.parameters()) actual += p.tensor.numel();
  EXPECT_EQ(actual, count_parameters(ModelSpec::mini()));
}

TEST(CountParameters, FullPresetMatchesPerLayerAudit) {
  // Hand-derived ResNet18 backbone with a single-channel stem:
  //   stem   64*1*49 + 2*64                                          =     3,264
  //   stage1 2 * (2*64*64*9 + 4*64)                                  =   147,968
  //   stage2 (128*64*9 + 128*128*9 + 4*128 + 128*64 + 2*128)
  //          + (2*128*128*9 + 4*128)                                 =   525,568
  //   stage3 analogous with 256/128                                  = 2,099,712
  //   stage4 analogous with 512/256                                  = 8,393,728
  const std::size_t backbone = 3264 + 147968 + 525568 + 2099712 + 8393728;
  EXPECT_EQ(backbone, 11170240u);
  ModelSpec emb = ModelSpec::full();
  emb.head = HeadKind::embedding_linear;
  EXPECT_EQ(count_parameters(emb), backbone + 512);
  ModelSpec map = ModelSpec::full();
  map.head = HeadKind::regression_map;
  EXPECT_EQ(count_parameters(map), backbone + 512 + 1);
  map.map_bias = false;
  EXPECT_EQ(count_parameters(map), backbone + 512);
}

TEST(CountParameters, EmbeddingHeadAddsExactlyD) {
  ModelSpec emb = ModelSpec::mini();
  emb.head = HeadKind::embedding_linear;
  ModelSpec map = emb;
  map.head = HeadKind::regression_map;
  map.map_bias = false;
  // Both heads carry D weights; only the embedding head is W_fc in R^{1xD}.
  EXPECT_EQ(count_parameters(emb), count_parameters(map));
  const auto layout = parameter_layout(emb);
  EXPECT_EQ(layout.back().name, "head.fc.weight");
  EXPECT_EQ(layout.back().shape, (Shape{1, 64}));
}

TEST(ForwardEmbedding, ZeroWeightsGiveZero) {
  PowerModel model(small_spec(HeadKind::embedding_linear), 3);
  for (double& v : model.parameter("head.fc.weight").mutable_values()) v = 0.0;
  std::mt19937_64 rng(1);
  auto out = model.forward_embedding(random_tensor({2, 1, 64, 64}, rng, -1, 1, false), Mode::eval);
  for (double v : out.y_hat.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(out.embedding.shape(), (Shape{2, 64}));
}

TEST(ForwardEmbedding, EqualsManualDotProduct) {
  PowerModel model(small_spec(HeadKind::embedding_linear), 4);
  std::mt19937_64 rng(2);
  auto out = model.forward_embedding(random_tensor({3, 1, 64, 64}, rng, -1, 1, false), Mode::train);
  const auto w = model.parameter("head.fc.weight").values();
  for (std::size_t n = 0; n < 3; ++n) {
    double acc = 0.0;
    for (std::size_t d = 0; d < 64; ++d) acc += out.embedding.at(n * 64 + d) * w[d];
    EXPECT_EQ(out.y_hat.at(n), acc);
  }
}

TEST(ForwardMap, ZeroProjectionGivesNoLoss) {
  PowerModel model(small_spec(HeadKind::regression_map), 5);
  for (double& v : model.parameter("head.map.weight").mutable_values()) v = 0.0;
  std::mt19937_64 rng(3);
  auto out = model.forward_map(random_tensor({2, 1, 64, 64}, rng, -1, 1, false), Mode::eval);
  for (double v : out.map.values()) EXPECT_EQ(v, 0.0);
  for (double v : out.y_hat.values()) EXPECT_EQ(v, 1.0);
}

TEST(ForwardMap, IdentityNonpositivityAndUpperBound) {
  std::mt19937_64 rng(6);
  for (MapNegation neg : {MapNegation::relu, MapNegation::abs}) {
    ModelSpec spec = small_spec(HeadKind::regression_map, 64, 96);
    spec.negation = neg;
    PowerModel model(spec, 7);
    for (int trial = 0; trial < 5; ++trial) {
      randomize_parameters(model, rng, 0.05);
      auto out = model.forward_map(random_tensor({2, 1, 64, 96}, rng, -2, 2, false), Mode::train);
      ASSERT_EQ(out.map.shape(), (Shape{2, 1, 2, 3}));
      const auto maps = split_maps(out.map);
      for (std::size_t n = 0; n < 2; ++n) {
        for (double v : maps[n].values) EXPECT_LE(v, 0.0);
        EXPECT_LE(out.y_hat.at(n), 1.0);
        EXPECT_EQ(out.y_hat.at(n), 1.0 + mpfr_sum(maps[n].values));
      }
    }
  }
}

TEST(ForwardMap, DiagnosticModeReproducesPooledLinearHead) {
  std::mt19937_64 rng(8);
  ModelSpec emb_spec = small_spec(HeadKind::embedding_linear, 64, 96);
  for (MapScale scaling : {MapScale::mean, MapScale::sum}) {
    ModelSpec map_spec = emb_spec;
    map_spec.head = HeadKind::regression_map;
    map_spec.negation = MapNegation::none;
    map_spec.map_bias = false;
    map_spec.map_scale = scaling;
    const double cells = static_cast<double>(map_spec.map_height() * map_spec.map_width());
    for (int trial = 0; trial < 3; ++trial) {
      PowerModel emb(emb_spec, 100 + trial);
      PowerModel map(map_spec, 100 + trial);
      const auto w = emb.parameter("head.fc.weight").values();
      auto mw = map.parameter("head.map.weight").mutable_values();
      std::copy(w.begin(), w.end(), mw.begin());
      Tensor x = random_tensor({2, 1, 64, 96}, rng, -1, 1, false);
      auto a = emb.forward_embedding(x, Mode::eval);
      auto b = map.forward_map(x, Mode::eval);
      for (std::size_t n = 0; n < 2; ++n) {
        const double pooled = (b.y_hat.at(n) - 1.0) / (scaling == MapScale::sum ? cells : 1.0);
        EXPECT_NEAR(pooled, a.y_hat.at(n), 1e-12 * std::max(1.0, std::fabs(a.y_hat.at(n))));
      }
    }
  }
}

TEST(ForwardMap, GradientsFlowToEveryParameter) {
  PowerModel model(small_spec(HeadKind::regression_map), 9);
  // Positive bias keeps the relu active so the head passes gradient.
  model.parameter("head.map.bias").mutable_values()[0] = 0.05;
  std::mt19937_64 rng(4);
  Tensor loss = mean(model.predict(random_tensor({2, 1, 64, 64}, rng, -1, 1, false), Mode::train));
  loss.backward();
  for (const auto& p : model.parameters()) {
    ASSERT_TRUE(p.tensor.has_grad()) << p.name;
    double norm = 0.0;
    for (double g : p.tensor.grad()) norm += g * g;
    EXPECT_GT(norm, 0.0) << p.name;
  }
}

TEST(PowerModel, RejectsWrongInputShapeAndHead) {
  PowerModel model(small_spec(HeadKind::regression_map), 10);
  EXPECT_THROW(model.predict(Tensor::zeros({1, 1, 32, 64}), Mode::eval), ShapeError);
  EXPECT_THROW(model.predict(Tensor::zeros({1, 3, 64, 64}), Mode::eval), ShapeError);
  EXPECT_THROW(model.forward_embedding(Tensor::zeros({1, 1, 64, 64}), Mode::eval), Error);
}

TEST(PowerModel, LoadStateReportsMismatches) {
  PowerModel mini(small_spec(HeadKind::regression_map), 11);
  ModelSpec wide = small_spec(HeadKind::regression_map);
  wide.stage_widths = {16, 16, 32, 64};
  PowerModel other(wide, 12);
  try {
    mini.load_state(other.state());
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("stem.conv.weight"), std::string::npos);
  }
  PowerModel same(small_spec(HeadKind::regression_map), 13);
  same.load_state(mini.state());
  EXPECT_EQ(same.parameter("stem.conv.weight").values()[5], mini.parameter("stem.conv.weight").values()[5]);
}

TEST(PowerModel, SameSeedSameInitialization) {
  PowerModel a(ModelSpec::mini(), 42), b(ModelSpec::mini(), 42);
  const auto sa = a.state(), sb = b.state();
  for (std::size_t i = 0; i < sa.size(); ++i) {
    const auto va = sa[i].tensor.values(), vb = sb[i].tensor.values();
    EXPECT_TRUE(std::equal(va.begin(), va.end(), vb.begin())) << sa[i].name;
  }
}

TEST(PowerModel, RecalibrationAveragesBatchStatistics) {
  PowerModel model(small_spec(HeadKind::regression_map), 5);
  std::mt19937_64 rng(5);
  randomize_parameters(model, rng, 0.05);
  std::normal_distribution<double> z;
  std::vector<Tensor> batches;
  for (int b = 0; b < 2; ++b) {
    std::vector<double> v(4 * 64 * 64);
    for (double& x : v) x = z(rng) + b;
    batches.emplace_back(Shape{4, 1, 64, 64}, std::move(v));
  }
  auto stem_mean = [&](PowerModel& m) {
    for (const auto& t : m.state())
      if (t.name == "stem.bn.running_mean") return std::vector<double>(t.tensor.values().begin(), t.tensor.values().end());
    return std::vector<double>{};
  };
  NoGradGuard guard;
  auto channel_means = [&](const Tensor& x) {
    const Tensor f = conv2d(x, model.parameter("stem.conv.weight"), 2, 3);
    const std::size_t n = f.dim(0), c = f.dim(1), hw = f.dim(2) * f.dim(3);
    std::vector<double> out(c, 0.0);
    const auto v = f.values();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) out[ch] += v[(i * c + ch) * hw + p];
    for (double& m : out) m /= static_cast<double>(n * hw);
    return out;
  };
  const auto m0 = channel_means(batches[0]), m1 = channel_means(batches[1]);
  model.recalibrate_batchnorm(1, [&](std::size_t) { return batches[0]; });
  const auto single = stem_mean(model);
  ASSERT_EQ(single.size(), m0.size());
  for (std::size_t c = 0; c < m0.size(); ++c) EXPECT_NEAR(single[c], m0[c], 1e-12 * (1 + std::abs(m0[c])));

  model.recalibrate_batchnorm(2, [&](std::size_t k) { return batches[k]; });
  const auto forward = stem_mean(model);
  model.recalibrate_batchnorm(2, [&](std::size_t k) { return batches[1 - k]; });
  const auto backward = stem_mean(model);
  ASSERT_EQ(forward.size(), backward.size());
  ASSERT_FALSE(forward.empty());
  for (std::size_t c = 0; c < forward.size(); ++c) {
    EXPECT_NEAR(forward[c], backward[c], 1e-12 * (1 + std::abs(forward[c])));
    EXPECT_NEAR(forward[c], 0.5 * (m0[c] + m1[c]), 1e-12 * (1 + std::abs(forward[c])));
  }
}
