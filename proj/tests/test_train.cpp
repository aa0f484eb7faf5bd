#include <gtest/gtest.h>

#include <cmath>

#include "bdu/gradcheck.hpp"
#include "bdu/measurement.hpp"
#include "bdu/phantom.hpp"
#include "bdu/train.hpp"
#include "test_util.hpp"

using namespace bdu;
using bdu::testing::random_tensor;

namespace {

ModelConfig small_scalar_config(double rate) {
  ModelConfig c;
  c.op = ScalarDesc{0.5};
  c.f.iterations = 2;
  c.f.width = 4;
  c.f.mlp_hidden_layers = 1;
  c.var.base_channels = 4;
  c.var.mlp_hidden_layers = 1;
  c.dropout_rate = rate;
  c.init_seed = 3;
  return c;
}

Dataset scalar_data(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = standard_normal(rng);
    d.push_back(Tensor({1}, 0.5 * s + 0.1 * standard_normal(rng)), Tensor({1}, s));
  }
  return d;
}

// 8x8 piecewise-constant images (2x decimated 16x16 phantoms) under a 30%
// Fourier mask at 30 dB.
Dataset small_images(const LinearOperator& op, std::size_t n) {
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor p = make_phantom(PhantomKind::PiecewiseConstBlocks, 16, i);
    Tensor z({2, 8, 8});
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 8; ++c) z[r * 8 + c] = p[(2 * r) * 16 + 2 * c];
    d.push_back(add_noise_snr(op.apply(z), 30.0, i).measurement, z);
  }
  return d;
}

ModelConfig small_image_config() {
  ModelConfig c;
  c.op = FourierMaskDesc{8, 8, 0.3, 0.04, 1};
  c.f.iterations = 3;
  c.f.width = 8;
  c.var.base_channels = 4;
  c.dropout_rate = 0.1;
  return c;
}

}  // namespace

TEST(WeightDecay, Coefficient) {
  EXPECT_NEAR(weight_decay_coefficient(0.1, 500), 9.0e-4, 1e-18);
  EXPECT_DOUBLE_EQ(weight_decay_coefficient(0.0, 1), 0.5);
  EXPECT_DOUBLE_EQ(weight_decay_coefficient(0.5, 100), 2.5e-3);
  EXPECT_THROW(weight_decay_coefficient(1.0, 10), ConfigError);
  EXPECT_THROW(weight_decay_coefficient(0.1, 0), ConfigError);
}

TEST(Loss, ClosedForms) {
  auto nll = [&](double f, double logvar, double y) {
    ad::Tape t;
    return ad::gaussian_nll(t.constant(Tensor({1, 1}, f)), t.constant(Tensor({1, 1}, logvar)), Tensor({1, 1}, y))
        .value()[0];
  };
  EXPECT_EQ(nll(0.3, 0.0, 0.3), 0.0);
  EXPECT_DOUBLE_EQ(nll(0.0, 0.0, 1.0), 0.5);
  // 1/2 log v + 1/(2v) has its minimum at v = 1 for a unit residual
  for (double lv : {-0.2, -0.05, 0.05, 0.2}) EXPECT_GT(nll(0.0, lv, 1.0), 0.5);
  ad::Tape tape;
  const Tensor zero({1, 1});
  EXPECT_EQ(ad::mse(tape.constant(zero), zero).value()[0], 0.0);
}

TEST(Loss, UnitVarianceNllIsScaledSquaredError) {
  ModelConfig c = small_image_config();
  c.covariance = CovarianceMode::fixed_scalar(1.0);
  LikelihoodModel model(c);
  const Dataset d = small_images(model.op(), 3);
  Tensor m({3, 2, model.op().output_shape()[1]}), s({3, 2, 8, 8});
  for (std::size_t i = 0; i < 3; ++i) {
    m.set_slice0(i, d.measurements[i]);
    s.set_slice0(i, d.targets[i]);
  }
  Rng r1(1), r2(1);
  const double nll = nll_batch_loss(model, m, s, r1, LossKind::Nll);
  const double mse = nll_batch_loss(model, m, s, r2, LossKind::Mse);
  EXPECT_NEAR(nll, 0.5 * mse * 128.0, 1e-10);
}

TEST(Train, ZeroLearningRateKeepsWeights) {
  LikelihoodModel model(small_scalar_config(0.2));
  const auto before = model.snapshot();
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.epochs = 1;
  cfg.batch_size = 5;
  train(model, scalar_data(20, 1), Dataset{}, cfg);
  const auto after = model.snapshot();
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i].second, after[i].second) << before[i].first;
}

TEST(Train, DeterministicForSeed) {
  auto run = [] {
    LikelihoodModel model(small_scalar_config(0.2));
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.epochs = 5;
    cfg.batch_size = 4;
    cfg.seed = 9;
    auto res = train(model, scalar_data(30, 2), cfg);
    return std::make_pair(res.final_state, res.history.records.back().mean_loss);
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.second, b.second);
  for (std::size_t i = 0; i < a.first.size(); ++i) EXPECT_EQ(a.first[i].second, b.first[i].second);
}

TEST(Train, GradientsOfFullObjective) {
  LikelihoodModel model(small_scalar_config(0.3));
  auto params = model.parameters();
  std::size_t count = 0;
  for (auto* p : params) count += p->value.size();
  ASSERT_LE(count, 200u);

  const Dataset d = scalar_data(6, 4);
  Tensor m({6, 1}), s({6, 1}), s0({6, 1});
  for (std::size_t i = 0; i < 6; ++i) {
    m[i] = d.measurements[i][0];
    s[i] = d.targets[i][0];
    s0[i] = m[i] / 0.5;
  }
  std::vector<Tensor> masks;
  Rng rng(5);
  {
    ad::Tape tape;
    ForwardContext ctx{Mode::Train, DropoutSource(&rng, &masks)};
    model.forward(tape, m, s0, ctx);
  }
  const auto rep = grad_check(params, [&](ad::Tape& tape) {
    ForwardContext ctx{Mode::Train, DropoutSource::replay(masks)};
    return detail::batch_loss(model.forward(tape, m, s0, ctx), s, LossKind::Nll);
  });
  EXPECT_TRUE(rep.passed) << rep.worst << " " << rep.max_rel_error;
}

TEST(Train, ImageLossHalvesInThirtyEpochs) {
  LikelihoodModel model(small_image_config());
  const Dataset d = small_images(model.op(), 50);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 5;
  cfg.seed = 1;
  const auto res = train(model, d, Dataset{}, cfg);
  const double first = res.history.records.front().mean_loss, last = res.history.records.back().mean_loss;
  EXPECT_LE(last, first - 0.5 * std::abs(first)) << first << " -> " << last;
}

TEST(Train, BestStateTracksValidation) {
  LikelihoodModel model(small_scalar_config(0.1));
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 8;
  const auto [tr, val] = split_validation(scalar_data(40, 6), 0.2, 0);
  EXPECT_EQ(val.size(), 8u);
  const auto res = train(model, tr, val, cfg);
  ASSERT_EQ(res.history.records.size(), 6u);
  const auto& recs = res.history.records;
  const auto best = std::min_element(recs.begin(), recs.end(),
                                     [](const auto& a, const auto& b) { return a.val_nll < b.val_nll; });
  EXPECT_EQ(res.history.best_epoch, best->epoch);
  for (const auto& r : recs) EXPECT_TRUE(std::isfinite(r.val_nll));
}

TEST(Train, RejectsBadConfig) {
  LikelihoodModel model(small_scalar_config(0.1));
  TrainConfig cfg;
  cfg.batch_size = 50;
  EXPECT_THROW(train(model, scalar_data(10, 1), Dataset{}, cfg), ConfigError);
  cfg.batch_size = 2;
  cfg.learning_rate = -1.0;
  EXPECT_THROW(train(model, scalar_data(10, 1), Dataset{}, cfg), ConfigError);
}

TEST(Train, DivergenceRestoresLastGoodWeights) {
  LikelihoodModel model(small_scalar_config(0.0));
  Dataset d = scalar_data(8, 1);
  d.targets[5] = Tensor({1}, std::numeric_limits<double>::infinity());
  const auto before = model.snapshot();
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.epochs = 3;
  try {
    train(model, d, Dataset{}, cfg);
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
  }
  const auto after = model.snapshot();
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i].second, after[i].second);
}

TEST(Variants, ConfigurationsAndChecks) {
  const ModelConfig base = small_image_config();
  for (auto v : {Variant::Proposed, Variant::Poam, Variant::Poem, Variant::Pum, Variant::PumWoBn}) {
    EXPECT_NO_THROW(check_variant(variant_model_config(base, v), v)) << variant_name(v);
    EXPECT_EQ(parse_variant(variant_name(v)), v);
  }
  EXPECT_THROW(check_variant(base, Variant::Poam), ConfigError);
  EXPECT_THROW(check_variant(base, Variant::Poem), ConfigError);
  EXPECT_THROW(check_variant(base, Variant::Pum), ConfigError);
  ModelConfig bn = variant_model_config(base, Variant::Pum);
  EXPECT_THROW(check_variant(bn, Variant::PumWoBn), ConfigError);
  EXPECT_THROW(parse_variant("nonsense"), ConfigError);
  EXPECT_EQ(variant_loss(Variant::Pum), LossKind::Mse);
  EXPECT_EQ(variant_loss(Variant::Poem), LossKind::Nll);

  LikelihoodModel model(variant_model_config(base, Variant::PumWoBn));
  const Dataset d = small_images(model.op(), 2);
  Tensor m({2, 2, model.op().output_shape()[1]}), s({2, 2, 8, 8});
  for (std::size_t i = 0; i < 2; ++i) {
    m.set_slice0(i, d.measurements[i]);
    s.set_slice0(i, unrolled_forward(model, d.measurements[i], Mode::Eval));
  }
  Rng rng(1);
  EXPECT_EQ(nll_batch_loss(model, m, s, rng, LossKind::Mse), 0.0);

  LikelihoodModel wrong(base);
  TrainConfig cfg;
  cfg.batch_size = 2;
  EXPECT_THROW(train_variant(wrong, d, Dataset{}, cfg, Variant::Pum), ConfigError);
}
