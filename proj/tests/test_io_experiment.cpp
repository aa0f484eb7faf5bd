#include <gtest/gtest.h>

#include <cmath>

#include "bdu/experiment.hpp"
#include "test_util.hpp"

using namespace bdu;
using bdu::testing::random_tensor;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("bdu_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.image_size = 16;
  c.n_train = 8;
  c.n_test = 2;
  c.iterations = 1;
  c.block_width = 4;
  c.var_base_channels = 4;
  c.epochs = 1;
  c.batch_size = 2;
  c.T = 3;
  c.variants = {"zf_or_fbp", "proposed"};
  c.validation_fraction = 0.25;
  return c;
}

}  // namespace

TEST(Npy, RoundTrip) {
  const fs::path dir = scratch_dir("npy");
  Rng rng(1);
  const Tensor t = random_tensor({3, 4, 5}, rng);
  save_npy(dir / "a.npy", t);
  const Tensor back = load_npy(dir / "a.npy");
  EXPECT_EQ(back, t);
  const std::string bytes = npy_bytes(t);
  EXPECT_EQ(bytes.substr(0, 6), "\x93NUMPY");
  EXPECT_EQ(bytes.size() - 3 * 4 * 5 * 8, 128u);  // header padded to a multiple of 64
  EXPECT_NE(bytes.find("'descr': '<f8'"), std::string::npos);
  EXPECT_NE(bytes.find("'shape': (3, 4, 5)"), std::string::npos);

  write_file(dir / "m.npy", npy_bytes_u8({0, 1, 1, 0}, {2, 2}));
  const Tensor m = load_npy(dir / "m.npy");
  EXPECT_EQ(m.shape(), (Shape{2, 2}));
  EXPECT_EQ(m[1], 1.0);

  write_file(dir / "bad.npy", "not an array");
  EXPECT_THROW(load_npy(dir / "bad.npy"), IoError);
  EXPECT_THROW(load_npy(dir / "missing.npy"), IoError);
  fs::remove_all(dir);
}

TEST(Hash, Fnv1a) {
  EXPECT_EQ(content_hash(""), "fnv1a64:cbf29ce484222325");
  EXPECT_EQ(content_hash("a"), "fnv1a64:af63dc4c8601ec8c");
}

TEST(Pgm, Header) {
  Tensor img({2, 3});
  img[5] = 2.0;
  const std::string b = pgm_bytes(img);
  EXPECT_EQ(b.substr(0, 11), "P5\n3 2\n255\n");
  EXPECT_EQ(static_cast<unsigned char>(b.back()), 255);
  EXPECT_EQ(b.size(), 11u + 6u);
}

TEST(Json, OperatorAndModelRoundTrip) {
  const std::vector<OperatorDesc> ops{FourierMaskDesc{16, 16, 0.2, 0.04, 7}, RadonDesc{32, 36, 46}, ScalarDesc{0.5},
                                      DenseDesc{{1, 2, 2}, 3, std::vector<double>(12, 0.5)}};
  for (const auto& d : ops) EXPECT_EQ(operator_from_json(operator_to_json(d)), d);
  ModelConfig c;
  c.op = ops[0];
  c.f.batch_norm = true;
  c.covariance = CovarianceMode::fixed_scalar(0.1);
  c.dropout_rate = 0.0;
  EXPECT_EQ(model_config_from_json(model_config_to_json(c)), c);
  EXPECT_THROW(operator_from_json(json{{"kind", "wavelet"}}), ConfigError);
}

TEST(Checkpoint, RoundTripAndTamper) {
  const fs::path dir = scratch_dir("ckpt");
  ModelConfig c;
  c.op = FourierMaskDesc{8, 8, 0.5, 0.04, 1};
  c.f.iterations = 2;
  c.f.width = 4;
  c.var.base_channels = 4;
  LikelihoodModel model(c);
  model.log_alpha().value[0] = -0.7;
  save_checkpoint(dir, model);
  LikelihoodModel back = load_checkpoint(dir);
  EXPECT_EQ(back.config(), model.config());
  const auto a = model.snapshot(), b = back.snapshot();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].second, b[i].second) << a[i].first;
  Rng rng(2);
  const Tensor m = random_tensor(model.op().output_shape(), rng);
  EXPECT_EQ(unrolled_forward(model, m, Mode::Eval), unrolled_forward(back, m, Mode::Eval));

  save_npy(dir / "f.log_alpha.npy", Tensor::scalar(0.0));
  EXPECT_THROW(load_checkpoint(dir), StateError);
  fs::remove_all(dir);
}

TEST(Config, ParseAndRoundTrip) {
  json j = {{"modality", "radon"}, {"image_size", 32}, {"snr_db", "inf"}, {"train", {{"epochs", 3}}}};
  const auto c = experiment_from_json(j);
  EXPECT_TRUE(std::isinf(c.snr_db));
  EXPECT_EQ(c.epochs, 3u);
  EXPECT_DOUBLE_EQ(c.resolved_lr(), 1e-5);
  EXPECT_DOUBLE_EQ(c.resolved_alpha(), 1e-4);
  EXPECT_EQ(experiment_from_json(to_json(c)), c);

  EXPECT_THROW(experiment_from_json(json{{"imagesize", 32}}), ConfigError);
  EXPECT_THROW(experiment_from_json(json{{"modality", "pet"}}), ConfigError);
  EXPECT_THROW(experiment_from_json(json{{"image_size", "big"}}), ConfigError);
  EXPECT_THROW(experiment_from_json(json{{"variants", {"proposed", "magic"}}}), ConfigError);
  EXPECT_THROW(experiment_from_json(json{{"snr_db", "loud"}}), ConfigError);
}

TEST(Simulate, WritesPairsDeterministically) {
  const fs::path a = scratch_dir("sim_a"), b = scratch_dir("sim_b");
  ExperimentConfig c;
  c.n_train = 8;
  c.n_test = 2;
  const auto d = cmd_simulate(c, a, false);
  cmd_simulate(c, b, false);
  std::size_t pairs = 0;
  for (const auto& sub : {"train", "test"})
    for (const auto& e : fs::directory_iterator(a / "data" / sub))
      if (e.path().string().find("_m.npy") != std::string::npos) ++pairs;
  EXPECT_EQ(pairs, 10u);
  EXPECT_TRUE(fs::exists(a / "data" / "mask.npy"));
  EXPECT_EQ(load_npy(a / "data/train/0000_m.npy").shape(), (Shape{2, 205}));  // ceil(0.2 * 1024)
  const json ma = json::parse(read_file(a / "manifest.json")), mb = json::parse(read_file(b / "manifest.json"));
  EXPECT_EQ(ma, mb);
  EXPECT_TRUE(verify_manifest(a).ok());
  EXPECT_EQ(read_dataset(a / "data/train").size(), 8u);
  EXPECT_EQ(read_dataset(a / "data/test").targets[1], d.test.targets[1]);

  EXPECT_THROW(cmd_simulate(c, a, false), IoError);
  EXPECT_NO_THROW(cmd_simulate(c, a, true));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Simulate, NoiselessOption) {
  ExperimentConfig c;
  c.n_train = 2;
  c.n_test = 1;
  c.snr_db = std::numeric_limits<double>::infinity();
  const auto d = simulate(c);
  EXPECT_EQ(d.train.measurements[0], d.op.apply(d.train.targets[0]));
  c.snr_db = 20.0;
  const auto n = simulate(c);
  EXPECT_NEAR(snr_db(d.train.measurements[1], n.train.measurements[1] - d.train.measurements[1]), 20.0, 1e-9);
}

TEST(Manifest, DetectsDriftAndMissing) {
  const fs::path dir = scratch_dir("man");
  fs::create_directories(dir);
  Manifest man(dir);
  man.text("a.txt", "hello");
  man.npy("sub/b.npy", Tensor({2}, 1.0));
  man.save();
  auto r = verify_manifest(dir);
  EXPECT_TRUE(r.ok());
  EXPECT_EQ(r.checked, 2u);
  write_file(dir / "a.txt", "hullo");
  fs::remove(dir / "sub/b.npy");
  r = verify_manifest(dir);
  EXPECT_EQ(r.drifted, std::vector<std::string>{"a.txt"});
  EXPECT_EQ(r.missing, std::vector<std::string>{"sub/b.npy"});
  fs::remove_all(dir);
}

TEST(DirLock, ExcludesSecondWriter) {
  const fs::path dir = scratch_dir("lock");
  {
    DirLock first(dir);
    EXPECT_THROW(DirLock second(dir), IoError);
  }
  EXPECT_NO_THROW(DirLock again(dir));
  fs::remove_all(dir);
}

TEST(Pipeline, DryRunComputesNothing) {
  const fs::path dir = scratch_dir("dry");
  PipelineOptions opt;
  opt.dry_run = true;
  const json rep = cmd_pipeline(tiny_config(), dir, opt);
  EXPECT_TRUE(rep["dry_run"].get<bool>());
  EXPECT_TRUE(fs::exists(dir / "resolved_config.json"));
  EXPECT_FALSE(fs::exists(dir / "data"));
  EXPECT_EQ(experiment_from_json(json::parse(read_file(dir / "resolved_config.json"))), [] {
    auto c = tiny_config();
    c.alpha_init = c.resolved_alpha();
    c.learning_rate = c.resolved_lr();
    return c;
  }());
  fs::remove_all(dir);
}

TEST(Pipeline, TinyRunWritesArtifacts) {
  const fs::path dir = scratch_dir("pipe");
  const json rep = cmd_pipeline(tiny_config(), dir);
  ASSERT_EQ(rep["status"], "ok") << rep.dump(2);
  EXPECT_EQ(rep["ssim"].size(), 2u);
  EXPECT_TRUE(fs::exists(dir / "report.json"));
  EXPECT_TRUE(fs::exists(dir / "models/proposed/best/manifest.json"));
  EXPECT_TRUE(fs::exists(dir / "predictions/proposed/0001_epistemic_map.npy"));
  EXPECT_TRUE(rep["calibration"]["proposed"].contains("pre"));
  EXPECT_TRUE(verify_manifest(dir).ok());
  const json man = json::parse(read_file(dir / "manifest.json"));
  EXPECT_TRUE(man["files"].contains("models/proposed/best/f.log_alpha.npy"));
  fs::remove_all(dir);
}

TEST(Pipeline, FailureNamesStage) {
  const fs::path dir = scratch_dir("fail");
  auto c = tiny_config();
  c.batch_size = 50;
  const json rep = cmd_pipeline(c, dir);
  EXPECT_EQ(rep["status"], "failed");
  EXPECT_EQ(rep["failed_stage"], "train:proposed");
  EXPECT_TRUE(fs::exists(dir / "report.json"));
  fs::remove_all(dir);
}

TEST(Abnormal, SizeLimits) {
  auto c = tiny_config();
  LikelihoodModel model(c.model_config());
  const auto none = cmd_abnormal_feature(model, c, 0, 1.0, 0, 4);
  EXPECT_EQ(none.ratio, 1.0);
  const auto sq = cmd_abnormal_feature(model, c, 4, 1.0, 0, 4);
  EXPECT_EQ(sq.phantom[8 * 16 + 8], 1.0);
  EXPECT_GT(sq.mean_epistemic_outside, 0.0);
  EXPECT_THROW(cmd_abnormal_feature(model, c, 17, 1.0, 0, 4), ConfigError);
}
