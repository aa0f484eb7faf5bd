// End-to-end experiments driven by one JSON config: simulation of phantom
// datasets, training, inference, calibration, the toy benchmark and the
// abnormal-feature study. Every random stream derives from the root seed by
// name, and every written file is listed in a manifest with its hash.
#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bdu/calibration.hpp"
#include "bdu/classical.hpp"
#include "bdu/io.hpp"
#include "bdu/measurement.hpp"
#include "bdu/phantom.hpp"
#include "bdu/toy.hpp"

namespace bdu {

struct ExperimentConfig {
  std::string modality = "fourier";  // fourier | radon | toy
  std::size_t image_size = 32;
  double observed_fraction = 0.2;
  double center_fraction = 0.04;
  std::size_t n_views = 36;
  double snr_db = 70.0;  // +inf for noiseless
  std::string phantom_kind = "random_ellipses";
  std::size_t n_train = 50;  // a validation fraction of these is held out
  std::size_t n_test = 10;
  std::uint64_t seed = 0;
  // model
  std::size_t iterations = 5;
  std::size_t block_width = 32;
  std::optional<double> alpha_init;  // default depends on modality
  double dropout_rate = 0.1;
  std::size_t var_base_channels = 16;
  std::size_t var_depth = 2;
  // training
  std::size_t batch_size = 4;
  std::optional<double> learning_rate;  // default depends on modality
  std::size_t epochs = 100;
  double validation_fraction = 0.1;
  // inference and evaluation
  std::size_t T = 100;
  std::size_t calibration_levels = 99;
  std::vector<std::string> variants{"zf_or_fbp", "tv", "proposed"};
  // toy benchmark
  std::size_t toy_epochs = 20000;
  std::size_t toy_batch_size = 100;
  std::size_t toy_T = 100;

  bool operator==(const ExperimentConfig&) const = default;

  double resolved_alpha() const { return alpha_init.value_or(modality == "radon" ? 1e-4 : 1.0); }
  double resolved_lr() const { return learning_rate.value_or(modality == "radon" ? 1e-5 : 1e-4); }

  void validate() const {
    if (modality != "fourier" && modality != "radon" && modality != "toy")
      throw ConfigError("modality must be fourier, radon or toy");
    if (modality == "toy") return;
    if (image_size < 16 || image_size > 128) throw ConfigError("image_size must lie in [16, 128]");
    if (image_size % (std::size_t{1} << var_depth) != 0)
      throw ConfigError("image_size must be divisible by 2^var_depth");
    if (!(observed_fraction > 0 && observed_fraction <= 1)) throw ConfigError("observed_fraction must lie in (0, 1]");
    if (center_fraction < 0 || center_fraction > observed_fraction)
      throw ConfigError("center_fraction must lie in [0, observed_fraction]");
    if (n_views < 1) throw ConfigError("n_views must be positive");
    if (std::isnan(snr_db)) throw ConfigError("snr_db must be a number or inf");
    parse_phantom_kind(phantom_kind);
    if (n_train < 2 || n_test < 1) throw ConfigError("need n_train >= 2 and n_test >= 1");
    if (iterations < 1 || block_width < 1 || var_base_channels < 1) throw ConfigError("model sizes must be positive");
    if (!(resolved_alpha() > 0)) throw ConfigError("alpha_init must be positive");
    if (dropout_rate < 0 || dropout_rate >= 1) throw ConfigError("dropout_rate must lie in [0, 1)");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (!(resolved_lr() >= 0)) throw ConfigError("learning_rate must be non-negative");
    if (validation_fraction <= 0 || validation_fraction >= 1) throw ConfigError("validation_fraction must lie in (0, 1)");
    if (T < 1) throw ConfigError("T must be positive");
    for (const auto& v : variants)
      if (v != "zf_or_fbp" && v != "tv") parse_variant(v);
  }

  OperatorDesc operator_desc() const {
    if (modality == "fourier")
      return FourierMaskDesc{image_size, image_size, observed_fraction, center_fraction, derive_seed(seed, "mask")};
    if (modality == "radon") return RadonDesc{image_size, n_views, 0};
    throw ConfigError("toy modality has no imaging operator");
  }

  ModelConfig model_config() const {
    ModelConfig c;
    c.op = operator_desc();
    c.f.iterations = iterations;
    c.f.alpha_init = resolved_alpha();
    c.f.width = block_width;
    c.var.base_channels = var_base_channels;
    c.var.depth = var_depth;
    c.dropout_rate = dropout_rate;
    c.init_seed = derive_seed(seed, "model");
    return c;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.batch_size = batch_size;
    t.learning_rate = resolved_lr();
    t.epochs = epochs;
    t.validation_fraction = validation_fraction;
    t.seed = derive_seed(seed, "train");
    return t;
  }
};

inline json to_json(const ExperimentConfig& c) {
  json j = {{"modality", c.modality},
            {"image_size", c.image_size},
            {"observed_fraction", c.observed_fraction},
            {"center_fraction", c.center_fraction},
            {"n_views", c.n_views},
            {"snr_db", std::isinf(c.snr_db) ? json("inf") : json(c.snr_db)},
            {"phantom_kind", c.phantom_kind},
            {"n_train", c.n_train},
            {"n_test", c.n_test},
            {"seed", c.seed},
            {"model",
             {{"iterations", c.iterations},
              {"block_width", c.block_width},
              {"alpha_init", c.resolved_alpha()},
              {"dropout_rate", c.dropout_rate},
              {"var_base_channels", c.var_base_channels},
              {"var_depth", c.var_depth}}},
            {"train",
             {{"batch_size", c.batch_size},
              {"learning_rate", c.resolved_lr()},
              {"epochs", c.epochs},
              {"validation_fraction", c.validation_fraction}}},
            {"inference", {{"T", c.T}}},
            {"calibration", {{"levels", c.calibration_levels}}},
            {"variants", c.variants},
            {"toy", {{"epochs", c.toy_epochs}, {"batch_size", c.toy_batch_size}, {"T", c.toy_T}}}};
  return j;
}

inline ExperimentConfig experiment_from_json(const json& j) {
  static const std::vector<std::string> known{"modality", "image_size", "observed_fraction", "center_fraction",
                                              "n_views",  "snr_db",     "phantom_kind",      "n_train",
                                              "n_test",   "seed",       "model",             "train",
                                              "inference", "calibration", "variants",        "toy"};
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError("unknown config key '" + it.key() + "'");
  ExperimentConfig c;
  try {
    c.modality = j.value("modality", c.modality);
    c.image_size = j.value("image_size", c.image_size);
    c.observed_fraction = j.value("observed_fraction", c.observed_fraction);
    c.center_fraction = j.value("center_fraction", c.center_fraction);
    c.n_views = j.value("n_views", c.n_views);
    if (j.contains("snr_db")) {
      const auto& s = j["snr_db"];
      if (s.is_string()) {
        if (s != "inf") throw ConfigError("snr_db string must be \"inf\"");
        c.snr_db = std::numeric_limits<double>::infinity();
      } else {
        c.snr_db = s.get<double>();
      }
    }
    c.phantom_kind = j.value("phantom_kind", c.phantom_kind);
    c.n_train = j.value("n_train", c.n_train);
    c.n_test = j.value("n_test", c.n_test);
    c.seed = j.value("seed", c.seed);
    if (j.contains("model")) {
      const auto& m = j["model"];
      c.iterations = m.value("iterations", c.iterations);
      c.block_width = m.value("block_width", c.block_width);
      if (m.contains("alpha_init")) c.alpha_init = m["alpha_init"].get<double>();
      c.dropout_rate = m.value("dropout_rate", c.dropout_rate);
      c.var_base_channels = m.value("var_base_channels", c.var_base_channels);
      c.var_depth = m.value("var_depth", c.var_depth);
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      c.batch_size = t.value("batch_size", c.batch_size);
      if (t.contains("learning_rate")) c.learning_rate = t["learning_rate"].get<double>();
      c.epochs = t.value("epochs", c.epochs);
      c.validation_fraction = t.value("validation_fraction", c.validation_fraction);
    }
    if (j.contains("inference")) c.T = j["inference"].value("T", c.T);
    if (j.contains("calibration")) c.calibration_levels = j["calibration"].value("levels", c.calibration_levels);
    if (j.contains("variants")) c.variants = j["variants"].get<std::vector<std::string>>();
    if (j.contains("toy")) {
      const auto& t = j["toy"];
      c.toy_epochs = t.value("epochs", c.toy_epochs);
      c.toy_batch_size = t.value("batch_size", c.toy_batch_size);
      c.toy_T = t.value("T", c.toy_T);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  // Resolve modality-dependent defaults so the written config is explicit.
  c.alpha_init = c.resolved_alpha();
  c.learning_rate = c.resolved_lr();
  return c;
}

// ---- output directories --------------------------------------------------------

// Single-writer guard: an exclusive lock file inside the output directory.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) throw IoError("output directory " + dir.string() + " is locked by another writer (" + path_.string() + ")");
  }
  ~DirLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      std::error_code ec;
      fs::remove(path_, ec);
    }
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

inline void prepare_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw IoError(dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw IoError("output directory " + dir.string() + " is not empty; pass --force to overwrite");
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().filename() != ".lock") fs::remove_all(e.path());
  }
  fs::create_directories(dir);
}

// Records written files (relative paths) with their content hashes.
class Manifest {
 public:
  explicit Manifest(fs::path root) : root_(std::move(root)) {}

  void write(const std::string& rel, const std::string& bytes) {
    write_file(root_ / rel, bytes);
    files_[rel] = content_hash(bytes);
  }
  void npy(const std::string& rel, const Tensor& t) { write(rel, npy_bytes(t)); }
  void text(const std::string& rel, const std::string& s) { write(rel, s); }
  // Adds every file already present under `rel_dir`.
  void record_tree(const std::string& rel_dir) {
    for (const auto& e : fs::recursive_directory_iterator(root_ / rel_dir))
      if (e.is_regular_file()) files_[fs::relative(e.path(), root_).generic_string()] = file_hash(e.path());
  }

  json to_json() const {
    json f = json::object();
    for (const auto& [k, v] : files_) f[k] = v;
    return {{"format", "bdu-manifest/1"}, {"files", f}};
  }
  void save(const std::string& rel = "manifest.json") const { write_file(root_ / rel, to_json().dump(2) + "\n"); }

 private:
  fs::path root_;
  std::map<std::string, std::string> files_;
};

struct VerifyResult {
  std::size_t checked = 0;
  std::vector<std::string> drifted;
  std::vector<std::string> missing;
  bool ok() const { return drifted.empty() && missing.empty(); }
};

inline VerifyResult verify_manifest(const fs::path& dir, const std::string& rel = "manifest.json") {
  const json m = json::parse(read_file(dir / rel));
  VerifyResult r;
  for (auto it = m.at("files").begin(); it != m.at("files").end(); ++it) {
    ++r.checked;
    const fs::path p = dir / it.key();
    if (!fs::exists(p))
      r.missing.push_back(it.key());
    else if (file_hash(p) != it.value().get<std::string>())
      r.drifted.push_back(it.key());
  }
  return r;
}

// ---- simulation ------------------------------------------------------------------

// Lifts a real (H, W) phantom into the operator's image layout.
inline Tensor lift_image(const Tensor& phantom, const Shape& image_shape) {
  if (image_shape.size() != 3 || image_shape[1] * image_shape[2] != phantom.size())
    throw DimensionError("cannot lift phantom into " + shape_str(image_shape));
  Tensor out(image_shape);
  std::copy_n(phantom.data(), phantom.size(), out.data());  // channel 0; imaginary channel stays 0
  return out;
}

struct SimulatedData {
  LinearOperator op;
  Dataset train;  // includes the validation pairs; split by the train stage
  Dataset test;
};

inline SimulatedData simulate(const ExperimentConfig& c) {
  c.validate();
  SimulatedData d;
  d.op = make_operator(c.operator_desc());
  const PhantomKind kind = parse_phantom_kind(c.phantom_kind);
  const std::uint64_t phantom_root = derive_seed(c.seed, "phantom");
  const std::uint64_t noise_root = derive_seed(c.seed, "noise");
  for (std::size_t i = 0; i < c.n_train + c.n_test; ++i) {
    const Tensor s = lift_image(make_phantom(kind, c.image_size, derive_seed(phantom_root, i)), d.op.input_shape());
    const Tensor m = add_noise_snr(d.op.apply(s), c.snr_db, derive_seed(noise_root, i)).measurement;
    (i < c.n_train ? d.train : d.test).push_back(m, s);
  }
  return d;
}

inline std::string example_name(std::size_t i) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return buf;
}

inline void write_dataset(Manifest& man, const std::string& prefix, const Dataset& d) {
  for (std::size_t i = 0; i < d.size(); ++i) {
    man.npy(prefix + "/" + example_name(i) + "_m.npy", d.measurements[i]);
    man.npy(prefix + "/" + example_name(i) + "_s.npy", d.targets[i]);
  }
}

inline Dataset read_dataset(const fs::path& dir) {
  Dataset d;
  for (std::size_t i = 0;; ++i) {
    const fs::path m = dir / (example_name(i) + "_m.npy"), s = dir / (example_name(i) + "_s.npy");
    if (!fs::exists(m) || !fs::exists(s)) break;
    d.push_back(load_npy(m), load_npy(s));
  }
  if (d.size() == 0) throw IoError("no (m, s) pairs found in " + dir.string());
  return d;
}

inline void write_operator(Manifest& man, const std::string& prefix, const LinearOperator& op) {
  man.text(prefix + "/operator.json", operator_to_json(op.descriptor()).dump(2) + "\n");
  if (op.is_fourier()) {
    const Tensor mk = op.mask();
    std::vector<std::uint8_t> bytes(mk.size());
    for (std::size_t i = 0; i < mk.size(); ++i) bytes[i] = mk[i] != 0.0;
    man.write(prefix + "/mask.npy", npy_bytes_u8(bytes, mk.shape()));
  }
}

// Writes <out>/config.json, data/{train,test}/NNNN_{m,s}.npy, data/operator.json
// (plus data/mask.npy for Fourier) and manifest.json.
inline SimulatedData cmd_simulate(const ExperimentConfig& c, const fs::path& out, bool force) {
  prepare_output_dir(out, force);
  DirLock lock(out);
  SimulatedData d = simulate(c);
  Manifest man(out);
  man.text("config.json", to_json(c).dump(2) + "\n");
  write_operator(man, "data", d.op);
  write_dataset(man, "data/train", d.train);
  write_dataset(man, "data/test", d.test);
  man.save();
  return d;
}

// ---- evaluation helpers ---------------------------------------------------------------

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(v.size());
}

// Per-pixel variance summed over image channels, as an (H, W) map.
inline Tensor pixel_variance(const Tensor& var) {
  if (var.rank() != 3) return var;
  const std::size_t c = var.dim(0), hw = var.dim(1) * var.dim(2);
  Tensor out({var.dim(1), var.dim(2)});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) out[i] += var[ch * hw + i];
  return out;
}

// Calibration pixels of one image. For two-channel (real, imaginary) images
// only the real channel is used, since it carries the image.
inline PixelGaussianSet image_pixel_set(const PredictiveSummary& s, const Tensor& y) {
  if (s.mean.rank() != 3 || s.mean.dim(0) != 2) return gaussianize(s, y);
  const std::size_t hw = s.mean.dim(1) * s.mean.dim(2);
  PredictiveSummary re;
  re.mean = Tensor({hw});
  re.aleatoric_var = Tensor({hw});
  re.epistemic_var = Tensor({hw});
  std::copy_n(s.mean.data(), hw, re.mean.data());
  std::copy_n(s.aleatoric_var.data(), hw, re.aleatoric_var.data());
  std::copy_n(s.epistemic_var.data(), hw, re.epistemic_var.data());
  Tensor yr({hw});
  std::copy_n(y.data(), hw, yr.data());
  return gaussianize(re, yr);
}

inline json report_json(const CalibrationReport& r) {
  return {{"mace", r.mace}, {"rmsce", r.rmsce}, {"miscal_area", r.miscal_area}, {"sharpness", r.sharpness}};
}

inline std::string calibration_csv(const CalibrationReport& before, const CalibrationReport* after) {
  std::ostringstream os;
  os.precision(17);
  os << "level,observed" << (after ? ",observed_recalibrated" : "") << "\n";
  for (std::size_t i = 0; i < before.levels.size(); ++i) {
    os << before.levels[i] << ',' << before.observed[i];
    if (after) os << ',' << after->observed[i];
    os << '\n';
  }
  return os.str();
}

// Reliability plot raster (size x size): diagonal in mid grey, the curve(s) white.
inline Tensor reliability_raster(const CalibrationReport& r, const CalibrationReport* after, std::size_t size = 128) {
  Tensor img({size, size});
  auto plot = [&](double x, double y, double v) {
    const auto col = static_cast<std::size_t>(std::clamp(x, 0.0, 1.0) * static_cast<double>(size - 1) + 0.5);
    const auto row = static_cast<std::size_t>((1.0 - std::clamp(y, 0.0, 1.0)) * static_cast<double>(size - 1) + 0.5);
    img[row * size + col] = std::max(img[row * size + col], v);
  };
  for (std::size_t i = 0; i < 4 * size; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(4 * size - 1);
    plot(t, t, 0.4);
  }
  auto curve = [&](const CalibrationReport& c, double v) {
    for (std::size_t i = 0; i + 1 < c.levels.size(); ++i)
      for (int k = 0; k < 8; ++k) {
        const double t = k / 8.0;
        plot(c.levels[i] + t * (c.levels[i + 1] - c.levels[i]), c.observed[i] + t * (c.observed[i + 1] - c.observed[i]),
             v);
      }
  };
  curve(r, 1.0);
  if (after) curve(*after, 0.7);
  return img;
}

// ---- pipeline ------------------------------------------------------------------------------

struct PipelineOptions {
  bool force = false;
  bool dry_run = false;
  std::size_t threads = 1;
  bool verbose = false;
};

inline std::string history_csv(const TrainHistory& h) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,mean_loss,val_nll,val_ssim,seconds\n";
  for (const auto& r : h.records)
    os << r.epoch << ',' << r.mean_loss << ',' << r.val_nll << ',' << r.val_ssim << ',' << r.seconds << '\n';
  return os.str();
}

inline json toy_report_json(const ToyReport& rep, const ToyParams& p) {
  const double target = std::sqrt(toy_posterior(0.0, p).epsilon);
  return {{"epochs", rep.epochs},
          {"mean_aleatoric_std_in", rep.mean_aleatoric_in},
          {"analytic_aleatoric_std", target},
          {"aleatoric_relative_error", std::abs(rep.mean_aleatoric_in - target) / target},
          {"median_epistemic_std_in", rep.median_epistemic_in},
          {"mean_epistemic_std_far", rep.mean_epistemic_far},
          {"epistemic_ratio", rep.mean_epistemic_far / rep.median_epistemic_in},
          {"mean_abs_recon_error_in", rep.mean_abs_recon_error_in},
          {"initial_val_nll", rep.initial_val_nll},
          {"final_val_nll", rep.final_val_nll}};
}

inline json run_toy_pipeline(const ExperimentConfig& c, Manifest& man) {
  ToyParams p;
  ToyModelConfig mc;
  mc.epochs = c.toy_epochs;
  mc.batch_size = c.toy_batch_size;
  const ToyReport rep = run_toy_experiment(p, mc, c.toy_T, derive_seed(c.seed, "toy"));
  std::ostringstream csv;
  rep.write_csv(csv);
  man.text("toy/toy.csv", csv.str());
  Tensor table({rep.rows.size(), 6});
  for (std::size_t i = 0; i < rep.rows.size(); ++i) {
    const auto& r = rep.rows[i];
    const double vals[6] = {r.m, r.recon, r.aleatoric_std, r.epistemic_std, r.eta, r.sqrt_eps};
    std::copy_n(vals, 6, table.data() + 6 * i);
  }
  man.npy("toy/toy.npy", table);
  man.text("toy/history.csv", history_csv(rep.history));
  return toy_report_json(rep, p);
}

// Runs simulate -> train -> infer -> calibrate and writes report.json. A
// failing stage is recorded in the report, which is still written.
inline json cmd_pipeline(const ExperimentConfig& c, const fs::path& out, const PipelineOptions& opt = {}) {
  c.validate();
  if (opt.dry_run) {
    fs::create_directories(out);
    write_file(out / "resolved_config.json", to_json(c).dump(2) + "\n");
    return {{"dry_run", true}, {"config", to_json(c)}};
  }
  prepare_output_dir(out, opt.force);
  DirLock lock(out);
  Manifest man(out);
  man.text("config.json", to_json(c).dump(2) + "\n");
  json report = {{"config", to_json(c)}, {"status", "ok"}};
  std::string stage = "simulate";
  const auto t_start = std::chrono::steady_clock::now();
  auto log = [&](const std::string& s) {
    if (opt.verbose) std::cerr << "[pipeline] " << s << std::endl;
  };
  try {
    if (c.modality == "toy") {
      stage = "toy";
      report["toy"] = run_toy_pipeline(c, man);
    } else {
      log("simulate");
      SimulatedData data = simulate(c);
      write_operator(man, "data", data.op);
      write_dataset(man, "data/train", data.train);
      write_dataset(man, "data/test", data.test);
      auto [train_set, val_set] = split_validation(data.train, c.validation_fraction, derive_seed(c.seed, "split"));

      json ssim_rows = json::array();
      for (const std::string& variant : c.variants) {
        if (variant == "zf_or_fbp") {
          stage = "zf_or_fbp";
          std::vector<double> q;
          for (std::size_t i = 0; i < data.test.size(); ++i)
            q.push_back(ssim(start_point(data.op, data.test.measurements[i]), data.test.targets[i]));
          ssim_rows.push_back({{"method", data.op.is_fourier() ? "zero_fill" : "fbp"}, {"mean_ssim", mean_of(q)}});
        } else if (variant == "tv") {
          stage = "tv";
          log("tv");
          AdmmConfig ac;
          // beta chosen on (up to three) validation images, then applied to the test set
          std::vector<double> score(ac.beta_grid.size(), 0.0);
          const std::size_t nsel = std::min<std::size_t>(3, val_set.size());
          for (std::size_t i = 0; i < nsel; ++i) {
            const auto sel = select_beta(data.op, val_set.measurements[i], val_set.targets[i], ac);
            for (std::size_t b = 0; b < score.size(); ++b) score[b] += sel.ssims[b];
          }
          std::vector<double> grid = ac.beta_grid;
          std::sort(grid.begin(), grid.end());
          const std::size_t best = static_cast<std::size_t>(std::max_element(score.begin(), score.end()) - score.begin());
          std::vector<double> q;
          for (std::size_t i = 0; i < data.test.size(); ++i) {
            const Tensor img = tv_admm(data.op, data.test.measurements[i], grid[best], ac).image;
            q.push_back(ssim(img, data.test.targets[i]));
            man.npy("tv/" + example_name(i) + ".npy", img);
          }
          ssim_rows.push_back({{"method", "tv"}, {"beta", grid[best]}, {"mean_ssim", mean_of(q)}});
        } else {
          const Variant v = parse_variant(variant);
          stage = "train:" + variant;
          log("train " + variant);
          LikelihoodModel model(variant_model_config(c.model_config(), v));
          const auto tr = train_variant(model, train_set, val_set, c.train_config(), v);
          const std::string dir = "models/" + std::string(variant_name(v));
          man.text(dir + "/history.csv", history_csv(tr.history));
          save_checkpoint(out / dir / "final", model);
          model.restore(tr.best_state);
          save_checkpoint(out / dir / "best", model);
          man.record_tree(dir + "/final");
          man.record_tree(dir + "/best");

          stage = "infer:" + variant;
          log("infer " + variant);
          PredictOptions po;
          po.threads = opt.threads;
          auto infer_set = [&](const Dataset& d, const std::string& tag, std::vector<double>* q, PixelGaussianSet& pix,
                               double* epi, double* ale) {
            std::vector<double> e, a;
            for (std::size_t i = 0; i < d.size(); ++i) {
              const auto s = predict(model, d.measurements[i], c.T, derive_seed(derive_seed(c.seed, "infer." + tag), i), po);
              if (q) q->push_back(ssim(s.mean, d.targets[i]));
              const Tensor ev = pixel_variance(s.epistemic_var), av = pixel_variance(s.aleatoric_var);
              for (std::size_t k = 0; k < ev.size(); ++k) {
                e.push_back(std::sqrt(ev[k]));
                a.push_back(std::sqrt(av[k]));
              }
              pix.append(image_pixel_set(s, d.targets[i]));
              if (tag == "test") {
                const std::string p = "predictions/" + std::string(variant_name(v)) + "/" + example_name(i);
                const auto [emap, amap] = uncertainty_maps(s);
                man.npy(p + "_mean.npy", s.mean);
                man.npy(p + "_epistemic_map.npy", emap);
                man.npy(p + "_aleatoric_map.npy", amap);
                man.npy(p + "_epistemic_var.npy", s.epistemic_var);
                man.npy(p + "_aleatoric_var.npy", s.aleatoric_var);
              }
            }
            if (epi) *epi = mean_of(e);
            if (ale) *ale = mean_of(a);
          };
          std::vector<double> q;
          PixelGaussianSet test_pix, val_pix;
          double epi = 0.0, ale = 0.0;
          infer_set(data.test, "test", &q, test_pix, &epi, &ale);
          ssim_rows.push_back({{"method", variant_name(v)}, {"mean_ssim", mean_of(q)},
                               {"mean_epistemic_std", epi}, {"mean_aleatoric_std", ale}});

          stage = "calibrate:" + variant;
          log("calibrate " + variant);
          infer_set(val_set, "val", nullptr, val_pix, nullptr, nullptr);
          const auto before = calibration_curve(test_pix, c.calibration_levels);
          json cal = {{"pre", report_json(before)}, {"floored_pixels", test_pix.floored}};
          if (val_pix.size() >= 100) {
            const auto R = fit_recalibrator(val_pix);
            const auto after = apply_recalibrator(R, test_pix, before.levels);
            cal["post"] = report_json(after);
            cal["recalibrator_degenerate"] = R.degenerate;
            man.text("calibration/" + std::string(variant_name(v)) + ".csv", calibration_csv(before, &after));
            man.write("calibration/" + std::string(variant_name(v)) + ".pgm",
                      pgm_bytes(reliability_raster(before, &after), 0.0, 1.0));
          } else {
            man.text("calibration/" + std::string(variant_name(v)) + ".csv", calibration_csv(before, nullptr));
          }
          report["calibration"][variant_name(v)] = cal;
        }
      }
      report["ssim"] = ssim_rows;
    }
  } catch (const std::exception& e) {
    report["status"] = "failed";
    report["failed_stage"] = stage;
    report["error"] = e.what();
  }
  report["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  write_file(out / "report.json", report.dump(2) + "\n");
  man.save();
  return report;
}

// ---- abnormal feature ------------------------------------------------------------------------

struct AbnormalReport {
  std::size_t square_size = 0;
  double intensity = 0.0;
  double mean_epistemic_inside = 0.0;   // mean epistemic std inside the square
  double mean_epistemic_outside = 0.0;  // and over the rest of the image
  double ratio = 1.0;
  Tensor phantom;
  PredictiveSummary summary;
};

// Inserts a centered constant square into test phantom `index`, simulates its
// measurement with the model's operator and compares epistemic uncertainty
// inside and outside the square.
inline AbnormalReport cmd_abnormal_feature(LikelihoodModel& model, const ExperimentConfig& c, std::size_t square_size,
                                           double intensity, std::size_t index = 0, std::size_t T = 0) {
  c.validate();
  if (square_size > c.image_size) throw ConfigError("square of size " + std::to_string(square_size) +
                                                    " exceeds the " + std::to_string(c.image_size) + " pixel image");
  const PhantomKind kind = parse_phantom_kind(c.phantom_kind);
  Tensor ph = make_phantom(kind, c.image_size, derive_seed(derive_seed(c.seed, "phantom"), c.n_train + index));
  const std::size_t n = c.image_size, lo = (n - square_size) / 2;
  for (std::size_t i = lo; i < lo + square_size; ++i)
    for (std::size_t j = lo; j < lo + square_size; ++j) ph[i * n + j] = intensity;
  const Tensor s = lift_image(ph, model.image_shape());
  const Tensor m = add_noise_snr(model.op().apply(s), c.snr_db, derive_seed(derive_seed(c.seed, "noise"), c.n_train + index)).measurement;
  AbnormalReport rep;
  rep.square_size = square_size;
  rep.intensity = intensity;
  rep.phantom = ph;
  rep.summary = predict(model, m, T ? T : c.T, derive_seed(c.seed, "abnormal"));
  const Tensor ev = pixel_variance(rep.summary.epistemic_var);
  std::vector<double> in, out;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const bool inside = i >= lo && i < lo + square_size && j >= lo && j < lo + square_size;
      (inside ? in : out).push_back(std::sqrt(ev[i * n + j]));
    }
  rep.mean_epistemic_outside = mean_of(out);
  if (in.empty()) {
    rep.mean_epistemic_inside = rep.mean_epistemic_outside;
    rep.ratio = 1.0;
  } else {
    rep.mean_epistemic_inside = mean_of(in);
    rep.ratio = rep.mean_epistemic_inside / rep.mean_epistemic_outside;
  }
  return rep;
}

}  // namespace bdu
