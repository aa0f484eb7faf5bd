// Command-line front end: simulate, train, infer, reconstruct, calibrate, toy,
// pipeline and abnormal, sharing one JSON config and one root seed.
#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "bdu/experiment.hpp"

using namespace bdu;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  bool dry_run = false;
  std::size_t threads = 1;
  bool verify = false;
  bool verbose = false;
};

ExperimentConfig load_config(const Globals& g) {
  ExperimentConfig c;
  if (!g.config.empty()) c = experiment_from_json(json::parse(read_file(g.config)));
  if (g.seed) c.seed = *g.seed;
  return c;
}

fs::path require_out(const Globals& g) {
  if (g.out.empty()) throw ConfigError("--out is required");
  return g.out;
}

// Validates and writes the resolved config without computing anything.
bool dry_run(const Globals& g, const ExperimentConfig& c, const json& extra = json::object()) {
  if (!g.dry_run) return false;
  c.validate();
  const fs::path out = require_out(g);
  json j = to_json(c);
  if (!extra.empty()) j["command"] = extra;
  write_file(out / "resolved_config.json", j.dump(2) + "\n");
  std::cout << "dry run: configuration valid, written to " << (out / "resolved_config.json").string() << "\n";
  return true;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> v;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) v.push_back(std::stod(item));
  return v;
}

// Accepts the simulate output root, its data/ directory or data/{train,test}.
LinearOperator read_operator(const fs::path& dir) {
  for (const fs::path& d : {dir, dir / "data", dir.parent_path()})
    if (fs::exists(d / "operator.json"))
      return make_operator(operator_from_json(json::parse(read_file(d / "operator.json"))));
  throw IoError("no operator.json in or next to " + dir.string());
}

fs::path pairs_dir(const fs::path& dir, const std::string& split) {
  if (fs::exists(dir / (example_name(0) + "_m.npy"))) return dir;
  if (fs::exists(dir / split)) return dir / split;
  return dir / "data" / split;
}

// Stacked (N, ...) array or a directory of NNNN_s.npy files.
std::vector<Tensor> read_truth(const fs::path& p) {
  std::vector<Tensor> out;
  if (fs::is_directory(p)) {
    for (std::size_t i = 0;; ++i) {
      const fs::path f = p / (example_name(i) + "_s.npy");
      if (!fs::exists(f)) break;
      out.push_back(load_npy(f));
    }
  } else {
    const Tensor t = load_npy(p);
    for (std::size_t i = 0; i < t.dim(0); ++i) out.push_back(t.slice0(i));
  }
  if (out.empty()) throw IoError("no ground-truth images in " + p.string());
  return out;
}

void save_preview(Manifest& man, const std::string& rel, const Tensor& img) { man.write(rel, pgm_bytes(img)); }

int run_verify(const Globals& g) {
  const auto r = verify_manifest(require_out(g));
  for (const auto& f : r.drifted) std::cout << "drift   " << f << "\n";
  for (const auto& f : r.missing) std::cout << "missing " << f << "\n";
  std::cout << r.checked << " files checked, " << r.drifted.size() << " drifted, " << r.missing.size() << " missing\n";
  return r.ok() ? 0 : 1;
}

// ---- subcommands ----------------------------------------------------------------

struct SimulateArgs {
  std::optional<std::string> modality, phantom;
  std::optional<std::size_t> size, n_train, n_test, views;
  std::optional<double> fraction, snr;
};

int cmd_simulate_cli(const Globals& g, const SimulateArgs& a) {
  ExperimentConfig c = load_config(g);
  if (a.modality) c.modality = *a.modality;
  if (a.phantom) c.phantom_kind = *a.phantom;
  if (a.size) c.image_size = *a.size;
  if (a.n_train) c.n_train = *a.n_train;
  if (a.n_test) c.n_test = *a.n_test;
  if (a.views) c.n_views = *a.views;
  if (a.fraction) c.observed_fraction = *a.fraction;
  if (a.snr) c.snr_db = *a.snr;
  if (dry_run(g, c)) return 0;
  const auto d = cmd_simulate(c, require_out(g), g.force);
  std::cout << "wrote " << d.train.size() << " training and " << d.test.size() << " test pairs to " << g.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string variant = "proposed";
  std::optional<std::size_t> epochs, batch_size;
  std::optional<double> lr, dropout;
};

int cmd_train_cli(const Globals& g, const TrainArgs& a) {
  ExperimentConfig c = load_config(g);
  if (a.epochs) c.epochs = *a.epochs;
  if (a.batch_size) c.batch_size = *a.batch_size;
  if (a.lr) c.learning_rate = *a.lr;
  if (a.dropout) c.dropout_rate = *a.dropout;
  const Variant v = parse_variant(a.variant);
  if (dry_run(g, c, {{"train", {{"variant", a.variant}, {"data", a.data}}}})) return 0;
  if (a.data.empty()) throw ConfigError("train needs --data <simulate output>/data");
  const fs::path out = require_out(g);
  prepare_output_dir(out, g.force);
  DirLock lock(out);

  const fs::path data_dir = a.data;
  ModelConfig mc = variant_model_config(c.model_config(), v);
  mc.op = read_operator(data_dir).descriptor();
  LikelihoodModel model(mc);
  const Dataset all = read_dataset(pairs_dir(data_dir, "train"));
  auto [tr, val] = split_validation(all, c.validation_fraction, derive_seed(c.seed, "split"));
  TrainConfig tc = c.train_config();
  tc.verbose = g.verbose;
  const auto res = train_variant(model, tr, val, tc, v);

  Manifest man(out);
  man.text("history.csv", history_csv(res.history));
  save_checkpoint(out / "final", model, {{"variant", variant_name(v)}, {"epochs", c.epochs}});
  model.restore(res.best_state);
  save_checkpoint(out / "best", model, {{"variant", variant_name(v)}, {"best_epoch", res.history.best_epoch}});
  man.record_tree("final");
  man.record_tree("best");
  man.save();
  const auto& last = res.history.records.back();
  std::cout << "trained " << variant_name(v) << " for " << c.epochs << " epochs: final loss " << last.mean_loss
            << ", best epoch " << res.history.best_epoch << ", checkpoints in " << out.string() << "/{best,final}\n";
  return 0;
}

struct InferArgs {
  std::string checkpoint, data;
  std::size_t T = 100;
  bool save_passes = false;
};

int cmd_infer_cli(const Globals& g, const InferArgs& a) {
  ExperimentConfig c = load_config(g);
  c.T = a.T;
  if (dry_run(g, c, {{"infer", {{"checkpoint", a.checkpoint}, {"data", a.data}, {"T", a.T}}}})) return 0;
  if (a.checkpoint.empty() || a.data.empty()) throw ConfigError("infer needs --checkpoint and --data");
  LikelihoodModel model = load_checkpoint(a.checkpoint);
  const fs::path out = require_out(g);
  prepare_output_dir(out, g.force);
  DirLock lock(out);
  Manifest man(out);

  std::vector<Tensor> ms;
  if (fs::is_directory(a.data)) {
    for (std::size_t i = 0;; ++i) {
      const fs::path f = fs::path(a.data) / (example_name(i) + "_m.npy");
      if (!fs::exists(f)) break;
      ms.push_back(load_npy(f));
    }
  } else {
    ms.push_back(load_npy(a.data));
  }
  if (ms.empty()) throw IoError("no measurements in " + a.data);

  PredictOptions po;
  po.threads = g.threads;
  po.retain_passes = a.save_passes;
  for (std::size_t i = 0; i < ms.size(); ++i) {
    const auto s = predict(model, ms[i], a.T, derive_seed(derive_seed(c.seed, "infer"), i), po);
    const auto [emap, amap] = uncertainty_maps(s);
    const std::string p = example_name(i);
    man.npy(p + "_mean.npy", s.mean);
    man.npy(p + "_epistemic_var.npy", s.epistemic_var);
    man.npy(p + "_aleatoric_var.npy", s.aleatoric_var);
    man.npy(p + "_epistemic_map.npy", emap);
    man.npy(p + "_aleatoric_map.npy", amap);
    save_preview(man, p + "_mean.pgm", s.mean);
    save_preview(man, p + "_epistemic_map.pgm", emap);
    save_preview(man, p + "_aleatoric_map.pgm", amap);
    if (a.save_passes) {
      Shape sh{s.per_pass_means.size()};
      sh.insert(sh.end(), s.mean.shape().begin(), s.mean.shape().end());
      Tensor means(sh), vars(sh);
      for (std::size_t t = 0; t < s.per_pass_means.size(); ++t) {
        means.set_slice0(t, s.per_pass_means[t]);
        vars.set_slice0(t, s.per_pass_vars[t]);
      }
      man.npy(p + "_pass_means.npy", means);
      man.npy(p + "_pass_vars.npy", vars);
    }
  }
  man.save();
  std::cout << "inferred " << ms.size() << " measurement(s) with T=" << a.T << " into " << out.string() << "\n";
  return 0;
}

struct ReconstructArgs {
  std::string data;
  std::string method = "zf";
  std::optional<double> beta;
  std::string beta_grid;
  std::size_t admm_iters = 100;
  double rho = 10.0;
  double cg_tol = 1e-5;
  std::size_t cg_max_iter = 10;
};

int cmd_reconstruct_cli(const Globals& g, const ReconstructArgs& a) {
  const ExperimentConfig c = load_config(g);
  if (dry_run(g, c, {{"reconstruct", {{"method", a.method}, {"data", a.data}}}})) return 0;
  if (a.data.empty()) throw ConfigError("reconstruct needs --data <dir with NNNN_m.npy>");
  AdmmConfig ac;
  ac.n_iters = a.admm_iters;
  ac.rho = a.rho;
  ac.cg_tol = a.cg_tol;
  ac.cg_max_iter = a.cg_max_iter;
  if (!a.beta_grid.empty()) ac.beta_grid = parse_list(a.beta_grid);
  ac.validate();

  const LinearOperator op = read_operator(a.data);
  const Dataset d = read_dataset(pairs_dir(a.data, "test"));
  if (a.method == "zf" && !op.is_fourier()) throw ConfigError("zf requires a fourier operator");
  if (a.method == "fbp" && !op.is_radon()) throw ConfigError("fbp requires a radon operator");
  if (a.method != "zf" && a.method != "fbp" && a.method != "tv") throw ConfigError("--method must be zf, fbp or tv");

  double beta = a.beta.value_or(0.0);
  json sel_json;
  if (a.method == "tv" && !a.beta) {
    // grid search against the first ground-truth image
    const auto sel = select_beta(op, d.measurements[0], d.targets[0], ac);
    beta = sel.beta;
    sel_json = {{"grid", sel.grid}, {"ssims", sel.ssims}, {"beta", sel.beta}};
  }
  const fs::path out = require_out(g);
  prepare_output_dir(out, g.force);
  DirLock lock(out);
  Manifest man(out);
  std::vector<double> q;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Tensor img = a.method == "tv" ? tv_admm(op, d.measurements[i], beta, ac).image : start_point(op, d.measurements[i]);
    man.npy(example_name(i) + "_recon.npy", img);
    save_preview(man, example_name(i) + "_recon.pgm", img);
    q.push_back(ssim(img, d.targets[i]));
  }
  json rep = {{"method", a.method}, {"mean_ssim", mean_of(q)}, {"ssim", q}};
  if (a.method == "tv") rep["beta"] = beta;
  if (!sel_json.is_null()) rep["beta_selection"] = sel_json;
  man.text("report.json", rep.dump(2) + "\n");
  man.save();
  std::cout << a.method << ": mean SSIM " << mean_of(q) << " over " << d.size() << " images\n";
  return 0;
}

struct CalibrateArgs {
  std::string pred, truth;
  double recalib_split = 0.5;
  std::size_t levels = 99;
};

int cmd_calibrate_cli(const Globals& g, const CalibrateArgs& a) {
  const ExperimentConfig c = load_config(g);
  if (dry_run(g, c, {{"calibrate", {{"pred", a.pred}, {"truth", a.truth}}}})) return 0;
  if (a.pred.empty() || a.truth.empty()) throw ConfigError("calibrate needs --pred and --truth");
  if (a.recalib_split < 0 || a.recalib_split >= 1) throw ConfigError("--recalib-split must lie in [0, 1)");
  const auto truth = read_truth(a.truth);
  std::vector<PixelGaussianSet> per_image;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const fs::path base = fs::path(a.pred) / example_name(i);
    PredictiveSummary s;
    s.mean = load_npy(base.string() + "_mean.npy");
    s.aleatoric_var = load_npy(base.string() + "_aleatoric_var.npy");
    s.epistemic_var = load_npy(base.string() + "_epistemic_var.npy");
    per_image.push_back(image_pixel_set(s, truth[i].reshaped(s.mean.shape())));
  }
  // The first images fit the recalibration map, the rest are evaluated.
  const auto n_fit = static_cast<std::size_t>(std::floor(a.recalib_split * static_cast<double>(per_image.size())));
  PixelGaussianSet fit_set, eval_set;
  for (std::size_t i = 0; i < per_image.size(); ++i) (i < n_fit ? fit_set : eval_set).append(per_image[i]);

  const fs::path out = require_out(g);
  prepare_output_dir(out, g.force);
  DirLock lock(out);
  Manifest man(out);
  const auto before = calibration_curve(eval_set, a.levels);
  json rep = {{"pre", report_json(before)}, {"images_fit", n_fit}, {"images_evaluated", per_image.size() - n_fit},
              {"floored_pixels", eval_set.floored + fit_set.floored}};
  std::optional<CalibrationReport> after;
  if (n_fit > 0 && fit_set.size() >= 100) {
    const auto R = fit_recalibrator(fit_set);
    after = apply_recalibrator(R, eval_set, before.levels);
    rep["post"] = report_json(*after);
    rep["recalibrator_degenerate"] = R.degenerate;
    if (R.degenerate) std::cerr << "warning: degenerate recalibration set, using a step map\n";
  }
  man.text("calibration.csv", calibration_csv(before, after ? &*after : nullptr));
  man.write("reliability.pgm", pgm_bytes(reliability_raster(before, after ? &*after : nullptr), 0.0, 1.0));
  man.text("metrics.json", rep.dump(2) + "\n");
  man.save();
  std::cout << "MACE " << before.mace << (after ? " -> " + std::to_string(after->mace) : std::string()) << ", RMSCE "
            << before.rmsce << ", miscalibration area " << before.miscal_area << ", sharpness " << before.sharpness
            << "\n";
  return 0;
}

struct ToyArgs {
  std::optional<std::size_t> epochs, T;
  std::string sweep;
};

int cmd_toy_cli(const Globals& g, const ToyArgs& a) {
  ExperimentConfig c = load_config(g);
  c.modality = "toy";
  if (a.epochs) c.toy_epochs = *a.epochs;
  if (a.T) c.toy_T = *a.T;
  if (dry_run(g, c, {{"toy", {{"sweep", a.sweep}}}})) return 0;
  const fs::path out = require_out(g);
  prepare_output_dir(out, g.force);
  DirLock lock(out);
  Manifest man(out);
  json rep;
  if (a.sweep.empty()) {
    rep = run_toy_pipeline(c, man);
    std::cout << "aleatoric std " << rep["mean_aleatoric_std_in"].get<double>() << " (analytic "
              << rep["analytic_aleatoric_std"].get<double>() << "), epistemic far/in ratio "
              << rep["epistemic_ratio"].get<double>() << "\n";
  } else {
    std::string spec = a.sweep;
    if (spec.rfind("sizes=", 0) == 0) spec = spec.substr(6);
    std::vector<std::size_t> sizes;
    for (double s : parse_list(spec)) sizes.push_back(static_cast<std::size_t>(s));
    ToyModelConfig mc;
    mc.epochs = c.toy_epochs;
    mc.batch_size = c.toy_batch_size;
    const auto rows = dataset_size_sweep(ToyParams{}, mc, sizes, {derive_seed(c.seed, "toy")}, c.toy_T);
    std::ostringstream csv;
    csv.precision(17);
    csv << "size,mean_epistemic_std,mean_aleatoric_std\n";
    rep = json::array();
    for (const auto& r : rows) {
      csv << r.size << ',' << r.mean_epistemic_std << ',' << r.mean_aleatoric_std << '\n';
      rep.push_back({{"size", r.size}, {"mean_epistemic_std", r.mean_epistemic_std},
                     {"mean_aleatoric_std", r.mean_aleatoric_std}});
      std::cout << "size " << r.size << ": epistemic " << r.mean_epistemic_std << ", aleatoric "
                << r.mean_aleatoric_std << "\n";
    }
    man.text("sweep.csv", csv.str());
  }
  man.text("report.json", rep.dump(2) + "\n");
  man.save();
  return 0;
}

int cmd_pipeline_cli(const Globals& g) {
  const ExperimentConfig c = load_config(g);
  PipelineOptions opt;
  opt.force = g.force;
  opt.dry_run = g.dry_run;
  opt.threads = g.threads;
  opt.verbose = g.verbose;
  const json rep = cmd_pipeline(c, require_out(g), opt);
  if (g.dry_run) {
    std::cout << "dry run: configuration valid\n";
    return 0;
  }
  if (rep.value("status", "") != "ok") {
    std::cerr << "pipeline failed in stage " << rep.value("failed_stage", "?") << ": " << rep.value("error", "") << "\n";
    return 1;
  }
  if (rep.contains("ssim"))
    for (const auto& row : rep["ssim"]) std::cout << row["method"].get<std::string>() << ": mean SSIM " << row["mean_ssim"] << "\n";
  if (rep.contains("toy")) std::cout << rep["toy"].dump(2) << "\n";
  std::cout << "report written to " << (fs::path(g.out) / "report.json").string() << "\n";
  return 0;
}

struct AbnormalArgs {
  std::string checkpoint;
  std::size_t square_size = 8;
  double intensity = 1.0;
  std::size_t index = 0;
  std::optional<std::size_t> T;
};

int cmd_abnormal_cli(const Globals& g, const AbnormalArgs& a) {
  ExperimentConfig c = load_config(g);
  if (dry_run(g, c, {{"abnormal", {{"square_size", a.square_size}, {"intensity", a.intensity}}}})) return 0;
  if (a.checkpoint.empty()) throw ConfigError("abnormal needs --checkpoint");
  LikelihoodModel model = load_checkpoint(a.checkpoint);
  const auto rep = cmd_abnormal_feature(model, c, a.square_size, a.intensity, a.index, a.T.value_or(c.T));
  const fs::path out = require_out(g);
  prepare_output_dir(out, g.force);
  DirLock lock(out);
  Manifest man(out);
  const auto [emap, amap] = uncertainty_maps(rep.summary);
  man.npy("phantom.npy", rep.phantom);
  man.npy("mean.npy", rep.summary.mean);
  man.npy("epistemic_map.npy", emap);
  man.npy("aleatoric_map.npy", amap);
  save_preview(man, "phantom.pgm", rep.phantom);
  save_preview(man, "epistemic_map.pgm", emap);
  const json j = {{"square_size", rep.square_size},
                  {"intensity", rep.intensity},
                  {"mean_epistemic_std_inside", rep.mean_epistemic_inside},
                  {"mean_epistemic_std_outside", rep.mean_epistemic_outside},
                  {"ratio", rep.ratio}};
  man.text("report.json", j.dump(2) + "\n");
  man.save();
  std::cout << "epistemic std inside " << rep.mean_epistemic_inside << ", outside " << rep.mean_epistemic_outside
            << ", ratio " << rep.ratio << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian deep-unrolled reconstruction"};
  app.require_subcommand(0, 1);
  Globals g;
  app.add_option("--config", g.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "root seed (overrides the config)");
  app.add_option("--out", g.out, "output directory");
  app.add_flag("--force", g.force, "overwrite a non-empty output directory");
  app.add_flag("--dry-run", g.dry_run, "validate and write the resolved config only");
  app.add_option("--threads", g.threads, "worker threads for inference")->check(CLI::PositiveNumber);
  app.add_flag("--verify", g.verify, "re-hash the files listed in <out>/manifest.json");
  app.add_flag("-v,--verbose", g.verbose, "progress on stderr");

  SimulateArgs sa;
  auto* sim = app.add_subcommand("simulate", "generate phantoms and noisy measurements");
  sim->add_option("--modality", sa.modality, "fourier or radon");
  sim->add_option("--phantom", sa.phantom, "shepp_like, random_ellipses or piecewise_const_blocks");
  sim->add_option("--size", sa.size, "image side length");
  sim->add_option("--n-train", sa.n_train);
  sim->add_option("--n-test", sa.n_test);
  sim->add_option("--views", sa.views, "radon views");
  sim->add_option("--fraction", sa.fraction, "observed k-space fraction");
  sim->add_option("--snr", sa.snr, "SNR in dB (inf for noiseless)");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "train one variant on simulated data");
  trn->add_option("--data", ta.data, "simulate output directory (or its data/train)");
  trn->add_option("--variant", ta.variant, "proposed, POAM, POEM, PUM or PUMwoBN");
  trn->add_option("--epochs", ta.epochs);
  trn->add_option("--lr", ta.lr);
  trn->add_option("--batch-size", ta.batch_size);
  trn->add_option("--dropout", ta.dropout);

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "MC-dropout inference with uncertainty maps");
  inf->add_option("--checkpoint", ia.checkpoint)->required();
  inf->add_option("--data", ia.data, "measurement NPY or a directory of NNNN_m.npy")->required();
  inf->add_option("--T", ia.T, "stochastic passes");
  inf->add_flag("--save-passes", ia.save_passes, "also write every pass");

  ReconstructArgs ra;
  auto* rec = app.add_subcommand("reconstruct", "classical reconstruction");
  rec->add_option("--data", ra.data, "directory of NNNN_m.npy / NNNN_s.npy pairs")->required();
  rec->add_option("--method", ra.method)->check(CLI::IsMember({"zf", "fbp", "tv"}));
  rec->add_option("--beta", ra.beta);
  rec->add_option("--beta-grid", ra.beta_grid, "comma-separated candidates");
  rec->add_option("--admm-iters", ra.admm_iters);
  rec->add_option("--rho", ra.rho);
  rec->add_option("--cg-tol", ra.cg_tol);
  rec->add_option("--cg-max-iter", ra.cg_max_iter);

  CalibrateArgs ca;
  auto* cal = app.add_subcommand("calibrate", "calibration curve, metrics and recalibration");
  cal->add_option("--pred", ca.pred, "directory written by infer")->required();
  cal->add_option("--truth", ca.truth, "stacked NPY or directory of NNNN_s.npy")->required();
  cal->add_option("--recalib-split", ca.recalib_split, "fraction of images used to fit the recalibration map");
  cal->add_option("--levels", ca.levels);

  ToyArgs ya;
  auto* toy = app.add_subcommand("toy", "one-dimensional benchmark with an analytic posterior");
  toy->add_option("--epochs", ya.epochs);
  toy->add_option("--T", ya.T);
  toy->add_option("--sweep", ya.sweep, "sizes=10,50,100");

  app.add_subcommand("pipeline", "simulate, train, infer and calibrate from one config");

  AbnormalArgs aa;
  auto* abn = app.add_subcommand("abnormal", "insert a square and compare epistemic uncertainty");
  abn->add_option("--checkpoint", aa.checkpoint)->required();
  abn->add_option("--square-size", aa.square_size);
  abn->add_option("--intensity", aa.intensity);
  abn->add_option("--index", aa.index, "test image index");
  abn->add_option("--T", aa.T);

  CLI11_PARSE(app, argc, argv);

  try {
    if (g.verify) return run_verify(g);
    if (app.got_subcommand("simulate")) return cmd_simulate_cli(g, sa);
    if (app.got_subcommand("train")) return cmd_train_cli(g, ta);
    if (app.got_subcommand("infer")) return cmd_infer_cli(g, ia);
    if (app.got_subcommand("reconstruct")) return cmd_reconstruct_cli(g, ra);
    if (app.got_subcommand("calibrate")) return cmd_calibrate_cli(g, ca);
    if (app.got_subcommand("toy")) return cmd_toy_cli(g, ya);
    if (app.got_subcommand("pipeline")) return cmd_pipeline_cli(g);
    if (app.got_subcommand("abnormal")) return cmd_abnormal_cli(g, aa);
    std::cout << app.help();
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
