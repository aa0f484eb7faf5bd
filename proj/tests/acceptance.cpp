// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
// Thresholds are pinned here; oracles are computed independently of the
// library code they check.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>

#include "bdu/experiment.hpp"
#include "bdu/gradcheck.hpp"

using namespace bdu;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(s));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * standard_normal(rng);
  return t;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

// ---- 1, 2: toy benchmark ---------------------------------------------------------

constexpr std::uint64_t kToySeed = 0;
constexpr std::size_t kToyT = 100;

const ToyReport& toy_run() {
  static const ToyReport rep = run_toy_experiment(ToyParams{}, ToyModelConfig{}, kToyT, kToySeed);
  return rep;
}

Outcome toy_aleatoric() {
  const ToyParams p;
  // eps = 1 / (1/tau_inv + a^2/sigma^2) = 1 / (5 + 25) = 1/30
  const double target = std::sqrt(1.0 / (1.0 / p.tau_inv + p.a * p.a / (p.sigma_n * p.sigma_n)));
  const auto& rep = toy_run();
  const double rel = std::abs(rep.mean_aleatoric_in - target) / target;
  return {rel <= 0.25, "mean aleatoric std " + fmt(rep.mean_aleatoric_in) + " vs sqrt(1/30)=" + fmt(target) +
                           ", relative error " + fmt(rel) + " (<= 0.25), epochs " +
                           std::to_string(ToyModelConfig{}.epochs) + ", seed " + std::to_string(kToySeed)};
}

Outcome toy_epistemic() {
  const auto& rep = toy_run();
  std::vector<double> in, far;
  for (const auto& r : rep.rows) {
    if (r.m >= 0.0 && r.m <= 1.5) in.push_back(r.epistemic_std);
    if (r.m >= 2.5 && r.m <= 3.0) far.push_back(r.epistemic_std);
  }
  std::sort(in.begin(), in.end());
  const std::size_t n = in.size();
  const double med = n % 2 ? in[n / 2] : 0.5 * (in[n / 2 - 1] + in[n / 2]);
  double mf = 0.0;
  for (double v : far) mf += v / static_cast<double>(far.size());
  const double ratio = mf / med;
  return {ratio >= 3.0, "far mean " + fmt(mf) + " / in-range median " + fmt(med) + " = " + fmt(ratio) + " (>= 3)"};
}

// ---- 3: decomposition identity ----------------------------------------------------

ModelConfig toy_config(double rate) {
  ModelConfig c;
  c.op = ScalarDesc{0.5};
  c.f.width = 16;
  c.var.base_channels = 16;
  c.dropout_rate = rate;
  c.init_seed = 21;
  return c;
}

ModelConfig image_config(double rate) {
  ModelConfig c;
  c.op = FourierMaskDesc{16, 16, 0.2, 0.04, 5};
  c.f.iterations = 2;
  c.f.width = 6;
  c.var.base_channels = 4;
  c.dropout_rate = rate;
  c.init_seed = 22;
  return c;
}

// Law of total variance from the retained passes, two-pass.
double decomposition_error(const PredictiveSummary& s) {
  const std::size_t T = s.per_pass_means.size(), n = s.mean.size();
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0, ale = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      mu += s.per_pass_means[t][i];
      ale += s.per_pass_vars[t][i];
    }
    mu /= static_cast<double>(T);
    ale /= static_cast<double>(T);
    double epi = 0.0;
    for (std::size_t t = 0; t < T; ++t) epi += std::pow(s.per_pass_means[t][i] - mu, 2);
    epi /= static_cast<double>(T);
    worst = std::max({worst, std::abs(s.aleatoric_var[i] + s.epistemic_var[i] - (ale + epi)),
                      std::abs(s.aleatoric_var[i] - ale), std::abs(s.epistemic_var[i] - epi),
                      std::abs(s.mean[i] - mu)});
  }
  return worst;
}

Outcome decomposition() {
  LikelihoodModel toy(toy_config(0.5)), img(image_config(0.3));
  Rng rng(31);
  PredictOptions opt;
  opt.retain_passes = true;
  opt.chunk = 6;
  double worst = 0.0, max_epi = 0.0;
  for (std::size_t k = 0; k < 50; ++k) {
    LikelihoodModel& model = k % 2 ? img : toy;
    const Tensor m = k % 2 ? random_tensor(img.op().output_shape(), rng) : Tensor({1}, 3.0 * uniform01(rng));
    const auto s = predict(model, m, 10 + k % 7, 1000 + k, opt);
    worst = std::max(worst, decomposition_error(s));
    for (double e : s.epistemic_var.vec()) max_epi = std::max(max_epi, e);
  }
  return {worst <= 1e-10 && max_epi > 0.0,
          "50 summaries (25 toy, 25 16x16), max |error| " + fmt(worst) + " (<= 1e-10), max epistemic var " + fmt(max_epi)};
}

// ---- 4: degenerate dropout --------------------------------------------------------

Outcome degenerate_zeroing() {
  Rng rng(41);
  std::size_t nonzero = 0, checked = 0;
  auto count = [&](const PredictiveSummary& s) {
    for (double e : s.epistemic_var.vec()) nonzero += e != 0.0;
    checked += s.epistemic_var.size();
  };
  for (bool image : {false, true}) {
    auto cfg = [&](double r) { return image ? image_config(r) : toy_config(r); };
    LikelihoodModel zero(cfg(0.0)), drop(cfg(0.3)), poam(variant_model_config(cfg(0.3), Variant::Poam));
    const Tensor m = image ? random_tensor(zero.op().output_shape(), rng) : Tensor({1}, 0.7);
    count(predict(zero, m, 25, 1));
    count(predict(drop, m, 1, 2));
    count(predict(poam, m, 25, 3));
  }
  return {nonzero == 0, std::to_string(nonzero) + " of " + std::to_string(checked) +
                            " pixels with non-zero epistemic variance (rate 0, T=1, POAM; toy and 16x16)"};
}

// ---- 5: gradient check -----------------------------------------------------------------

Outcome grad_check_composite() {
  Rng rng(51);
  // The nonlinearity sits before batch norm so no bias is cancelled by it.
  Sequential mean_net({LayerSpec::conv(1, 3), LayerSpec::leaky_relu(0.1), LayerSpec::batch_norm(3), LayerSpec::dropout(0.3),
                       LayerSpec::conv(3, 1, 1)},
                      "mean", rng);
  Sequential var_net({LayerSpec::conv(1, 2), LayerSpec::leaky_relu(0.1), LayerSpec::batch_norm(2), LayerSpec::dropout(0.3),
                      LayerSpec::conv(2, 1, 1)},
                     "var", rng);
  std::vector<ad::Parameter*> params = mean_net.parameters();
  for (auto* p : var_net.parameters()) params.push_back(p);
  for (auto& l : mean_net.layers())
    if (l.spec().kind == LayerKind::BatchNorm) params.push_back(&l.weight()), params.push_back(&l.bias());
  for (auto& l : var_net.layers())
    if (l.spec().kind == LayerKind::BatchNorm) params.push_back(&l.weight()), params.push_back(&l.bias());
  std::sort(params.begin(), params.end());
  params.erase(std::unique(params.begin(), params.end()), params.end());
  std::size_t n_params = 0;
  for (auto* p : params) {
    n_params += p->value.size();
    for (auto& v : p->value.vec()) v += 0.05 * standard_normal(rng);  // move BN affine off (1, 0)
  }

  const Tensor x = random_tensor({4, 1, 4, 4}, rng), y = random_tensor({4, 1, 4, 4}, rng);
  const double n_train = 8.0;

  // Record one set of masks, then replay it for every evaluation.
  std::vector<Tensor> masks;
  {
    Rng mrng(52);
    ad::Tape t;
    ForwardContext ctx{Mode::Train, DropoutSource(&mrng, &masks)};
    mean_net.forward(t, t.constant(x), ctx);
    var_net.forward(t, t.constant(x), ctx);
  }
  std::size_t dropped = 0;
  for (const auto& m : masks) dropped += static_cast<std::size_t>(m.size() - sum(m));

  // NLL with explicit exp variance: 0.5 sum[(y - mu)^2 exp(-lv) + lv] / batch
  // plus keep / (2N) ||W||^2 on the convolutions feeding the dropped channels.
  auto loss = [&](ad::Tape& t) {
    ForwardContext ctx{Mode::Train, DropoutSource::replay(masks)};
    const ad::Var mu = mean_net.forward(t, t.constant(x), ctx);
    const ad::Var lv = var_net.forward(t, t.constant(x), ctx);
    const ad::Var r = ad::sub(mu, t.constant(y));
    ad::Var l = ad::scale(ad::sum(ad::add(ad::mul(ad::mul(r, r), ad::exp(ad::scale(lv, -1.0))), lv)), 0.5 / 4.0);
    for (auto* p : {&mean_net.layers()[0].weight(), &var_net.layers()[0].weight()}) {
      const ad::Var w = t.param(*p);
      l = ad::add(l, ad::scale(ad::sum(ad::mul(w, w)), 0.7 / (2.0 * n_train)));
    }
    return l;
  };
  const auto r = grad_check(params, loss, 1e-4);
  return {r.passed && n_params <= 200 && dropped > 0,
          std::to_string(n_params) + " parameters, " + std::to_string(dropped) +
              " channels dropped, max relative error " + fmt(r.max_rel_error) + " (< 1e-4) at " + r.worst};
}

// ---- 6: operator adjoints --------------------------------------------------------------

double inner(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double dot_test(const LinearOperator& op, Rng& rng) {
  const Tensor x = random_tensor(op.input_shape(), rng), y = random_tensor(op.output_shape(), rng);
  const double l = inner(op.apply(x), y), r = inner(x, op.adjoint(y));
  return std::abs(l - r) / std::max({std::abs(l), std::abs(r), 1e-300});
}

// Pixel-driven linear interpolation onto detector bins, entry by entry.
double radon_matrix_error(std::size_t s, std::size_t views) {
  const auto op = make_radon_op(s, views);
  const std::size_t nd = op.output_shape()[1];
  std::vector<double> a(views * nd * s * s, 0.0);
  const double c = (s - 1) / 2.0, dc = (nd - 1) / 2.0;
  for (std::size_t v = 0; v < views; ++v) {
    const double th = M_PI * static_cast<double>(v) / static_cast<double>(views);
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j < s; ++j) {
        const double u = (j - c) * std::cos(th) + (c - i) * std::sin(th) + dc, lo = std::floor(u);
        const long b = static_cast<long>(lo);
        if (b >= 0 && b < static_cast<long>(nd)) a[(v * nd + b) * s * s + i * s + j] += 1.0 - (u - lo);
        if (b + 1 >= 0 && b + 1 < static_cast<long>(nd)) a[(v * nd + b + 1) * s * s + i * s + j] += u - lo;
      }
  }
  double worst = 0.0;
  for (std::size_t col = 0; col < s * s; ++col) {
    Tensor e({1, s, s});
    e[col] = 1.0;
    const Tensor y = op.apply(e);
    for (std::size_t r = 0; r < views * nd; ++r) worst = std::max(worst, std::abs(y[r] - a[r * s * s + col]));
  }
  for (std::size_t r = 0; r < views * nd; ++r) {
    Tensor e({views, nd});
    e[r] = 1.0;
    const Tensor x = op.adjoint(e);
    for (std::size_t col = 0; col < s * s; ++col) worst = std::max(worst, std::abs(x[col] - a[r * s * s + col]));
  }
  return worst;
}

Outcome operator_adjoints() {
  Rng rng(61);
  double worst = 0.0;
  for (double f : {0.1, 0.2, 1.0}) {
    const auto op = make_fourier_mask_op(16, 16, f, 0.04, 62);
    for (int t = 0; t < 20; ++t) worst = std::max(worst, dot_test(op, rng));
  }
  for (std::size_t v : {4u, 36u}) {
    const auto op = make_radon_op(16, v);
    for (int t = 0; t < 20; ++t) worst = std::max(worst, dot_test(op, rng));
  }
  const double mat = radon_matrix_error(8, 4);
  return {worst < 1e-10 && mat <= 1e-12,
          "dot-test max relative error " + fmt(worst) + " (< 1e-10), dense Radon 8x8/4 max error " + fmt(mat) +
              " (<= 1e-12)"};
}

// ---- 7: classical baselines --------------------------------------------------------------

Outcome classical_baselines() {
  const std::size_t s = 32;
  const auto radon = make_radon_op(s, 180);
  Tensor blob({1, s, s});
  const double c = (s - 1) / 2.0;
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < s; ++j) blob[i * s + j] = std::exp(-((i - c) * (i - c) + (j - c) * (j - c)) / 32.0);
  const Tensor rec = filtered_backprojection(radon, radon.apply(blob));
  double mse = 0.0, peak = 0.0;
  for (std::size_t i = 0; i < blob.size(); ++i) {
    mse += std::pow(rec[i] - blob[i], 2) / static_cast<double>(blob.size());
    peak = std::max(peak, std::abs(blob[i]));
  }
  const double db = 10.0 * std::log10(peak * peak / mse);

  AdmmConfig cfg;  // 100 iterations, rho 10, CG tol 1e-5 / 10 iterations
  const auto op = make_fourier_mask_op(s, s, 0.2, 0.04, 71);
  int wins = 0;
  const int n = 10;
  for (int k = 0; k < n; ++k) {
    const Tensor ph = make_phantom(PhantomKind::PiecewiseConstBlocks, s, 700 + k);
    Tensor x({2, s, s});
    std::copy_n(ph.data(), s * s, x.data());
    const Tensor m = add_noise_snr(op.apply(x), 70.0, 800 + k).measurement;
    const auto sel = select_beta(op, m, x, cfg);
    if (ssim(tv_admm(op, m, sel.beta, cfg).image, x) > ssim(zero_fill(op, m), x)) ++wins;
  }
  return {db > 20.0 && wins >= 9, "FBP blob PSNR " + fmt(db) + " dB (> 20), TV beats zero-fill on " +
                                       std::to_string(wins) + "/" + std::to_string(n) + " (>= 9)"};
}

// ---- 8: desk-scale reconstruction -------------------------------------------------------

Outcome reconstruction_ordering() {
  ExperimentConfig c;  // 32x32 Fourier, 20% mask, 50 train / 10 test
  c.epochs = 30;
  c.learning_rate = 1e-3;  // 30-epoch schedule; the 1e-4 default belongs to the 100-epoch one
  const auto data = simulate(c);
  auto [tr, val] = split_validation(data.train, c.validation_fraction, derive_seed(c.seed, "split"));
  LikelihoodModel model(variant_model_config(c.model_config(), Variant::Proposed));
  train_variant(model, tr, val, c.train_config(), Variant::Proposed);
  double q0 = 0.0, q1 = 0.0;
  const double n = static_cast<double>(data.test.size());
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    q0 += ssim(start_point(data.op, data.test.measurements[i]), data.test.targets[i]) / n;
    q1 += ssim(predict(model, data.test.measurements[i], c.T, derive_seed(c.seed, i)).mean, data.test.targets[i]) / n;
  }
  return {q1 - q0 >= 0.05, "mean SSIM zero-fill " + fmt(q0) + ", proposed " + fmt(q1) + ", gain " + fmt(q1 - q0) +
                               " (>= 0.05), 30 epochs, lr " + fmt(c.resolved_lr())};
}

// ---- 9: calibration oracle -------------------------------------------------------------------

double phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double phi_inv(double p) {
  double lo = -40.0, hi = 40.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (phi(mid) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

PixelGaussianSet exact_pixels(std::size_t n, std::uint64_t seed, double inflate) {
  Rng rng(seed);
  PixelGaussianSet s;
  for (std::size_t i = 0; i < n; ++i) {
    const double mu = 2.0 * uniform01(rng) - 1.0, sd = 0.02 + 0.5 * uniform01(rng);
    s.mu.push_back(mu);
    s.var.push_back(std::pow(inflate * sd, 2));
    s.y.push_back(mu + sd * standard_normal(rng));
  }
  return s;
}

Outcome calibration_oracle() {
  const std::size_t n = 100000;
  const auto exact = calibration_curve(exact_pixels(n, 91, 1.0));
  const auto inflated_eval = exact_pixels(n, 92, 2.0);
  const auto inflated = calibration_curve(inflated_eval);
  double worst = 0.0;
  for (std::size_t i = 0; i < inflated.levels.size(); ++i)
    worst = std::max(worst, std::abs(inflated.observed[i] - phi(2.0 * phi_inv(inflated.levels[i]))));
  const auto R = fit_recalibrator(exact_pixels(n, 93, 2.0));
  const auto after = apply_recalibrator(R, inflated_eval, inflated.levels);
  return {exact.mace < 0.02 && worst <= 0.02 && after.mace <= 0.5 * inflated.mace,
          "exact MACE " + fmt(exact.mace) + " (< 0.02), sigma x2 max curve error " + fmt(worst) +
              " (<= 0.02), held-out MACE " + fmt(inflated.mace) + " -> " + fmt(after.mace) + " (<= half)"};
}

// ---- 10: determinism ---------------------------------------------------------------------------

Outcome determinism() {
  ExperimentConfig c;
  c.image_size = 16;
  c.n_train = 8;
  c.n_test = 2;
  c.iterations = 2;
  c.block_width = 4;
  c.var_base_channels = 4;
  c.epochs = 2;
  c.batch_size = 2;
  c.validation_fraction = 0.25;
  c.T = 4;
  c.seed = 1234;
  c.variants = {"zf_or_fbp", "tv", "proposed", "POEM"};
  const fs::path root = fs::temp_directory_path() / ("bdu_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  std::map<std::string, std::string> runs[2];
  bool ok = true;
  for (int k = 0; k < 2; ++k) {
    const fs::path out = root / std::to_string(k);
    const json rep = cmd_pipeline(c, out, {});
    ok = ok && rep.value("status", "") == "ok" && verify_manifest(out).ok();
    const json man = json::parse(read_file(out / "manifest.json"));
    for (auto it = man["files"].begin(); it != man["files"].end(); ++it)
      if (fs::path(it.key()).extension() == ".npy") runs[k][it.key()] = it.value().get<std::string>();
  }
  fs::remove_all(root);
  const bool same = runs[0] == runs[1] && !runs[0].empty();
  return {ok && same, std::to_string(runs[0].size()) + " NPY artifacts, hashes " + (same ? "identical" : "differ") +
                          (ok ? "" : ", a run failed or its manifest did not verify")};
}

}  // namespace

// Optional arguments select criteria by number; none runs all.
int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"toy aleatoric oracle", toy_aleatoric},
      {"toy epistemic growth", toy_epistemic},
      {"decomposition identity", decomposition},
      {"degenerate dropout zeroing", degenerate_zeroing},
      {"autodiff gradient check", grad_check_composite},
      {"operator adjoints", operator_adjoints},
      {"classical baselines", classical_baselines},
      {"desk-scale reconstruction", reconstruction_ordering},
      {"calibration oracle", calibration_oracle},
      {"pipeline determinism", determinism},
  };
  std::vector<bool> selected(criteria.size(), argc < 2);
  for (int a = 1; a < argc; ++a) {
    const int k = std::atoi(argv[a]);
    if (k >= 1 && k <= static_cast<int>(criteria.size())) selected[k - 1] = true;
  }
  int failed = 0, run = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected[i]) continue;
    ++run;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::printf("[%s] %2zu %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str(), sec);
    std::fflush(stdout);
  }
  std::printf("%d of %d criteria passed\n", run - failed, run);
  return failed ? 1 : 0;
}
