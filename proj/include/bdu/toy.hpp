// One-dimensional linear-Gaussian inverse problem m = a s + n with a Gaussian
// prior on s. Its posterior is known in closed form, which makes it an exact
// reference for the learned aleatoric and epistemic uncertainties.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "bdu/predict.hpp"
#include "bdu/train.hpp"

namespace bdu {

// Acceptance bands for the learned uncertainties.
inline constexpr double kToyAleatoricTolerance = 0.25;  // relative to sqrt(eps)
inline constexpr double kToyEpistemicGrowth = 3.0;      // far-field mean over in-range median

struct ToyParams {
  double a = 0.5;
  double sigma_n = 0.1;
  double mu = 0.0;
  double tau_inv = 0.2;
  double train_lo = 0.0, train_hi = 1.5;
  std::size_t n_train = 100;
  double test_lo = 0.0, test_hi = 3.0;
  std::size_t n_test = 200;
  std::size_t n_val = 20;  // held-out pairs drawn at random m in the training interval

  void validate() const {
    if (a == 0.0) throw ConfigError("toy: a must be non-zero");
    if (!(sigma_n > 0)) throw ConfigError("toy: sigma_n must be positive");
    if (!(tau_inv > 0)) throw ConfigError("toy: tau_inv must be positive");
    if (n_train < 1 || n_test < 1) throw ConfigError("toy: point counts must be positive");
  }
};

struct ToyPosterior {
  double eta = 0.0;
  double epsilon = 0.0;
};

// eps = (tau + a^2 / sigma_n^2)^-1 with prior precision tau = 1 / tau_inv,
// eta = eps (a m / sigma_n^2 + tau mu).
inline ToyPosterior toy_posterior(double m, const ToyParams& p) {
  p.validate();
  const double tau = 1.0 / p.tau_inv;
  const double prec = 1.0 / (p.sigma_n * p.sigma_n);
  const double eps = 1.0 / (tau + p.a * p.a * prec);
  return {eps * (p.a * prec * m + tau * p.mu), eps};
}

inline std::vector<double> linspace(double lo, double hi, std::size_t n) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i)
    v[i] = n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return v;
}

struct ToyDataset {
  Dataset train;
  Dataset validation;
  std::vector<double> test_m;
};

inline ToyDataset gen_toy_dataset(const ToyParams& p, std::uint64_t seed) {
  p.validate();
  ToyDataset d;
  Rng rng(derive_seed(seed, "toy.targets"));
  for (double m : linspace(p.train_lo, p.train_hi, p.n_train)) {
    const auto post = toy_posterior(m, p);
    d.train.push_back(Tensor({1}, m), Tensor({1}, post.eta + std::sqrt(post.epsilon) * standard_normal(rng)));
  }
  Rng vrng(derive_seed(seed, "toy.validation"));
  for (std::size_t i = 0; i < p.n_val; ++i) {
    const double m = p.train_lo + (p.train_hi - p.train_lo) * uniform01(vrng);
    const auto post = toy_posterior(m, p);
    d.validation.push_back(Tensor({1}, m), Tensor({1}, post.eta + std::sqrt(post.epsilon) * standard_normal(vrng)));
  }
  d.test_m = linspace(p.test_lo, p.test_hi, p.n_test);
  return d;
}

struct ToyModelConfig {
  std::size_t iterations = 5;
  std::size_t width = 32;
  std::size_t hidden_layers = 3;
  std::size_t var_hidden_layers = 2;
  double dropout_rate = 0.5;
  double alpha_init = 1.0;
  std::size_t epochs = 20000;
  double learning_rate = 1e-4;
  std::size_t batch_size = 100;
  double leaky_slope = 0.01;
};

inline ModelConfig toy_model_config(const ToyParams& p, const ToyModelConfig& c, std::uint64_t seed) {
  ModelConfig mc;
  mc.op = ScalarDesc{p.a};
  mc.f.iterations = c.iterations;
  mc.f.alpha_init = c.alpha_init;
  mc.f.width = c.width;
  mc.f.leaky_slope = c.leaky_slope;
  mc.f.mlp_hidden_layers = c.hidden_layers;
  mc.var.base_channels = c.width;
  mc.var.mlp_hidden_layers = c.var_hidden_layers;
  mc.dropout_rate = c.dropout_rate;
  mc.init_seed = derive_seed(seed, "toy.init");
  return mc;
}

struct ToyRow {
  double m = 0.0, recon = 0.0, aleatoric_std = 0.0, epistemic_std = 0.0, eta = 0.0, sqrt_eps = 0.0;
};

struct ToyReport {
  std::vector<ToyRow> rows;
  TrainHistory history;
  std::size_t epochs = 0;
  double initial_val_nll = 0.0;
  double final_val_nll = 0.0;
  // Summary quantities.
  double mean_aleatoric_in = 0.0;       // mean aleatoric std over m in the training interval
  double median_epistemic_in = 0.0;     // median epistemic std over m in the training interval
  double mean_epistemic_in = 0.0;
  double mean_epistemic_far = 0.0;      // mean epistemic std over m in [far_lo, test_hi]
  double mean_abs_recon_error_in = 0.0; // mean |recon - eta| over the training interval

  void write_csv(std::ostream& os) const {
    os << "m,recon,aleatoric_std,epistemic_std,eta,sqrt_eps\n";
    os.precision(17);
    for (const auto& r : rows)
      os << r.m << ',' << r.recon << ',' << r.aleatoric_std << ',' << r.epistemic_std << ',' << r.eta << ','
         << r.sqrt_eps << '\n';
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw ValueError("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline ToyReport summarize_toy(std::vector<ToyRow> rows, const ToyParams& p, double far_lo = 2.5) {
  ToyReport rep;
  std::vector<double> ale_in, epi_in, epi_far, err_in;
  for (const auto& r : rows) {
    if (r.m >= p.train_lo && r.m <= p.train_hi) {
      ale_in.push_back(r.aleatoric_std);
      epi_in.push_back(r.epistemic_std);
      err_in.push_back(std::abs(r.recon - r.eta));
    }
    if (r.m >= far_lo && r.m <= p.test_hi) epi_far.push_back(r.epistemic_std);
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  rep.mean_aleatoric_in = mean(ale_in);
  rep.mean_epistemic_in = mean(epi_in);
  rep.median_epistemic_in = epi_in.empty() ? 0.0 : median(epi_in);
  rep.mean_epistemic_far = mean(epi_far);
  rep.mean_abs_recon_error_in = mean(err_in);
  rep.rows = std::move(rows);
  return rep;
}

inline std::vector<ToyRow> toy_predict_rows(LikelihoodModel& model, const ToyParams& p,
                                            const std::vector<double>& test_m, std::size_t T, std::uint64_t seed) {
  std::vector<ToyRow> rows;
  for (std::size_t i = 0; i < test_m.size(); ++i) {
    const double m = test_m[i];
    PredictOptions opt;
    opt.chunk = T;
    const auto s = predict(model, Tensor({1}, m), T, derive_seed(seed, i), opt);
    const auto post = toy_posterior(m, p);
    rows.push_back({m, s.mean[0], std::sqrt(s.aleatoric_var[0]), std::sqrt(s.epistemic_var[0]), post.eta,
                    std::sqrt(post.epsilon)});
  }
  return rows;
}

inline ToyReport run_toy_experiment(const ToyParams& p, const ToyModelConfig& c, std::size_t T, std::uint64_t seed,
                                    const ToyDataset* data_in = nullptr) {
  const ToyDataset data = data_in ? *data_in : gen_toy_dataset(p, seed);
  LikelihoodModel model(toy_model_config(p, c, seed));
  TrainConfig tc;
  tc.batch_size = std::min(c.batch_size, data.train.size());
  tc.learning_rate = c.learning_rate;
  tc.epochs = c.epochs;
  tc.seed = derive_seed(seed, "toy.train");

  std::vector<Tensor> val_starts;
  for (const auto& m : data.validation.measurements) val_starts.push_back(model.start_point(m));
  const double initial_nll =
      data.validation.size() ? evaluate(model, data.validation, val_starts, tc.batch_size).first : 0.0;

  auto result = train(model, data.train, data.validation, tc);
  ToyReport rep = summarize_toy(toy_predict_rows(model, p, data.test_m, T, derive_seed(seed, "toy.predict")), p);
  rep.history = std::move(result.history);
  rep.epochs = c.epochs;
  rep.initial_val_nll = initial_nll;
  rep.final_val_nll = rep.history.records.empty() ? initial_nll : rep.history.records.back().val_nll;
  return rep;
}

struct SweepRow {
  std::size_t size = 0;
  double mean_epistemic_std = 0.0;  // over the training interval, averaged over seeds
  double mean_aleatoric_std = 0.0;
};

// Trains one model per (size, seed) on `size` evenly spaced training points
// and averages the in-distribution uncertainties over seeds.
inline std::vector<SweepRow> dataset_size_sweep(const ToyParams& p, const ToyModelConfig& c,
                                                const std::vector<std::size_t>& sizes,
                                                const std::vector<std::uint64_t>& seeds, std::size_t T) {
  if (!std::is_sorted(sizes.begin(), sizes.end())) throw ConfigError("sweep sizes must be ascending");
  if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
  std::vector<SweepRow> out;
  for (std::size_t n : sizes) {
    SweepRow row{n, 0.0, 0.0};
    for (std::uint64_t seed : seeds) {
      ToyParams q = p;
      q.n_train = n;
      ToyDataset data = gen_toy_dataset(q, seed);
      data.test_m = linspace(p.train_lo, p.train_hi, 50);
      const ToyReport rep = run_toy_experiment(q, c, T, seed, &data);
      row.mean_epistemic_std += rep.mean_epistemic_in / static_cast<double>(seeds.size());
      row.mean_aleatoric_std += rep.mean_aleatoric_in / static_cast<double>(seeds.size());
    }
    out.push_back(row);
  }
  return out;
}

}  // namespace bdu
