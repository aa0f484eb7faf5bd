// T-pass MC-dropout inference and the uniform Gaussian-mixture predictive
// distribution it defines.
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <thread>
#include <vector>

#include "bdu/likelihood.hpp"

namespace bdu {

struct PredictiveSummary {
  Tensor mean;
  Tensor aleatoric_var;
  Tensor epistemic_var;
  std::size_t T = 0;
  std::vector<Tensor> per_pass_means;  // filled only when retention is requested
  std::vector<Tensor> per_pass_vars;

  Tensor total_var() const { return aleatoric_var + epistemic_var; }
  bool retained() const { return !per_pass_means.empty(); }
};

// Running reduction over passes. Welford's update keeps the spread exactly
// zero when every pass returns the same value.
class MixtureAccumulator {
 public:
  void add(const Tensor& mean, const Tensor& var) {
    if (count_ == 0) {
      mean_ = Tensor(mean.shape());
      m2_ = Tensor(mean.shape());
      var_sum_ = Tensor(mean.shape());
    }
    mean.check_same(mean_, "mixture pass mean");
    var.check_same(mean_, "mixture pass variance");
    ++count_;
    const double inv = 1.0 / static_cast<double>(count_);
    for (std::size_t i = 0; i < mean.size(); ++i) {
      const double delta = mean[i] - mean_[i];
      mean_[i] += delta * inv;
      m2_[i] += delta * (mean[i] - mean_[i]);
      var_sum_[i] += var[i];
    }
  }

  PredictiveSummary summary() const {
    if (count_ == 0) throw ValueError("mixture has no components");
    PredictiveSummary s;
    s.T = count_;
    s.mean = mean_;
    s.aleatoric_var = var_sum_ * (1.0 / static_cast<double>(count_));
    s.epistemic_var = m2_ * (1.0 / static_cast<double>(count_));
    for (std::size_t i = 0; i < s.epistemic_var.size(); ++i) {
      double& e = s.epistemic_var[i];
      if (e < 0.0) {
        if (e < -1e-12) throw NumericError("epistemic variance " + std::to_string(e) + " below clamp threshold");
        e = 0.0;
      }
    }
    return s;
  }

 private:
  std::size_t count_ = 0;
  Tensor mean_, m2_, var_sum_;
};

struct PredictOptions {
  bool retain_passes = false;
  std::size_t chunk = 16;   // passes evaluated together as one batch
  std::size_t threads = 1;  // chunks evaluated concurrently; results do not depend on this
};

// Passes [first, first + count) for one measurement, as (means, variances).
// Every chunk owns a random stream derived from (seed, chunk index), so the
// result is independent of scheduling.
inline std::pair<std::vector<Tensor>, std::vector<Tensor>> run_chunk(LikelihoodModel& model, const Tensor& m,
                                                                     const Tensor& s0, std::uint64_t seed,
                                                                     std::size_t chunk_index, std::size_t count) {
  Rng rng(derive_seed(seed, chunk_index));
  ad::Tape tape;
  ForwardContext ctx{Mode::Stochastic, DropoutSource(&rng)};
  Shape ms{count}, ss{count};
  ms.insert(ms.end(), m.shape().begin(), m.shape().end());
  ss.insert(ss.end(), s0.shape().begin(), s0.shape().end());
  Tensor mb(ms), sb(ss);
  for (std::size_t i = 0; i < count; ++i) {
    mb.set_slice0(i, m);
    sb.set_slice0(i, s0);
  }
  auto out = model.forward(tape, mb, sb, ctx);
  const Tensor var = ad::exp(out.logvar).value();
  std::vector<Tensor> means, vars;
  for (std::size_t i = 0; i < count; ++i) {
    means.push_back(out.mean.value().slice0(i));
    vars.push_back(var.slice0(i));
  }
  return {std::move(means), std::move(vars)};
}

inline PredictiveSummary predict(LikelihoodModel& model, const Tensor& m_in, std::size_t T, std::uint64_t seed,
                                 const PredictOptions& opt = {}) {
  if (T < 1) throw ConfigError("predict requires T >= 1");
  const Tensor m = m_in.reshaped(model.op().output_shape());
  const Tensor s0 = model.start_point(m).reshaped(model.image_shape());
  const std::size_t chunk = std::max<std::size_t>(1, opt.chunk);
  const std::size_t n_chunks = (T + chunk - 1) / chunk;
  std::vector<std::pair<std::vector<Tensor>, std::vector<Tensor>>> results(n_chunks);

  auto work = [&](LikelihoodModel& local, std::size_t c) {
    results[c] = run_chunk(local, m, s0, seed, c, std::min(chunk, T - c * chunk));
  };
  const std::size_t threads = std::min(std::max<std::size_t>(1, opt.threads), n_chunks);
  if (threads == 1) {
    for (std::size_t c = 0; c < n_chunks; ++c) work(model, c);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        LikelihoodModel local = model;  // forward passes write nothing, but tapes keep raw parameter pointers
        for (std::size_t c = t; c < n_chunks; c += threads) work(local, c);
      });
    for (auto& th : pool) th.join();
  }

  MixtureAccumulator acc;
  PredictiveSummary out;
  std::size_t pass = 0;
  for (auto& [means, vars] : results)
    for (std::size_t i = 0; i < means.size(); ++i, ++pass) {
      if (!means[i].all_finite() || !vars[i].all_finite())
        throw NumericError("non-finite output in inference pass " + std::to_string(pass));
      acc.add(means[i], vars[i]);
      if (opt.retain_passes) {
        out.per_pass_means.push_back(std::move(means[i]));
        out.per_pass_vars.push_back(std::move(vars[i]));
      }
    }
  PredictiveSummary s = acc.summary();
  s.per_pass_means = std::move(out.per_pass_means);
  s.per_pass_vars = std::move(out.per_pass_vars);
  return s;
}

// 3 standard deviations per pixel: (epistemic map, aleatoric map).
inline std::pair<Tensor, Tensor> uncertainty_maps(const PredictiveSummary& s) {
  auto map = [](const Tensor& v) {
    Tensor out(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = 3.0 * std::sqrt(std::max(0.0, v[i]));
    return out;
  };
  return {map(s.epistemic_var), map(s.aleatoric_var)};
}

// Mean and variance of the uniform mixture of N(means[t], vars[t]) computed
// directly from second moments: avg(vars) + avg(means^2) - mean^2.
inline std::pair<Tensor, Tensor> mixture_moments(const std::vector<Tensor>& means, const std::vector<Tensor>& vars) {
  if (means.empty()) throw ValueError("mixture_moments: empty stack");
  if (means.size() != vars.size()) throw DimensionError("mixture_moments: stack sizes differ");
  const double inv = 1.0 / static_cast<double>(means.size());
  Tensor mu(means[0].shape()), second(means[0].shape()), var(means[0].shape());
  for (std::size_t t = 0; t < means.size(); ++t) {
    means[t].check_same(mu, "mixture_moments");
    vars[t].check_same(mu, "mixture_moments");
    for (std::size_t i = 0; i < mu.size(); ++i) {
      mu[i] += means[t][i] * inv;
      second[i] += means[t][i] * means[t][i] * inv;
      var[i] += vars[t][i] * inv;
    }
  }
  for (std::size_t i = 0; i < mu.size(); ++i) var[i] += second[i] - mu[i] * mu[i];
  return {mu, var};
}

// Draws from the predictive mixture: a uniform pass index, then that pass's
// diagonal Gaussian. Returns (n_samples, ...image).
inline Tensor sample_predictive(const PredictiveSummary& s, std::size_t n_samples, std::uint64_t seed) {
  if (!s.retained()) throw StateError("sample_predictive needs retained passes or a live model");
  Rng rng(derive_seed(seed, "sample_predictive"));
  const Tensor& first = s.per_pass_means.front();
  Shape shape{n_samples};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  Tensor out(shape);
  const std::size_t per = first.size();
  const std::size_t T = s.per_pass_means.size();
  for (std::size_t n = 0; n < n_samples; ++n) {
    const std::size_t t = std::min(T - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(T)));
    const Tensor& mu = s.per_pass_means[t];
    const Tensor& var = s.per_pass_vars[t];
    for (std::size_t i = 0; i < per; ++i) out[n * per + i] = mu[i] + std::sqrt(var[i]) * standard_normal(rng);
  }
  return out;
}

inline Tensor sample_predictive(LikelihoodModel& model, const Tensor& m, std::size_t T, std::size_t n_samples,
                                std::uint64_t seed) {
  PredictOptions opt;
  opt.retain_passes = true;
  return sample_predictive(predict(model, m, T, derive_seed(seed, "passes"), opt), n_samples, seed);
}

}  // namespace bdu
