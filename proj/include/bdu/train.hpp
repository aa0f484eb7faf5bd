// MC-dropout variational training: heteroscedastic Gaussian NLL on mini-batches
// plus an L2 penalty keep_prob / (2 N_D) on every dropout-governed weight.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "bdu/likelihood.hpp"
#include "bdu/metrics.hpp"

namespace bdu {

struct Dataset {
  std::vector<Tensor> measurements;
  std::vector<Tensor> targets;

  std::size_t size() const { return measurements.size(); }
  void push_back(Tensor m, Tensor s) {
    measurements.push_back(std::move(m));
    targets.push_back(std::move(s));
  }
  Dataset subset(const std::vector<std::size_t>& idx) const {
    Dataset d;
    for (std::size_t i : idx) d.push_back(measurements.at(i), targets.at(i));
    return d;
  }
};

enum class Variant { Proposed, Poam, Poem, Pum, PumWoBn };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Proposed: return "proposed";
    case Variant::Poam: return "POAM";
    case Variant::Poem: return "POEM";
    case Variant::Pum: return "PUM";
    case Variant::PumWoBn: return "PUMwoBN";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::Proposed, Variant::Poam, Variant::Poem, Variant::Pum, Variant::PumWoBn})
    if (s == variant_name(v)) return v;
  if (s == "PUMw/oBN") return Variant::PumWoBn;
  throw ConfigError("unknown variant '" + s + "'");
}

enum class LossKind { Nll, Mse };

struct TrainConfig {
  std::size_t batch_size = 4;
  double learning_rate = 1e-4;
  std::size_t epochs = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double validation_fraction = 0.1;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::Nll;
  bool checked = false;  // reject non-finite intermediates immediately
  bool verbose = false;

  void validate(std::size_t n_train) const {
    if (batch_size == 0 || batch_size > n_train)
      throw ConfigError("batch size must lie in [1, " + std::to_string(n_train) + "]");
    if (!(learning_rate >= 0)) throw ConfigError("learning rate must be non-negative");
    if (validation_fraction < 0 || validation_fraction >= 1) throw ConfigError("validation fraction must lie in [0, 1)");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double val_nll = std::numeric_limits<double>::quiet_NaN();  // per pixel, includes the 1/2 log 2 pi constant
  double val_ssim = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> records;
  std::size_t best_epoch = 0;
};

struct TrainResult {
  TrainHistory history;
  std::vector<std::pair<std::string, Tensor>> best_state;   // lowest validation objective
  std::vector<std::pair<std::string, Tensor>> final_state;  // after the last epoch
};

inline double weight_decay_coefficient(double dropout_rate, std::size_t n_train) {
  if (dropout_rate < 0 || dropout_rate >= 1) throw ConfigError("dropout rate must lie in [0, 1)");
  if (n_train == 0) throw ConfigError("n_train must be at least 1");
  return (1.0 - dropout_rate) / (2.0 * static_cast<double>(n_train));
}

class Adam {
 public:
  Adam(double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8) : lr_(lr), b1_(b1), b2_(b2), eps_(eps) {}

  void step(const std::vector<ad::Parameter*>& params) {
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
      }
    }
    if (m_.size() != params.size()) throw StateError("optimizer parameter list changed");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t j = 0; j < params.size(); ++j) {
      ad::Parameter& p = *params[j];
      if (!p.trainable) continue;
      Tensor &m = m_[j], &v = v_[j];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        m[i] = b1_ * m[i] + (1.0 - b1_) * g;
        v[i] = b2_ * v[i] + (1.0 - b2_) * g * g;
        p.value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

namespace detail {

inline Tensor stack_batch(const std::vector<Tensor>& items, const std::vector<std::size_t>& idx, std::size_t lo,
                          std::size_t hi, const Shape& item_shape) {
  Shape s{hi - lo};
  s.insert(s.end(), item_shape.begin(), item_shape.end());
  Tensor out(s);
  const std::size_t per = shape_numel(item_shape);
  for (std::size_t b = lo; b < hi; ++b) {
    const Tensor& t = items.at(idx[b]);
    if (t.size() != per) throw DimensionError("dataset item has " + std::to_string(t.size()) + " elements, expected " +
                                              std::to_string(per));
    std::copy_n(t.data(), per, out.data() + (b - lo) * per);
  }
  return out;
}

inline ad::Var batch_loss(LikelihoodModel::Output out, const Tensor& target, LossKind kind) {
  return kind == LossKind::Nll ? ad::gaussian_nll(out.mean, out.logvar, target) : ad::mse(out.mean, target);
}

}  // namespace detail

// Mini-batch objective (without the weight-decay term) on one stacked batch.
inline double nll_batch_loss(LikelihoodModel& model, const Tensor& m, const Tensor& s, Rng& rng,
                             LossKind kind = LossKind::Nll) {
  if (m.dim(0) == 0) throw ValueError("empty batch");
  ad::Tape tape;
  ForwardContext ctx{Mode::Train, DropoutSource(&rng)};
  Tensor s0(s.shape());
  for (std::size_t i = 0; i < m.dim(0); ++i) s0.set_slice0(i, model.start_point(m.slice0(i)).reshaped(model.image_shape()));
  const double loss = detail::batch_loss(model.forward(tape, m, s0, ctx), s, kind).value()[0];
  if (!std::isfinite(loss)) throw NumericError("non-finite loss in batch 0");
  return loss;
}

// Per-pixel Gaussian NLL (with the 1/2 log 2 pi constant) and mean SSIM of
// the deterministic (Eval-mode) prediction over a dataset.
inline std::pair<double, double> evaluate(LikelihoodModel& model, const Dataset& data,
                                          const std::vector<Tensor>& starts, std::size_t batch_size) {
  double nll = 0.0, q = 0.0;
  std::size_t pixels = 0;
  const bool image = model.image_shape().size() == 3;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t lo = 0; lo < data.size(); lo += batch_size) {
    const std::size_t hi = std::min(data.size(), lo + batch_size);
    ad::Tape tape;
    ForwardContext ctx{Mode::Eval, {}};
    const Tensor m = detail::stack_batch(data.measurements, idx, lo, hi, model.op().output_shape());
    const Tensor s0 = detail::stack_batch(starts, idx, lo, hi, model.image_shape());
    const Tensor s = detail::stack_batch(data.targets, idx, lo, hi, model.image_shape());
    auto out = model.forward(tape, m, s0, ctx);
    const Tensor& f = out.mean.value();
    const Tensor& lv = out.logvar.value();
    for (std::size_t i = 0; i < f.size(); ++i) {
      const double r = s[i] - f[i];
      nll += 0.5 * std::log(2.0 * kPi) + 0.5 * lv[i] + 0.5 * std::exp(-lv[i]) * r * r;
    }
    pixels += f.size();
    if (image)
      for (std::size_t b = 0; b < hi - lo; ++b) q += ssim(f.slice0(b), s.slice0(b));
  }
  return {nll / static_cast<double>(pixels), image ? q / static_cast<double>(data.size())
                                                   : std::numeric_limits<double>::quiet_NaN()};
}

// Trains in place on `train_set`, selecting the best state on `val_set`
// (per-pixel NLL, or MSE for MSE-trained variants). The model is left at its
// final weights.
inline TrainResult train(LikelihoodModel& model, const Dataset& train_set, const Dataset& val_set,
                         const TrainConfig& cfg) {
  const std::size_t n = train_set.size();
  cfg.validate(n);
  auto params = model.parameters();
  const double decay_scale = 1.0 / (2.0 * static_cast<double>(n));

  std::vector<Tensor> starts, val_starts;
  for (const auto& m : train_set.measurements) starts.push_back(model.start_point(m).reshaped(model.image_shape()));
  for (const auto& m : val_set.measurements) val_starts.push_back(model.start_point(m).reshaped(model.image_shape()));

  Rng shuffle_rng(derive_seed(cfg.seed, "train.shuffle"));
  Rng dropout_rng(derive_seed(cfg.seed, "train.dropout"));
  Adam adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);

  TrainResult res;
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto last_good = model.snapshot();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t lo = 0; lo < n; lo += cfg.batch_size) {
      const std::size_t hi = std::min(n, lo + cfg.batch_size);
      const Tensor m = detail::stack_batch(train_set.measurements, order, lo, hi, model.op().output_shape());
      const Tensor s0 = detail::stack_batch(starts, order, lo, hi, model.image_shape());
      const Tensor s = detail::stack_batch(train_set.targets, order, lo, hi, model.image_shape());
      for (auto* p : params) p->zero_grad();
      double loss = 0.0;
      try {
        ad::Tape tape(cfg.checked);
        ForwardContext ctx{Mode::Train, DropoutSource(&dropout_rng)};
        const ad::Var l = detail::batch_loss(model.forward(tape, m, s0, ctx), s, cfg.loss);
        loss = l.value()[0];
        if (!std::isfinite(loss)) throw NumericError("non-finite loss");
        tape.backward(l);
      } catch (const NumericError& e) {
        model.restore(last_good);
        throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches) + "; weights restored to the end of epoch " +
                           std::to_string(epoch - 1));
      }
      for (auto* p : params) {
        if (p->keep_prob <= 0.0) continue;
        const double c = 2.0 * p->keep_prob * decay_scale;
        for (std::size_t i = 0; i < p->value.size(); ++i) {
          p->grad[i] += c * p->value[i];
          loss += 0.5 * c * p->value[i] * p->value[i];
        }
      }
      adam.step(params);
      loss_sum += loss;
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean_loss = loss_sum / static_cast<double>(batches);
    double selection = rec.mean_loss;
    if (val_set.size() > 0) {
      auto [nll, q] = evaluate(model, val_set, val_starts, cfg.batch_size);
      rec.val_nll = nll;
      rec.val_ssim = q;
      selection = nll;
      if (cfg.loss == LossKind::Mse) {
        double se = 0.0;
        std::size_t cnt = 0;
        for (std::size_t i = 0; i < val_set.size(); ++i) {
          const Tensor f = unrolled_forward(model, val_set.measurements[i], Mode::Eval);
          const Tensor& y = val_set.targets[i];
          for (std::size_t k = 0; k < f.size(); ++k) se += (f[k] - y[k]) * (f[k] - y[k]);
          cnt += f.size();
        }
        selection = se / static_cast<double>(cnt);
      }
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!std::isfinite(rec.mean_loss)) {
      model.restore(last_good);
      throw NumericError("non-finite mean loss at epoch " + std::to_string(epoch));
    }
    if (selection < best || res.best_state.empty()) {
      best = selection;
      res.history.best_epoch = epoch;
      res.best_state = model.snapshot();
    }
    res.history.records.push_back(rec);
  }
  res.final_state = model.snapshot();
  if (res.best_state.empty()) res.best_state = res.final_state;
  return res;
}

// Splits off a seeded validation fraction and trains on the remainder.
inline std::pair<Dataset, Dataset> split_validation(const Dataset& data, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, "train.validation_split"));
  std::shuffle(idx.begin(), idx.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(std::round(fraction * static_cast<double>(data.size())));
  if (fraction > 0 && n_val == 0 && data.size() > 1) n_val = 1;
  const std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<long>(n_val));
  std::vector<std::size_t> tr(idx.begin() + static_cast<long>(n_val), idx.end());
  std::sort(tr.begin(), tr.end());
  return {data.subset(tr), data.subset(val)};
}

inline TrainResult train(LikelihoodModel& model, const Dataset& data, const TrainConfig& cfg) {
  auto [tr, val] = split_validation(data, cfg.validation_fraction, cfg.seed);
  return train(model, tr, val, cfg);
}

// Model configuration each comparison variant expects.
inline ModelConfig variant_model_config(ModelConfig base, Variant v) {
  switch (v) {
    case Variant::Proposed:
      base.covariance = CovarianceMode::learned_diag();
      base.f.batch_norm = false;
      break;
    case Variant::Poam:
      base.covariance = CovarianceMode::learned_diag();
      base.f.batch_norm = false;
      base.dropout_rate = 0.0;
      break;
    case Variant::Poem:
      base.covariance = CovarianceMode::fixed_scalar(0.1);
      base.f.batch_norm = false;
      break;
    case Variant::Pum:
      base.f.batch_norm = true;
      base.dropout_rate = 0.0;
      break;
    case Variant::PumWoBn:
      base.f.batch_norm = false;
      base.dropout_rate = 0.0;
      break;
  }
  return base;
}

inline void check_variant(const ModelConfig& c, Variant v) {
  const auto fail = [&](const std::string& why) {
    throw ConfigError(std::string("variant ") + variant_name(v) + ": " + why);
  };
  switch (v) {
    case Variant::Proposed:
      if (!c.covariance.learned) fail("requires a learned diagonal covariance");
      if (c.f.batch_norm) fail("unrolled blocks must not use batch norm");
      break;
    case Variant::Poam:
      if (!c.covariance.learned) fail("requires a learned diagonal covariance");
      if (c.f.batch_norm) fail("unrolled blocks must not use batch norm");
      if (c.dropout_rate != 0.0) fail("requires dropout rate 0");
      break;
    case Variant::Poem:
      if (c.covariance.learned || c.covariance.fixed_value != 0.1) fail("requires fixed_scalar(0.1) covariance");
      if (c.f.batch_norm) fail("unrolled blocks must not use batch norm");
      break;
    case Variant::Pum:
      if (!c.f.batch_norm) fail("requires batch norm in the unrolled blocks");
      if (c.dropout_rate != 0.0) fail("requires dropout rate 0");
      break;
    case Variant::PumWoBn:
      if (c.f.batch_norm) fail("must not use batch norm in the unrolled blocks");
      if (c.dropout_rate != 0.0) fail("requires dropout rate 0");
      break;
  }
}

inline LossKind variant_loss(Variant v) {
  return v == Variant::Pum || v == Variant::PumWoBn ? LossKind::Mse : LossKind::Nll;
}

inline TrainResult train_variant(LikelihoodModel& model, const Dataset& train_set, const Dataset& val_set,
                                 TrainConfig cfg, Variant v) {
  check_variant(model.config(), v);
  cfg.loss = variant_loss(v);
  return train(model, train_set, val_set, cfg);
}

}  // namespace bdu
