// Gaussian likelihood N(s | f(m), diag(sigma^2(m))) built from
//
//   f        K unrolled proximal-gradient iterations
//              z      = s - 2 alpha A^T (A s - m)
//              s_next = z + R_k(z)
//            with an untied residual network R_k per iteration
//   sigma^2  an image-to-image U-shaped network (or an MLP for scalar
//            problems) fed the start-point image; it predicts log sigma^2
//            and the variance is its elementwise exponential.
//
// The step size is stored as log(alpha) so that it stays positive.
#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "bdu/classical.hpp"
#include "bdu/layers.hpp"
#include "bdu/operators.hpp"

namespace bdu {

struct UnrolledConfig {
  std::size_t iterations = 5;
  double alpha_init = 1.0;
  std::size_t width = 32;          // internal channels (or MLP units)
  double leaky_slope = 0.01;
  bool batch_norm = false;         // conv -> batch norm -> activation, no dropout
  std::size_t mlp_hidden_layers = 3;
  bool operator==(const UnrolledConfig&) const = default;
};

struct VarianceNetConfig {
  std::size_t base_channels = 16;  // U-Net width at full resolution (or MLP units)
  std::size_t depth = 2;           // number of 2x down/up levels
  std::size_t mlp_hidden_layers = 2;
  bool operator==(const VarianceNetConfig&) const = default;
};

struct CovarianceMode {
  bool learned = true;
  double fixed_value = 0.1;  // used when !learned; 0.1 gives the fixed (1/10) I model

  static CovarianceMode learned_diag() { return {true, 0.1}; }
  static CovarianceMode fixed_scalar(double c) {
    if (!(c > 0)) throw ConfigError("fixed covariance requires c > 0");
    return {false, c};
  }
  bool operator==(const CovarianceMode&) const = default;
};

struct ModelConfig {
  OperatorDesc op;
  UnrolledConfig f;
  VarianceNetConfig var;
  double dropout_rate = 0.1;
  CovarianceMode covariance;
  std::uint64_t init_seed = 0;
  bool operator==(const ModelConfig&) const = default;
};

// Residual proximal block acting on images (N, C, H, W) or scalars (N, 1).
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(std::size_t channels, bool scalar, const UnrolledConfig& cfg, double rate, const std::string& name,
                Rng& rng) {
    std::vector<LayerSpec> s;
    const std::size_t w = cfg.width;
    if (scalar) {
      // dense -> dropout -> activation per hidden layer, plain output layer
      std::size_t in = 1;
      for (std::size_t l = 0; l < cfg.mlp_hidden_layers; ++l) {
        s.push_back(LayerSpec::dense(in, w));
        s.push_back(LayerSpec::dropout(rate));
        s.push_back(LayerSpec::leaky_relu(cfg.leaky_slope));
        in = w;
      }
      s.push_back(LayerSpec::dense(in, 1));
    } else {
      // 1x1 in, three 3x3, 1x1 out; dropout after every conv but the first
      const std::vector<LayerSpec> convs{LayerSpec::conv(channels, w, 1), LayerSpec::conv(w, w, 3),
                                         LayerSpec::conv(w, w, 3), LayerSpec::conv(w, w, 3),
                                         LayerSpec::conv(w, channels, 1)};
      for (std::size_t i = 0; i < convs.size(); ++i) {
        s.push_back(convs[i]);
        if (cfg.batch_norm)
          s.push_back(LayerSpec::batch_norm(convs[i].out));
        else if (i > 0)
          s.push_back(LayerSpec::dropout(rate));
        s.push_back(LayerSpec::leaky_relu(cfg.leaky_slope));
      }
    }
    net_ = Sequential(s, name, rng);
  }

  ad::Var forward(ad::Tape& tape, ad::Var z, ForwardContext& ctx) { return ad::add(z, net_.forward(tape, z, ctx)); }

  Sequential& net() { return net_; }
  const Sequential& net() const { return net_; }

 private:
  Sequential net_;
};

// U-shaped log-variance network: (conv -> dropout -> batch norm -> relu) x2
// per level, 2x2 max pooling down, bilinear x2 up with channel-concatenated
// skips, and a final 3x3 conv followed by dropout.
class UNet {
 public:
  UNet() = default;
  UNet(std::size_t channels, const VarianceNetConfig& cfg, double rate, const std::string& name, Rng& rng)
      : depth_(cfg.depth) {
    auto stage = [&](std::size_t in, std::size_t out, const std::string& n) {
      return Sequential({LayerSpec::conv(in, out), LayerSpec::dropout(rate), LayerSpec::batch_norm(out),
                         LayerSpec::relu(), LayerSpec::conv(out, out), LayerSpec::dropout(rate),
                         LayerSpec::batch_norm(out), LayerSpec::relu()},
                        n, rng);
    };
    std::size_t in = channels;
    for (std::size_t l = 0; l <= depth_; ++l) {
      const std::size_t out = cfg.base_channels << l;
      down_.push_back(stage(in, out, name + ".down" + std::to_string(l)));
      in = out;
    }
    for (std::size_t l = depth_; l-- > 0;) {
      const std::size_t skip = cfg.base_channels << l;
      up_.push_back(stage(in + skip, skip, name + ".up" + std::to_string(l)));
      in = skip;
    }
    head_ = Sequential({LayerSpec::conv(in, channels), LayerSpec::dropout(rate)}, name + ".head", rng);
  }

  ad::Var forward(ad::Tape& tape, ad::Var x, ForwardContext& ctx) {
    const auto& s = x.shape();
    const std::size_t f = std::size_t{1} << depth_;
    if (s[2] % f != 0 || s[3] % f != 0)
      throw DimensionError("variance network needs extents divisible by " + std::to_string(f));
    std::vector<ad::Var> skips;
    for (std::size_t l = 0; l <= depth_; ++l) {
      x = down_[l].forward(tape, x, ctx);
      if (l < depth_) {
        skips.push_back(x);
        x = ad::max_pool2(x);
      }
    }
    for (std::size_t i = 0; i < depth_; ++i) {
      x = ad::concat_channels(ad::upsample_bilinear2(x), skips[depth_ - 1 - i]);
      x = up_[i].forward(tape, x, ctx);
    }
    return head_.forward(tape, x, ctx);
  }

  std::vector<Sequential*> stages() {
    std::vector<Sequential*> out;
    for (auto& d : down_) out.push_back(&d);
    for (auto& u : up_) out.push_back(&u);
    out.push_back(&head_);
    return out;
  }

 private:
  std::size_t depth_ = 0;
  std::vector<Sequential> down_, up_;
  Sequential head_;
};

class LikelihoodModel {
 public:
  struct Output {
    ad::Var mean;
    ad::Var logvar;
  };

  LikelihoodModel() = default;
  explicit LikelihoodModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.f.iterations < 1) throw ConfigError("unrolled network needs at least one iteration");
    if (!(cfg_.f.alpha_init > 0)) throw ConfigError("initial step size must be positive");
    if (cfg_.dropout_rate < 0 || cfg_.dropout_rate >= 1) throw ConfigError("dropout rate must lie in [0, 1)");
    op_ = make_operator(cfg_.op);
    cfg_.op = op_.descriptor();
    scalar_ = std::holds_alternative<ScalarDesc>(cfg_.op);
    const std::size_t channels = op_.input_shape()[0];
    Rng rng(derive_seed(cfg_.init_seed, "model_init"));
    log_alpha_ = ad::Parameter("f.log_alpha", Tensor::scalar(std::log(cfg_.f.alpha_init)));
    for (std::size_t k = 0; k < cfg_.f.iterations; ++k)
      blocks_.emplace_back(channels, scalar_, cfg_.f, cfg_.dropout_rate, "f.block" + std::to_string(k), rng);
    if (scalar_) {
      std::vector<LayerSpec> s;
      std::size_t in = 1;
      for (std::size_t l = 0; l < cfg_.var.mlp_hidden_layers; ++l) {
        s.push_back(LayerSpec::dense(in, cfg_.var.base_channels));
        s.push_back(LayerSpec::dropout(cfg_.dropout_rate));
        s.push_back(LayerSpec::relu());
        in = cfg_.var.base_channels;
      }
      s.push_back(LayerSpec::dense(in, 1));
      var_mlp_ = Sequential(s, "var.mlp", rng);
    } else {
      unet_ = UNet(channels, cfg_.var, cfg_.dropout_rate, "var.unet", rng);
    }
  }

  // The network holds raw pointers into its own layers only while a tape is
  // alive; copying is safe between passes.
  LikelihoodModel(const LikelihoodModel&) = default;
  LikelihoodModel& operator=(const LikelihoodModel&) = default;

  const ModelConfig& config() const { return cfg_; }
  const LinearOperator& op() const { return op_; }
  double alpha() const { return std::exp(log_alpha_.value[0]); }
  double dropout_rate() const { return cfg_.dropout_rate; }
  bool has_dropout() const { return cfg_.dropout_rate > 0 && !cfg_.f.batch_norm; }
  ResidualBlock& block(std::size_t k) { return blocks_.at(k); }
  ad::Parameter& log_alpha() { return log_alpha_; }

  // Image shape (C, H, W) or (1) for scalar problems.
  const Shape& image_shape() const { return op_.input_shape(); }

  Tensor start_point(const Tensor& m) const { return bdu::start_point(op_, m); }

  // Batched forward pass. `m` is (N, ...measurement), `s0` the matching
  // start points (N, ...image). Mean and variance networks draw their dropout
  // masks from one context, so a pass uses one joint parameter sample.
  Output forward(ad::Tape& tape, const Tensor& m, const Tensor& s0, ForwardContext& ctx,
                 std::vector<Tensor>* iterates = nullptr) {
    const std::size_t n = s0.dim(0);
    Shape img{n};
    img.insert(img.end(), image_shape().begin(), image_shape().end());
    if (s0.shape() != img) throw DimensionError("start point shape " + shape_str(s0.shape()) + " expected " + shape_str(img));
    Shape meas{n};
    meas.insert(meas.end(), op_.output_shape().begin(), op_.output_shape().end());
    if (m.shape() != meas)
      throw DimensionError("measurement shape " + shape_str(m.shape()) + " expected " + shape_str(meas));

    // A^T m per batch element.
    Tensor atm(img);
    for (std::size_t i = 0; i < n; ++i) atm.set_slice0(i, op_.adjoint(m.slice0(i)));
    const ad::Var atm_v = tape.constant(std::move(atm));
    const ad::Var start = tape.constant(s0);

    const ad::Var log_alpha = tape.param(log_alpha_);
    const ad::Var neg_two_alpha = ad::scale(ad::exp(log_alpha), -2.0);
    const LinearOperator op = op_;
    auto normal = [op](const Tensor& x) { return op.normal(x); };

    ad::Var s = start;
    if (iterates) iterates->push_back(s.value());
    for (std::size_t k = 0; k < blocks_.size(); ++k) {
      const ad::Var grad = ad::sub(ad::linear_map(s, normal, normal), atm_v);
      ad::Var z = ad::affine_combination(s, neg_two_alpha, grad);
      s = blocks_[k].forward(tape, z, ctx);
      if (iterates) iterates->push_back(s.value());
    }

    ad::Var logvar;
    if (!cfg_.covariance.learned) {
      logvar = tape.constant(Tensor(img, std::log(cfg_.covariance.fixed_value)));
    } else if (scalar_) {
      logvar = var_mlp_.forward(tape, start, ctx);
    } else {
      logvar = unet_.forward(tape, start, ctx);
    }
    return {s, logvar};
  }

  // Every trainable parameter, mean network first.
  std::vector<ad::Parameter*> parameters() {
    std::vector<ad::Parameter*> out{&log_alpha_};
    for (auto& b : blocks_)
      for (auto* p : b.net().parameters()) out.push_back(p);
    if (!cfg_.covariance.learned) return out;
    for (auto* p : variance_parameters()) out.push_back(p);
    return out;
  }

  std::vector<ad::Parameter*> variance_parameters() {
    std::vector<ad::Parameter*> out;
    if (scalar_) {
      out = var_mlp_.parameters();
    } else {
      for (auto* st : unet_.stages())
        for (auto* p : st->parameters()) out.push_back(p);
    }
    return out;
  }

  // Parameters plus batch-norm running statistics, keyed by stable names.
  std::vector<std::pair<std::string, Tensor*>> state() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back(log_alpha_.name, &log_alpha_.value);
    auto add_seq = [&](Sequential& seq) {
      for (auto& l : seq.layers()) {
        if (!l.has_params()) continue;
        out.emplace_back(l.weight().name, &l.weight().value);
        out.emplace_back(l.bias().name, &l.bias().value);
        if (l.spec().kind == LayerKind::BatchNorm) {
          out.emplace_back(l.weight().name + ".running_mean", &l.stats().running_mean);
          out.emplace_back(l.weight().name + ".running_var", &l.stats().running_var);
        }
      }
    };
    for (auto& b : blocks_) add_seq(b.net());
    if (scalar_)
      add_seq(var_mlp_);
    else
      for (auto* st : unet_.stages()) add_seq(*st);
    return out;
  }

  std::vector<std::pair<std::string, Tensor>> snapshot() {
    std::vector<std::pair<std::string, Tensor>> out;
    for (auto& [name, t] : state()) out.emplace_back(name, *t);
    return out;
  }

  void restore(const std::vector<std::pair<std::string, Tensor>>& snap) {
    auto st = state();
    if (st.size() != snap.size()) throw StateError("snapshot does not match model layout");
    for (std::size_t i = 0; i < st.size(); ++i) {
      if (st[i].first != snap[i].first || st[i].second->shape() != snap[i].second.shape())
        throw StateError("snapshot entry mismatch at " + st[i].first);
      *st[i].second = snap[i].second;
    }
  }

 private:
  ModelConfig cfg_;
  LinearOperator op_;
  bool scalar_ = false;
  ad::Parameter log_alpha_;
  std::vector<ResidualBlock> blocks_;
  UNet unet_;
  Sequential var_mlp_;
};

namespace detail {
inline Tensor batch1(const Tensor& t) {
  Shape s{1};
  s.insert(s.end(), t.shape().begin(), t.shape().end());
  return t.reshaped(s);
}
}  // namespace detail

// Single-measurement mean image s^(K).
inline Tensor unrolled_forward(LikelihoodModel& model, const Tensor& m, Mode mode, Rng* rng = nullptr,
                               std::vector<Tensor>* iterates = nullptr) {
  ad::Tape tape;
  ForwardContext ctx{mode, DropoutSource(rng)};
  const Tensor s0 = model.start_point(m);
  auto out = model.forward(tape, detail::batch1(m), detail::batch1(s0), ctx, iterates);
  if (iterates)
    for (auto& it : *iterates) it = it.slice0(0);
  return out.mean.value().slice0(0);
}

// Single-measurement per-pixel variance (strictly positive).
inline Tensor variance_forward(LikelihoodModel& model, const Tensor& m, Mode mode, Rng* rng = nullptr) {
  ad::Tape tape;
  ForwardContext ctx{mode, DropoutSource(rng)};
  const Tensor s0 = model.start_point(m);
  auto out = model.forward(tape, detail::batch1(m), detail::batch1(s0), ctx);
  return ad::exp(out.logvar).value().slice0(0);
}

// Gaussian log density including the -1/2 log 2 pi constants.
inline double gaussian_log_likelihood(const Tensor& mean, const Tensor& variance, const Tensor& target) {
  mean.check_same(target, "log_likelihood");
  mean.check_same(variance, "log_likelihood");
  double ll = 0.0;
  for (std::size_t k = 0; k < mean.size(); ++k) {
    if (!(variance[k] > 0)) throw NumericError("log_likelihood: non-positive variance");
    const double r = target[k] - mean[k];
    ll += -0.5 * std::log(2.0 * kPi) - 0.5 * std::log(variance[k]) - r * r / (2.0 * variance[k]);
  }
  return ll;
}

inline double log_likelihood(LikelihoodModel& model, const Tensor& m, const Tensor& target, Mode mode,
                             Rng* rng = nullptr) {
  ad::Tape tape;
  ForwardContext ctx{mode, DropoutSource(rng)};
  const Tensor s0 = model.start_point(m);
  auto out = model.forward(tape, detail::batch1(m), detail::batch1(s0), ctx);
  return gaussian_log_likelihood(out.mean.value().slice0(0), ad::exp(out.logvar).value().slice0(0),
                                 target.reshaped(model.image_shape()));
}

}  // namespace bdu
