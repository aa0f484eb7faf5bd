// Layer specifications and a sequential container built on the tape.
//
// Dropout masks whole output channels (filters) of the preceding layer and
// does not rescale kept channels: a kept filter keeps its mean weight. In the
// deterministic Eval mode dropout multiplies by the keep probability, which
// is the expectation of the mask.
#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "bdu/autodiff.hpp"
#include "bdu/rng.hpp"

namespace bdu {

enum class Mode {
  Train,       // dropout sampled, batch norm uses and updates batch statistics
  Eval,        // deterministic: dropout replaced by its mean, batch norm frozen
  Stochastic,  // MC inference: dropout sampled, batch norm frozen
};

// Supplies dropout masks to a forward pass. Masks are drawn from `rng`, or
// replayed from a recorded list so a pass can be repeated with frozen masks.
class DropoutSource {
 public:
  DropoutSource() = default;
  explicit DropoutSource(Rng* rng, std::vector<Tensor>* record = nullptr) : rng_(rng), record_(record) {}
  static DropoutSource replay(const std::vector<Tensor>& masks) {
    DropoutSource s;
    s.replay_ = &masks;
    return s;
  }

  Tensor next(std::size_t batch, std::size_t channels, double rate) {
    if (replay_) {
      if (cursor_ >= replay_->size()) throw StateError("dropout replay exhausted");
      const Tensor& m = (*replay_)[cursor_++];
      if (m.shape() != Shape{batch, channels}) throw DimensionError("dropout replay mask shape mismatch");
      return m;
    }
    if (!rng_) throw StateError("dropout in a sampling mode requires a random stream");
    Tensor m({batch, channels});
    const double keep = 1.0 - rate;
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = uniform01(*rng_) < keep ? 1.0 : 0.0;
    if (record_) record_->push_back(m);
    return m;
  }

 private:
  Rng* rng_ = nullptr;
  std::vector<Tensor>* record_ = nullptr;
  const std::vector<Tensor>* replay_ = nullptr;
  std::size_t cursor_ = 0;
};

struct ForwardContext {
  Mode mode = Mode::Eval;
  DropoutSource dropout;
};

inline ad::Var dropout(ad::Var x, double rate, ForwardContext& ctx) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  if (ctx.mode == Mode::Eval) return ad::scale(x, 1.0 - rate);
  const Tensor mask = ctx.dropout.next(x.shape()[0], x.shape()[1], rate);
  return ad::channel_mask(x, mask);
}

enum class LayerKind { Conv2d, Dense, LeakyRelu, Relu, BatchNorm, Dropout, MaxPool, Upsample, Exp };

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 3;  // conv only: 3 (pad 1) or 1 (pad 0)
  double slope = 0.01;     // leaky relu
  double rate = 0.0;       // dropout

  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t kernel = 3) {
    if (kernel != 3 && kernel != 1) throw ConfigError("conv kernel must be 3 (pad 1) or 1 (pad 0)");
    return {LayerKind::Conv2d, in, out, kernel};
  }
  static LayerSpec dense(std::size_t in, std::size_t out) { return {LayerKind::Dense, in, out}; }
  static LayerSpec leaky_relu(double slope = 0.01) { return {LayerKind::LeakyRelu, 0, 0, 3, slope}; }
  static LayerSpec relu() { return {LayerKind::Relu}; }
  static LayerSpec batch_norm(std::size_t channels) { return {LayerKind::BatchNorm, channels, channels}; }
  static LayerSpec dropout(double rate) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
    return {LayerKind::Dropout, 0, 0, 3, 0.01, rate};
  }
  static LayerSpec max_pool() { return {LayerKind::MaxPool}; }
  static LayerSpec upsample() { return {LayerKind::Upsample}; }
  static LayerSpec exp() { return {LayerKind::Exp}; }

  std::size_t pad() const { return kernel == 3 ? 1 : 0; }
};

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::Dense: return "dense";
    case LayerKind::LeakyRelu: return "leaky_relu";
    case LayerKind::Relu: return "relu";
    case LayerKind::BatchNorm: return "batch_norm";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::MaxPool: return "max_pool";
    case LayerKind::Upsample: return "bilinear_upsample";
    case LayerKind::Exp: return "elementwise_exp";
  }
  return "?";
}

// One layer with its parameters. Weight layers get PyTorch-style uniform
// initialization with bound 1/sqrt(fan_in).
class Layer {
 public:
  Layer() = default;
  Layer(LayerSpec spec, const std::string& name, Rng& rng) : spec_(spec) {
    switch (spec.kind) {
      case LayerKind::Conv2d: {
        const std::size_t fan_in = spec.in * spec.kernel * spec.kernel;
        weight_ = ad::Parameter(name + ".weight", uniform_tensor({spec.out, spec.in, spec.kernel, spec.kernel}, fan_in, rng));
        bias_ = ad::Parameter(name + ".bias", uniform_tensor({spec.out}, fan_in, rng));
        break;
      }
      case LayerKind::Dense:
        weight_ = ad::Parameter(name + ".weight", uniform_tensor({spec.out, spec.in}, spec.in, rng));
        bias_ = ad::Parameter(name + ".bias", uniform_tensor({spec.out}, spec.in, rng));
        break;
      case LayerKind::BatchNorm:
        weight_ = ad::Parameter(name + ".gamma", Tensor({spec.in}, 1.0));
        bias_ = ad::Parameter(name + ".beta", Tensor({spec.in}, 0.0));
        stats_.running_mean = Tensor({spec.in}, 0.0);
        stats_.running_var = Tensor({spec.in}, 1.0);
        break;
      default:
        break;
    }
  }

  const LayerSpec& spec() const { return spec_; }
  bool has_params() const { return !weight_.value.empty(); }
  ad::Parameter& weight() { return weight_; }
  ad::Parameter& bias() { return bias_; }
  const ad::Parameter& weight() const { return weight_; }
  const ad::Parameter& bias() const { return bias_; }
  ad::BatchNormStats& stats() { return stats_; }
  const ad::BatchNormStats& stats() const { return stats_; }

  ad::Var forward(ad::Tape& tape, ad::Var x, ForwardContext& ctx) {
    switch (spec_.kind) {
      case LayerKind::Conv2d:
        return ad::conv2d(x, tape.param(weight_), tape.param(bias_), spec_.pad());
      case LayerKind::Dense:
        return ad::dense(x, tape.param(weight_), tape.param(bias_));
      case LayerKind::LeakyRelu:
        return ad::leaky_relu(x, spec_.slope);
      case LayerKind::Relu:
        return ad::relu(x);
      case LayerKind::BatchNorm:
        return ad::batch_norm(x, tape.param(weight_), tape.param(bias_), stats_, ctx.mode == Mode::Train);
      case LayerKind::Dropout:
        return dropout(x, spec_.rate, ctx);
      case LayerKind::MaxPool:
        return ad::max_pool2(x);
      case LayerKind::Upsample:
        return ad::upsample_bilinear2(x);
      case LayerKind::Exp:
        return ad::exp(x);
    }
    throw ConfigError("unknown layer kind");
  }

  void set_dropout_rate(double rate) {
    if (spec_.kind == LayerKind::Dropout) spec_ = LayerSpec::dropout(rate);
  }

 private:
  static Tensor uniform_tensor(Shape s, std::size_t fan_in, Rng& rng) {
    Tensor t(std::move(s));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = (2.0 * uniform01(rng) - 1.0) * bound;
    return t;
  }

  LayerSpec spec_;
  ad::Parameter weight_;
  ad::Parameter bias_;
  ad::BatchNormStats stats_;
};

// A chain of layers. A weight layer immediately followed by a dropout layer is
// dropout-governed: its weights belong to the variational family and carry
// the dropout's keep probability for the weight-decay term.
class Sequential {
 public:
  Sequential() = default;
  Sequential(const std::vector<LayerSpec>& specs, const std::string& name, Rng& rng) {
    layers_.reserve(specs.size());
    for (std::size_t i = 0; i < specs.size(); ++i)
      layers_.emplace_back(specs[i], name + "." + std::to_string(i), rng);
    mark_governed();
  }

  ad::Var forward(ad::Tape& tape, ad::Var x, ForwardContext& ctx) {
    for (auto& l : layers_) x = l.forward(tape, x, ctx);
    return x;
  }

  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

  std::vector<ad::Parameter*> parameters() {
    std::vector<ad::Parameter*> out;
    for (auto& l : layers_)
      if (l.has_params()) {
        out.push_back(&l.weight());
        out.push_back(&l.bias());
      }
    return out;
  }

  void set_dropout_rate(double rate) {
    for (auto& l : layers_) l.set_dropout_rate(rate);
    mark_governed();
  }

  bool has_dropout() const {
    for (const auto& l : layers_)
      if (l.spec().kind == LayerKind::Dropout && l.spec().rate > 0) return true;
    return false;
  }

 private:
  void mark_governed() {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto kind = layers_[i].spec().kind;
      if (kind != LayerKind::Conv2d && kind != LayerKind::Dense) continue;
      layers_[i].weight().keep_prob = 0.0;
      if (i + 1 < layers_.size() && layers_[i + 1].spec().kind == LayerKind::Dropout &&
          layers_[i + 1].spec().rate > 0.0)
        layers_[i].weight().keep_prob = 1.0 - layers_[i + 1].spec().rate;
    }
  }

  std::vector<Layer> layers_;
};

// The forward operation over a plain layer list.
inline Tensor forward(Sequential& net, const Tensor& x, Mode mode, Rng* rng = nullptr, bool checked = false) {
  ad::Tape tape(checked);
  ForwardContext ctx{mode, DropoutSource(rng)};
  return net.forward(tape, tape.constant(x), ctx).value();
}

}  // namespace bdu
