// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every primitive applied during one forward pass. Nodes are
// appended in evaluation order, so replaying their adjoints in reverse
// creation order visits the graph in reverse topological order, each node
// exactly once. Parameters are leaves whose adjoints accumulate into
// Parameter::grad.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "bdu/tensor.hpp"

namespace bdu::ad {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
  // Keep probability of the dropout governing this weight's filters; 0 when
  // the weight is not part of the Bayesian (dropout) family.
  double keep_prob = 0.0;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool train = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), trainable(train) {}

  void zero_grad() { grad = Tensor(value.shape()); }
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  // Checked mode rejects non-finite values as soon as they are produced.
  explicit Tape(bool checked = false) : checked_(checked) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor v) { return push(std::move(v), false, nullptr, {}); }

  Var param(Parameter& p) {
    Var v = push(p.value, p.trainable, nullptr, {});
    nodes_[v.id].param = p.trainable ? &p : nullptr;
    return v;
  }

  // Appends a node produced from `inputs`; gradient flows only if an input needs it.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward fn) {
    bool needs = false;
    for (const Var& in : inputs) needs = needs || nodes_[in.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr, inputs);
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool checked() const { return checked_; }

  // Gradient buffer of a node, allocated on first use.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }
  bool wants(std::size_t id) const { return nodes_[id].requires_grad; }

  void backward(Var out, const Tensor& seed) {
    if (seed.shape() != nodes_[out.id].value.shape())
      throw DimensionError("backward seed shape " + shape_str(seed.shape()) + " does not match output " +
                           shape_str(nodes_[out.id].value.shape()));
    if (!nodes_[out.id].requires_grad) return;
    grad(out.id) += seed;
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      Tensor g = std::move(n.grad);
      n.grad = Tensor();
      if (n.param) n.param->grad += g;
      if (n.backward) n.backward(*this, g);
    }
  }

  void backward(Var scalar_out) { backward(scalar_out, Tensor(nodes_[scalar_out.id].value.shape(), 1.0)); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    Backward backward;
  };

  Var push(Tensor v, bool needs, Backward fn, std::initializer_list<Var> inputs) {
    for (const Var& in : inputs)
      if (in.tape != this) throw StateError("variable belongs to a different tape");
    if (checked_ && !v.all_finite())
      throw NumericError("non-finite value produced at tape node " + std::to_string(nodes_.size()));
    nodes_.push_back(Node{std::move(v), Tensor(), needs, nullptr, std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  bool checked_ = false;
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

// Column matrix (C*k*k, H*W) for one image (C, H, W), zero padding `pad`.
inline void im2col(const double* img, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
                   std::size_t pad, double* cols) {
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols + ((ci * k + ky) * k + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y + ky) - static_cast<long>(pad);
          for (std::size_t x = 0; x < w; ++x) {
            const long sx = static_cast<long>(x + kx) - static_cast<long>(pad);
            row[y * w + x] = (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w))
                                 ? 0.0
                                 : img[(ci * h + sy) * w + sx];
          }
        }
      }
}

inline void col2im(const double* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
                   std::size_t pad, double* img) {
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols + ((ci * k + ky) * k + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y + ky) - static_cast<long>(pad);
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          for (std::size_t x = 0; x < w; ++x) {
            const long sx = static_cast<long>(x + kx) - static_cast<long>(pad);
            if (sx < 0 || sx >= static_cast<long>(w)) continue;
            img[(ci * h + sy) * w + sx] += row[y * w + x];
          }
        }
      }
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

inline Var add(Var a, Var b) {
  Tape& t = *a.tape;
  a.value().check_same(b.value(), "add");
  return t.record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.wants(a.id)) t.grad(a.id) += g;
    if (t.wants(b.id)) t.grad(b.id) += g;
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = *a.tape;
  a.value().check_same(b.value(), "sub");
  return t.record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.wants(a.id)) t.grad(a.id) += g;
    if (t.wants(b.id)) t.grad(b.id) -= g;
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  av.check_same(bv, "mul");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a.id);
    const Tensor& bv = t.value(b.id);
    if (t.wants(a.id)) {
      Tensor& ga = t.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.wants(b.id)) {
      Tensor& gb = t.grad(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double s) {
  return a.tape->record(a.value() * s, {a}, [a, s](Tape& t, const Tensor& g) { t.grad(a.id) += g * s; });
}

// Scalar variable (one element) times tensor.
inline Var scale_by(Var s, Var x) {
  if (s.value().size() != 1) throw DimensionError("scale_by expects a one-element scale");
  const double sv = s.value()[0];
  return x.tape->record(x.value() * sv, {s, x}, [s, x](Tape& t, const Tensor& g) {
    if (t.wants(s.id)) t.grad(s.id)[0] += dot(g, t.value(x.id));
    if (t.wants(x.id)) t.grad(x.id) += g * t.value(s.id)[0];
  });
}

// a + coef * b with a learnable one-element coefficient.
inline Var affine_combination(Var a, Var coef, Var b) { return add(a, scale_by(coef, b)); }

inline Var exp(Var a) {
  Tensor out = detail::map(a.value(), [](double v) { return std::exp(v); });
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    const Tensor& ex = t.value(a.id);
    Tensor& ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * std::exp(ex[i]);
  });
}

inline Var leaky_relu(Var a, double slope) {
  Tensor out = detail::map(a.value(), [slope](double v) { return v > 0 ? v : slope * v; });
  return a.tape->record(std::move(out), {a}, [a, slope](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a.id);
    Tensor& ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += x[i] > 0 ? g[i] : slope * g[i];
  });
}

inline Var relu(Var a) { return leaky_relu(a, 0.0); }

inline Var sum(Var a) {
  return a.tape->record(Tensor::scalar(bdu::sum(a.value())), {a},
                        [a](Tape& t, const Tensor& g) {
                          Tensor& ga = t.grad(a.id);
                          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
                        });
}

inline Var reshape(Var a, Shape s) {
  Shape orig = a.value().shape();
  return a.tape->record(a.value().reshaped(std::move(s)), {a},
                        [a, orig](Tape& t, const Tensor& g) { t.grad(a.id) += g.reshaped(orig); });
}

// ---- layers ----------------------------------------------------------------

// x: (N, Ci, H, W), w: (Co, Ci, k, k), b: (Co). Stride 1, zero padding.
inline Var conv2d(Var x, Var w, Var b, std::size_t pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(2) != wv.dim(3) || wv.dim(1) != xv.dim(1) ||
      b.value().size() != wv.dim(0))
    throw DimensionError("conv2d: input " + shape_str(xv.shape()) + " weight " + shape_str(wv.shape()));
  const std::size_t n = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const std::size_t co = wv.dim(0), k = wv.dim(2);
  if (h + 2 * pad < k || wd + 2 * pad < k || h + 2 * pad - k + 1 != h || wd + 2 * pad - k + 1 != wd)
    throw DimensionError("conv2d: only extent-preserving kernel/pad pairs are supported");
  const std::size_t kk = ci * k * k, hw = h * wd;
  Tensor out({n, co, h, wd});
  std::vector<double> cols(kk * hw);
  detail::CMapMat W(wv.data(), co, kk);
  for (std::size_t i = 0; i < n; ++i) {
    detail::im2col(xv.data() + i * ci * hw, ci, h, wd, k, pad, cols.data());
    detail::MapMat O(out.data() + i * co * hw, co, hw);
    O.noalias() = W * detail::CMapMat(cols.data(), kk, hw);
    for (std::size_t c = 0; c < co; ++c) O.row(c).array() += b.value()[c];
  }
  return x.tape->record(std::move(out), {x, w, b}, [x, w, b, pad](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(x.id);
    const Tensor& wv = t.value(w.id);
    const std::size_t n = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
    const std::size_t co = wv.dim(0), k = wv.dim(2), kk = ci * k * k, hw = h * wd;
    std::vector<double> cols(kk * hw);
    detail::CMapMat W(wv.data(), co, kk);
    for (std::size_t i = 0; i < n; ++i) {
      detail::CMapMat G(g.data() + i * co * hw, co, hw);
      if (t.wants(b.id)) {
        Tensor& gb = t.grad(b.id);
        for (std::size_t c = 0; c < co; ++c) gb[c] += G.row(c).sum();
      }
      if (t.wants(w.id)) {
        detail::im2col(xv.data() + i * ci * hw, ci, h, wd, k, pad, cols.data());
        detail::MapMat GW(t.grad(w.id).data(), co, kk);
        GW.noalias() += G * detail::CMapMat(cols.data(), kk, hw).transpose();
      }
      if (t.wants(x.id)) {
        detail::MapMat C(cols.data(), kk, hw);
        C.noalias() = W.transpose() * G;
        detail::col2im(cols.data(), ci, h, wd, k, pad, t.grad(x.id).data() + i * ci * hw);
      }
    }
  });
}

// x: (N, Fi), w: (Fo, Fi), b: (Fo).
inline Var dense(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 2 || wv.rank() != 2 || wv.dim(1) != xv.dim(1) || b.value().size() != wv.dim(0))
    throw DimensionError("dense: input " + shape_str(xv.shape()) + " weight " + shape_str(wv.shape()));
  const std::size_t n = xv.dim(0), fi = xv.dim(1), fo = wv.dim(0);
  Tensor out({n, fo});
  // Row by row, so a sample's output does not depend on its batch position.
  const detail::CMapMat W(wv.data(), fo, fi);
  const Eigen::Map<const Eigen::VectorXd> bias(b.value().data(), static_cast<Eigen::Index>(fo));
  for (std::size_t r = 0; r < n; ++r) {
    Eigen::Map<Eigen::VectorXd> o(out.data() + r * fo, static_cast<Eigen::Index>(fo));
    o.noalias() = W * Eigen::Map<const Eigen::VectorXd>(xv.data() + r * fi, static_cast<Eigen::Index>(fi));
    o += bias;
  }
  return x.tape->record(std::move(out), {x, w, b}, [x, w, b](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(x.id);
    const Tensor& wv = t.value(w.id);
    const std::size_t n = xv.dim(0), fi = xv.dim(1), fo = wv.dim(0);
    detail::CMapMat G(g.data(), n, fo);
    if (t.wants(b.id)) {
      Tensor& gb = t.grad(b.id);
      for (std::size_t c = 0; c < fo; ++c) gb[c] += G.col(c).sum();
    }
    if (t.wants(w.id))
      detail::MapMat(t.grad(w.id).data(), fo, fi).noalias() += G.transpose() * detail::CMapMat(xv.data(), n, fi);
    if (t.wants(x.id))
      detail::MapMat(t.grad(x.id).data(), n, fi).noalias() += G * detail::CMapMat(wv.data(), fo, fi);
  });
}

// Multiplies x[n, c, ...] by mask[n, c]; the mask is a constant.
inline Var channel_mask(Var x, const Tensor& mask) {
  const Tensor& xv = x.value();
  if (mask.rank() != 2 || mask.dim(0) != xv.dim(0) || mask.dim(1) != xv.dim(1))
    throw DimensionError("channel_mask: mask " + shape_str(mask.shape()) + " vs input " + shape_str(xv.shape()));
  const std::size_t inner = xv.size() / (xv.dim(0) * xv.dim(1));
  Tensor out = xv;
  for (std::size_t nc = 0; nc < mask.size(); ++nc)
    for (std::size_t j = 0; j < inner; ++j) out[nc * inner + j] *= mask[nc];
  return x.tape->record(std::move(out), {x}, [x, mask, inner](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x.id);
    for (std::size_t nc = 0; nc < mask.size(); ++nc)
      for (std::size_t j = 0; j < inner; ++j) gx[nc * inner + j] += g[nc * inner + j] * mask[nc];
  });
}

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
};

// Per-channel normalization of (N, C, H, W). Training mode normalizes with
// batch statistics and updates `stats`; otherwise `stats` is read-only.
inline Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats& stats, bool training, double momentum = 0.1,
                      double eps = 1e-5) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4 || gamma.value().size() != xv.dim(1))
    throw DimensionError("batch_norm: input " + shape_str(xv.shape()));
  const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  const double m = static_cast<double>(n * hw);
  std::vector<double> mean(c), inv_std(c);
  if (training) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0, ss = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < hw; ++j) s += xv[(i * c + ch) * hw + j];
      mean[ch] = s / m;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < hw; ++j) {
          const double d = xv[(i * c + ch) * hw + j] - mean[ch];
          ss += d * d;
        }
      const double var = ss / m;
      inv_std[ch] = 1.0 / std::sqrt(var + eps);
      const double unbiased = m > 1 ? ss / (m - 1) : var;
      stats.running_mean[ch] = (1 - momentum) * stats.running_mean[ch] + momentum * mean[ch];
      stats.running_var[ch] = (1 - momentum) * stats.running_var[ch] + momentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = stats.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(stats.running_var[ch] + eps);
    }
  }
  Tensor xhat(xv.shape()), out(xv.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < hw; ++j) {
        const std::size_t idx = (i * c + ch) * hw + j;
        xhat[idx] = (xv[idx] - mean[ch]) * inv_std[ch];
        out[idx] = gamma.value()[ch] * xhat[idx] + beta.value()[ch];
      }
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std, training, n, c, hw, m](Tape& t, const Tensor& g) {
        const Tensor& gm = t.value(gamma.id);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sg = 0.0, sgx = 0.0;
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < hw; ++j) {
              const std::size_t idx = (i * c + ch) * hw + j;
              sg += g[idx];
              sgx += g[idx] * xhat[idx];
            }
          if (t.wants(gamma.id)) t.grad(gamma.id)[ch] += sgx;
          if (t.wants(beta.id)) t.grad(beta.id)[ch] += sg;
          if (!t.wants(x.id)) continue;
          Tensor& gx = t.grad(x.id);
          const double k = gm[ch] * inv_std[ch];
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < hw; ++j) {
              const std::size_t idx = (i * c + ch) * hw + j;
              gx[idx] += training ? k * (g[idx] - sg / m - xhat[idx] * sgx / m) : k * g[idx];
            }
        }
      });
}

// 2x2 max pooling with stride 2 (floor on odd extents).
inline Var max_pool2(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4 || xv.dim(2) < 2 || xv.dim(3) < 2) throw DimensionError("max_pool2: input " + shape_str(xv.shape()));
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3), ho = h / 2, wo = w / 2;
  Tensor out({n, c, ho, wo});
  std::vector<std::size_t> arg(out.size());
  for (std::size_t nc = 0; nc < n * c; ++nc)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx) {
        std::size_t best = nc * h * w + (2 * y) * w + 2 * xx;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = nc * h * w + (2 * y + dy) * w + 2 * xx + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (nc * ho + y) * wo + xx;
        out[o] = xv[best];
        arg[o] = best;
      }
  return x.tape->record(std::move(out), {x}, [x, arg = std::move(arg)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x.id);
    for (std::size_t o = 0; o < g.size(); ++o) gx[arg[o]] += g[o];
  });
}

namespace detail {
// Source taps for x2 bilinear upsampling with half-pixel centers.
struct Taps {
  std::size_t i0, i1;
  double w1;
};
inline std::vector<Taps> upsample_taps(std::size_t in) {
  std::vector<Taps> taps(2 * in);
  for (std::size_t o = 0; o < 2 * in; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0) src = 0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}
}  // namespace detail

inline Var upsample_bilinear2(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("upsample_bilinear2: input " + shape_str(xv.shape()));
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  auto ty = detail::upsample_taps(h), tx = detail::upsample_taps(w);
  Tensor out({n, c, 2 * h, 2 * w});
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    const double* src = xv.data() + nc * h * w;
    double* dst = out.data() + nc * 4 * h * w;
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx) {
        const auto& a = ty[y];
        const auto& b = tx[xx];
        dst[y * 2 * w + xx] = (1 - a.w1) * ((1 - b.w1) * src[a.i0 * w + b.i0] + b.w1 * src[a.i0 * w + b.i1]) +
                              a.w1 * ((1 - b.w1) * src[a.i1 * w + b.i0] + b.w1 * src[a.i1 * w + b.i1]);
      }
  }
  return x.tape->record(std::move(out), {x}, [x, ty, tx, n, c, h, w](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x.id);
    for (std::size_t nc = 0; nc < n * c; ++nc) {
      double* dst = gx.data() + nc * h * w;
      const double* src = g.data() + nc * 4 * h * w;
      for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t xx = 0; xx < 2 * w; ++xx) {
          const auto& a = ty[y];
          const auto& b = tx[xx];
          const double v = src[y * 2 * w + xx];
          dst[a.i0 * w + b.i0] += (1 - a.w1) * (1 - b.w1) * v;
          dst[a.i0 * w + b.i1] += (1 - a.w1) * b.w1 * v;
          dst[a.i1 * w + b.i0] += a.w1 * (1 - b.w1) * v;
          dst[a.i1 * w + b.i1] += a.w1 * b.w1 * v;
        }
    }
  });
}

inline Var concat_channels(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 4 || bv.rank() != 4 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3))
    throw DimensionError("concat_channels: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  const std::size_t n = av.dim(0), ca = av.dim(1), cb = bv.dim(1), hw = av.dim(2) * av.dim(3);
  Tensor out({n, ca + cb, av.dim(2), av.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(av.data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
    std::copy_n(bv.data() + i * cb * hw, cb * hw, out.data() + i * (ca + cb) * hw + ca * hw);
  }
  return a.tape->record(std::move(out), {a, b}, [a, b, n, ca, cb, hw](Tape& t, const Tensor& g) {
    for (std::size_t i = 0; i < n; ++i) {
      if (t.wants(a.id)) {
        double* ga = t.grad(a.id).data() + i * ca * hw;
        for (std::size_t j = 0; j < ca * hw; ++j) ga[j] += g[i * (ca + cb) * hw + j];
      }
      if (t.wants(b.id)) {
        double* gb = t.grad(b.id).data() + i * cb * hw;
        for (std::size_t j = 0; j < cb * hw; ++j) gb[j] += g[i * (ca + cb) * hw + ca * hw + j];
      }
    }
  });
}

// Applies a linear map independently to every slice along the leading (batch)
// axis. `adjoint` must be the exact transpose of `forward`.
inline Var linear_map(Var x, std::function<Tensor(const Tensor&)> forward,
                      std::function<Tensor(const Tensor&)> adjoint) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.dim(0);
  std::vector<Tensor> outs;
  outs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) outs.push_back(forward(xv.slice0(i)));
  Tensor out = Tensor::stack(outs);
  return x.tape->record(std::move(out), {x}, [x, adjoint = std::move(adjoint), n](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x.id);
    const std::size_t per = gx.size() / n;
    for (std::size_t i = 0; i < n; ++i) {
      Tensor a = adjoint(g.slice0(i));
      if (a.size() != per) throw DimensionError("linear_map: adjoint output size mismatch");
      for (std::size_t j = 0; j < per; ++j) gx[i * per + j] += a[j];
    }
  });
}

// ---- losses ----------------------------------------------------------------

// (1/N_B) sum_n sum_k [ 1/2 logvar + 1/2 exp(-logvar) (target - mean)^2 ].
// The batch axis is the leading axis.
inline Var gaussian_nll(Var mean, Var logvar, const Tensor& target) {
  const Tensor& f = mean.value();
  const Tensor& lv = logvar.value();
  f.check_same(target, "gaussian_nll(mean, target)");
  f.check_same(lv, "gaussian_nll(mean, logvar)");
  const double nb = static_cast<double>(f.dim(0));
  double loss = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double r = target[i] - f[i];
    loss += 0.5 * lv[i] + 0.5 * std::exp(-lv[i]) * r * r;
  }
  return mean.tape->record(Tensor::scalar(loss / nb), {mean, logvar},
                           [mean, logvar, target, nb](Tape& t, const Tensor& g) {
                             const Tensor& f = t.value(mean.id);
                             const Tensor& lv = t.value(logvar.id);
                             const double s = g[0] / nb;
                             for (std::size_t i = 0; i < f.size(); ++i) {
                               const double r = target[i] - f[i];
                               const double prec = std::exp(-lv[i]);
                               if (t.wants(mean.id)) t.grad(mean.id)[i] += -s * prec * r;
                               if (t.wants(logvar.id)) t.grad(logvar.id)[i] += s * (0.5 - 0.5 * prec * r * r);
                             }
                           });
}

// Mean of squared residuals over all elements.
inline Var mse(Var pred, const Tensor& target) {
  const Tensor& p = pred.value();
  p.check_same(target, "mse");
  const double m = static_cast<double>(p.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) loss += (p[i] - target[i]) * (p[i] - target[i]);
  return pred.tape->record(Tensor::scalar(loss / m), {pred}, [pred, target, m](Tape& t, const Tensor& g) {
    const Tensor& p = t.value(pred.id);
    Tensor& gp = t.grad(pred.id);
    for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g[0] * 2.0 * (p[i] - target[i]) / m;
  });
}

}  // namespace bdu::ad
