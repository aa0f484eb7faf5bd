// Linear forward operators with exact adjoints.
//
//   fourier_mask  image (2, H, W) -> observed k-space (2, n_observed)
//                 orthonormal 2-D DFT, complex data as (real, imag) channels
//   radon         image (1, S, S) -> sinogram (n_views, n_detectors)
//                 parallel beam, pixel-driven with linear detector interpolation
//   scalar        (1) -> (1), multiplication by a
//   dense         explicit matrix over the flattened input
//
// All inner products are real, over the stacked real representation.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <memory>
#include <numeric>
#include <tuple>
#include <string>
#include <variant>
#include <vector>

#include "bdu/rng.hpp"
#include "bdu/tensor.hpp"

namespace bdu {

inline constexpr double kPi = 3.14159265358979323846;

struct FourierMaskDesc {
  std::size_t height = 0;
  std::size_t width = 0;
  double observed_fraction = 0.2;
  double center_fraction = 0.04;
  std::uint64_t seed = 0;
  bool operator==(const FourierMaskDesc&) const = default;
};

struct RadonDesc {
  std::size_t size = 0;
  std::size_t n_views = 0;
  std::size_t n_detectors = 0;
  bool operator==(const RadonDesc&) const = default;
};

struct ScalarDesc {
  double a = 1.0;
  bool operator==(const ScalarDesc&) const = default;
};

struct DenseDesc {
  Shape input_shape;
  std::size_t rows = 0;
  std::vector<double> matrix;  // row-major (rows, numel(input_shape))
  bool operator==(const DenseDesc&) const = default;
};

using OperatorDesc = std::variant<FourierMaskDesc, RadonDesc, ScalarDesc, DenseDesc>;

inline std::size_t default_detector_count(std::size_t size) {
  return static_cast<std::size_t>(std::ceil(std::sqrt(2.0) * static_cast<double>(size)));
}

namespace detail {

class OperatorImpl {
 public:
  virtual ~OperatorImpl() = default;
  virtual Tensor apply(const Tensor& x) const = 0;
  virtual Tensor adjoint(const Tensor& y) const = 0;
  virtual Tensor normal(const Tensor& x) const { return adjoint(apply(x)); }
};

using CMat = Eigen::MatrixXcd;

inline CMat dft_matrix(std::size_t n) {
  CMat f(n, n);
  const double s = 1.0 / std::sqrt(static_cast<double>(n));
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t j = 0; j < n; ++j) {
      const double ang = -2.0 * kPi * static_cast<double>((k * j) % n) / static_cast<double>(n);
      f(k, j) = std::polar(s, ang);
    }
  return f;
}

class FourierOp final : public OperatorImpl {
 public:
  explicit FourierOp(const FourierMaskDesc& d) : d_(d), fh_(dft_matrix(d.height)), fw_(dft_matrix(d.width)) {
    mask_ = build_mask(d);
    for (std::size_t i = 0; i < mask_.size(); ++i)
      if (mask_[i]) observed_.push_back(i);
  }

  static std::vector<unsigned char> build_mask(const FourierMaskDesc& d) {
    const std::size_t total = d.height * d.width;
    const auto n_obs = static_cast<std::size_t>(std::ceil(d.observed_fraction * static_cast<double>(total) - 1e-9));
    const auto n_center = static_cast<std::size_t>(std::ceil(d.center_fraction * static_cast<double>(total) - 1e-9));
    // Rank coefficients by Chebyshev distance from DC (square low-frequency
    // block), ties by Euclidean distance, then index.
    auto sfreq = [](std::size_t k, std::size_t n) {
      const long kk = static_cast<long>(k);
      return kk < static_cast<long>((n + 1) / 2) ? kk : kk - static_cast<long>(n);
    };
    std::vector<std::size_t> order(total);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto key = [&](std::size_t i) {
      const long fy = sfreq(i / d.width, d.height), fx = sfreq(i % d.width, d.width);
      return std::make_tuple(std::max(std::labs(fy), std::labs(fx)), fy * fy + fx * fx, i);
    };
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
    std::vector<unsigned char> mask(total, 0);
    for (std::size_t i = 0; i < n_center; ++i) mask[order[i]] = 1;
    std::vector<std::size_t> rest(order.begin() + static_cast<long>(n_center), order.end());
    std::sort(rest.begin(), rest.end());
    Rng rng(derive_seed(d.seed, "fourier_mask"));
    const std::size_t extra = n_obs - n_center;
    for (std::size_t i = 0; i < extra; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(rest.size() - i));
      std::swap(rest[i], rest[j]);
      mask[rest[i]] = 1;
    }
    return mask;
  }

  const std::vector<unsigned char>& mask() const { return mask_; }
  std::size_t observed() const { return observed_.size(); }

  Tensor apply(const Tensor& x) const override {
    const CMat z = fh_ * to_complex(x) * fw_.transpose();
    Tensor y({2, observed_.size()});
    for (std::size_t i = 0; i < observed_.size(); ++i) {
      const auto c = z(static_cast<long>(observed_[i] / d_.width), static_cast<long>(observed_[i] % d_.width));
      y[i] = c.real();
      y[observed_.size() + i] = c.imag();
    }
    return y;
  }

  Tensor adjoint(const Tensor& y) const override {
    CMat spec = CMat::Zero(static_cast<long>(d_.height), static_cast<long>(d_.width));
    for (std::size_t i = 0; i < observed_.size(); ++i)
      spec(static_cast<long>(observed_[i] / d_.width), static_cast<long>(observed_[i] % d_.width)) = {
          y[i], y[observed_.size() + i]};
    return from_complex(fh_.adjoint() * spec * fw_.conjugate());
  }

  Tensor normal(const Tensor& x) const override {
    CMat z = fh_ * to_complex(x) * fw_.transpose();
    for (std::size_t i = 0; i < mask_.size(); ++i)
      if (!mask_[i]) z(static_cast<long>(i / d_.width), static_cast<long>(i % d_.width)) = 0.0;
    return from_complex(fh_.adjoint() * z * fw_.conjugate());
  }

  // Full orthonormal spectrum as (2, H, W).
  Tensor full_spectrum(const Tensor& x) const { return from_complex(fh_ * to_complex(x) * fw_.transpose()); }

 private:
  CMat to_complex(const Tensor& x) const {
    if (x.shape() != Shape{2, d_.height, d_.width})
      throw DimensionError("fourier operator expects (2, H, W), got " + shape_str(x.shape()));
    const std::size_t hw = d_.height * d_.width;
    CMat z(static_cast<long>(d_.height), static_cast<long>(d_.width));
    for (std::size_t i = 0; i < hw; ++i)
      z(static_cast<long>(i / d_.width), static_cast<long>(i % d_.width)) = {x[i], x[hw + i]};
    return z;
  }
  Tensor from_complex(const CMat& z) const {
    const std::size_t hw = d_.height * d_.width;
    Tensor x({2, d_.height, d_.width});
    for (std::size_t i = 0; i < hw; ++i) {
      const auto c = z(static_cast<long>(i / d_.width), static_cast<long>(i % d_.width));
      x[i] = c.real();
      x[hw + i] = c.imag();
    }
    return x;
  }

  FourierMaskDesc d_;
  CMat fh_, fw_;
  std::vector<unsigned char> mask_;
  std::vector<std::size_t> observed_;
};

class RadonOp final : public OperatorImpl {
 public:
  explicit RadonOp(const RadonDesc& d) : d_(d) {
    const std::size_t s = d.size, nd = d.n_detectors;
    const double c = (static_cast<double>(s) - 1.0) / 2.0;
    const double dc = (static_cast<double>(nd) - 1.0) / 2.0;
    bin_.resize(d.n_views * s * s);
    frac_.resize(d.n_views * s * s);
    for (std::size_t v = 0; v < d.n_views; ++v) {
      const double th = kPi * static_cast<double>(v) / static_cast<double>(d.n_views);
      const double ct = std::cos(th), st = std::sin(th);
      for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < s; ++j) {
          const double x = static_cast<double>(j) - c;
          const double y = c - static_cast<double>(i);
          const double u = x * ct + y * st + dc;
          const double f = std::floor(u);
          const std::size_t idx = (v * s + i) * s + j;
          bin_[idx] = static_cast<long>(f);
          frac_[idx] = u - f;
        }
    }
  }

  Tensor apply(const Tensor& x) const override {
    const std::size_t s = d_.size, nd = d_.n_detectors;
    if (x.size() != s * s) throw DimensionError("radon operator expects (1, S, S), got " + shape_str(x.shape()));
    Tensor y({d_.n_views, nd});
    for (std::size_t v = 0; v < d_.n_views; ++v) {
      double* row = y.data() + v * nd;
      for (std::size_t p = 0; p < s * s; ++p) {
        const std::size_t idx = v * s * s + p;
        const long b = bin_[idx];
        const double f = frac_[idx];
        if (b >= 0 && b < static_cast<long>(nd)) row[b] += (1.0 - f) * x[p];
        if (b + 1 >= 0 && b + 1 < static_cast<long>(nd)) row[b + 1] += f * x[p];
      }
    }
    return y;
  }

  Tensor adjoint(const Tensor& y) const override {
    const std::size_t s = d_.size, nd = d_.n_detectors;
    if (y.shape() != Shape{d_.n_views, nd}) throw DimensionError("radon adjoint expects " +
                                                                 shape_str({d_.n_views, nd}));
    Tensor x({1, s, s});
    for (std::size_t v = 0; v < d_.n_views; ++v) {
      const double* row = y.data() + v * nd;
      for (std::size_t p = 0; p < s * s; ++p) {
        const std::size_t idx = v * s * s + p;
        const long b = bin_[idx];
        const double f = frac_[idx];
        double acc = 0.0;
        if (b >= 0 && b < static_cast<long>(nd)) acc += (1.0 - f) * row[b];
        if (b + 1 >= 0 && b + 1 < static_cast<long>(nd)) acc += f * row[b + 1];
        x[p] += acc;
      }
    }
    return x;
  }

 private:
  RadonDesc d_;
  std::vector<long> bin_;
  std::vector<double> frac_;
};

class ScalarOp final : public OperatorImpl {
 public:
  explicit ScalarOp(double a) : a_(a) {}
  Tensor apply(const Tensor& x) const override { return check(x) * a_; }
  Tensor adjoint(const Tensor& y) const override { return check(y) * a_; }

 private:
  static const Tensor& check(const Tensor& t) {
    if (t.size() != 1) throw DimensionError("scalar operator expects one element, got " + shape_str(t.shape()));
    return t;
  }
  double a_;
};

class DenseOp final : public OperatorImpl {
 public:
  explicit DenseOp(const DenseDesc& d) : d_(d), cols_(shape_numel(d.input_shape)) {
    if (d.matrix.size() != d.rows * cols_) throw DimensionError("dense operator matrix size mismatch");
  }
  Tensor apply(const Tensor& x) const override {
    if (x.size() != cols_) throw DimensionError("dense operator input size mismatch");
    Tensor y({d_.rows});
    for (std::size_t r = 0; r < d_.rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols_; ++c) s += d_.matrix[r * cols_ + c] * x[c];
      y[r] = s;
    }
    return y;
  }
  Tensor adjoint(const Tensor& y) const override {
    if (y.size() != d_.rows) throw DimensionError("dense operator adjoint size mismatch");
    Tensor x(d_.input_shape);
    for (std::size_t r = 0; r < d_.rows; ++r)
      for (std::size_t c = 0; c < cols_; ++c) x[c] += d_.matrix[r * cols_ + c] * y[r];
    return x;
  }

 private:
  DenseDesc d_;
  std::size_t cols_;
};

}  // namespace detail

// Immutable operator handle; copies share the precomputed tables.
class LinearOperator {
 public:
  LinearOperator() = default;

  const OperatorDesc& descriptor() const { return desc_; }
  const Shape& input_shape() const { return in_; }
  const Shape& output_shape() const { return out_; }

  Tensor apply(const Tensor& x) const {
    require();
    return impl_->apply(x);
  }
  Tensor adjoint(const Tensor& y) const {
    require();
    return impl_->adjoint(y);
  }
  // A^T A x
  Tensor normal(const Tensor& x) const {
    require();
    return impl_->normal(x);
  }

  bool is_fourier() const { return std::holds_alternative<FourierMaskDesc>(desc_); }
  bool is_radon() const { return std::holds_alternative<RadonDesc>(desc_); }
  bool valid() const { return impl_ != nullptr; }

  // Sampling mask (H, W) with 1 for observed coefficients; Fourier only.
  Tensor mask() const {
    const auto* f = dynamic_cast<const detail::FourierOp*>(impl_.get());
    if (!f) throw ConfigError("mask() requires a fourier operator");
    const auto& d = std::get<FourierMaskDesc>(desc_);
    Tensor m({d.height, d.width});
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = f->mask()[i];
    return m;
  }

  Tensor full_spectrum(const Tensor& x) const {
    const auto* f = dynamic_cast<const detail::FourierOp*>(impl_.get());
    if (!f) throw ConfigError("full_spectrum() requires a fourier operator");
    return f->full_spectrum(x);
  }

  friend LinearOperator make_operator(const OperatorDesc& desc);

 private:
  void require() const {
    if (!impl_) throw StateError("operator not initialized");
  }
  OperatorDesc desc_;
  Shape in_, out_;
  std::shared_ptr<const detail::OperatorImpl> impl_;
};

inline LinearOperator make_operator(const OperatorDesc& desc) {
  LinearOperator op;
  op.desc_ = desc;
  if (const auto* f = std::get_if<FourierMaskDesc>(&desc)) {
    if (f->height == 0 || f->width == 0) throw ConfigError("fourier operator needs positive extents");
    if (!(f->observed_fraction > 0.0 && f->observed_fraction <= 1.0))
      throw ConfigError("observed_fraction must lie in (0, 1]");
    if (!(f->center_fraction >= 0.0 && f->center_fraction <= f->observed_fraction))
      throw ConfigError("center_fraction must lie in [0, observed_fraction]");
    auto impl = std::make_shared<detail::FourierOp>(*f);
    op.in_ = {2, f->height, f->width};
    op.out_ = {2, impl->observed()};
    op.impl_ = std::move(impl);
  } else if (const auto* r = std::get_if<RadonDesc>(&desc)) {
    if (r->size < 8) throw ConfigError("radon operator needs size >= 8");
    if (r->n_views < 1) throw ConfigError("radon operator needs at least one view");
    RadonDesc d = *r;
    if (d.n_detectors == 0) d.n_detectors = default_detector_count(d.size);
    op.desc_ = d;
    op.in_ = {1, d.size, d.size};
    op.out_ = {d.n_views, d.n_detectors};
    op.impl_ = std::make_shared<detail::RadonOp>(d);
  } else if (const auto* s = std::get_if<ScalarDesc>(&desc)) {
    if (s->a == 0.0) throw ConfigError("scalar operator needs a != 0");
    op.in_ = {1};
    op.out_ = {1};
    op.impl_ = std::make_shared<detail::ScalarOp>(s->a);
  } else {
    const auto& d = std::get<DenseDesc>(desc);
    op.in_ = d.input_shape;
    op.out_ = {d.rows};
    op.impl_ = std::make_shared<detail::DenseOp>(d);
  }
  return op;
}

inline LinearOperator make_fourier_mask_op(std::size_t height, std::size_t width, double observed_fraction,
                                           double center_fraction, std::uint64_t seed) {
  return make_operator(FourierMaskDesc{height, width, observed_fraction, center_fraction, seed});
}

inline LinearOperator make_radon_op(std::size_t size, std::size_t n_views, std::size_t n_detectors = 0) {
  return make_operator(RadonDesc{size, n_views, n_detectors});
}

inline LinearOperator make_scalar_op(double a) { return make_operator(ScalarDesc{a}); }

inline LinearOperator make_dense_op(Shape input_shape, std::size_t rows, std::vector<double> matrix) {
  return make_operator(DenseDesc{std::move(input_shape), rows, std::move(matrix)});
}

// Relative adjoint mismatch |<Ax, y> - <x, A^T y>| / (||Ax|| ||y||).
inline double adjoint_mismatch(const LinearOperator& op, const Tensor& x, const Tensor& y) {
  const Tensor ax = op.apply(x);
  const Tensor aty = op.adjoint(y);
  const double lhs = dot(ax, y.reshaped(ax.shape()));
  const double rhs = dot(x, aty.reshaped(x.shape()));
  return std::abs(lhs - rhs) / (norm2(ax) * norm2(y));
}

}  // namespace bdu
