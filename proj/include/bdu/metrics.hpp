// Image quality metrics and the discrete gradient used by total variation.
#pragma once

#include <cmath>
#include <vector>

#include "bdu/tensor.hpp"

namespace bdu {

// Collapses an image to (H, W): a single channel is returned as is, two
// (real, imaginary) channels become the magnitude.
inline Tensor display_image(const Tensor& x) {
  if (x.rank() == 2) return x;
  if (x.rank() == 3 && x.dim(0) == 1) return x.reshaped({x.dim(1), x.dim(2)});
  if (x.rank() == 3 && x.dim(0) == 2) {
    const std::size_t hw = x.dim(1) * x.dim(2);
    Tensor m({x.dim(1), x.dim(2)});
    for (std::size_t i = 0; i < hw; ++i) m[i] = std::hypot(x[i], x[hw + i]);
    return m;
  }
  throw DimensionError("display_image: unsupported shape " + shape_str(x.shape()));
}

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

namespace detail {

// Symmetric boundary folding (..., b, a | a, b, ...) valid for any offset.
inline std::size_t fold_index(long i, long n) {
  const long period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - 1 - i);
}

inline Tensor gaussian_filter(const Tensor& img, const std::vector<double>& k) {
  const long h = static_cast<long>(img.dim(0)), w = static_cast<long>(img.dim(1));
  const long r = static_cast<long>(k.size() / 2);
  Tensor tmp(img.shape()), out(img.shape());
  for (long i = 0; i < h; ++i)
    for (long j = 0; j < w; ++j) {
      double s = 0.0;
      for (long d = -r; d <= r; ++d) s += k[static_cast<std::size_t>(d + r)] * img[i * w + fold_index(j + d, w)];
      tmp[i * w + j] = s;
    }
  for (long i = 0; i < h; ++i)
    for (long j = 0; j < w; ++j) {
      double s = 0.0;
      for (long d = -r; d <= r; ++d) s += k[static_cast<std::size_t>(d + r)] * tmp[fold_index(i + d, h) * w + j];
      out[i * w + j] = s;
    }
  return out;
}

}  // namespace detail

// Mean structural similarity of two (H, W) images; Gaussian-weighted local
// statistics with symmetric boundary extension.
inline double ssim(const Tensor& a_in, const Tensor& b_in, const SsimOptions& o = {}) {
  const Tensor a = display_image(a_in), b = display_image(b_in);
  a.check_same(b, "ssim");
  std::vector<double> k(o.window);
  const double c = static_cast<double>(o.window / 2);
  double ks = 0.0;
  for (std::size_t i = 0; i < o.window; ++i) {
    const double d = static_cast<double>(i) - c;
    k[i] = std::exp(-d * d / (2.0 * o.sigma * o.sigma));
    ks += k[i];
  }
  for (auto& v : k) v /= ks;
  Tensor aa(a.shape()), bb(a.shape()), ab(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const Tensor mu_a = detail::gaussian_filter(a, k), mu_b = detail::gaussian_filter(b, k);
  const Tensor s_aa = detail::gaussian_filter(aa, k), s_bb = detail::gaussian_filter(bb, k),
               s_ab = detail::gaussian_filter(ab, k);
  const double c1 = (o.k1 * o.data_range) * (o.k1 * o.data_range);
  const double c2 = (o.k2 * o.data_range) * (o.k2 * o.data_range);
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double va = s_aa[i] - mu_a[i] * mu_a[i];
    const double vb = s_bb[i] - mu_b[i] * mu_b[i];
    const double cov = s_ab[i] - mu_a[i] * mu_b[i];
    total += ((2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2)) /
             ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(a.size());
}

inline double psnr(const Tensor& estimate, const Tensor& reference, double data_range = 1.0) {
  const Tensor a = display_image(estimate), b = display_image(reference);
  a.check_same(b, "psnr");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
  mse /= static_cast<double>(a.size());
  return 10.0 * std::log10(data_range * data_range / mse);
}

// Forward differences along the last two axes with a zero difference at the
// far boundary (symmetric extension). Output has twice the leading extent:
// (2C, H, W) holding vertical then horizontal differences per channel.
inline Tensor image_gradient(const Tensor& x) {
  const Tensor v = x.rank() == 2 ? x.reshaped({1, x.dim(0), x.dim(1)}) : x;
  const std::size_t c = v.dim(0), h = v.dim(1), w = v.dim(2);
  Tensor g({2 * c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const double p = v[(ch * h + i) * w + j];
        g[((2 * ch) * h + i) * w + j] = i + 1 < h ? v[(ch * h + i + 1) * w + j] - p : 0.0;
        g[((2 * ch + 1) * h + i) * w + j] = j + 1 < w ? v[(ch * h + i) * w + j + 1] - p : 0.0;
      }
  return g;
}

// Exact transpose of image_gradient; returns the shape of `like`.
inline Tensor image_gradient_adjoint(const Tensor& g, const Shape& like) {
  const std::size_t c = g.dim(0) / 2, h = g.dim(1), w = g.dim(2);
  Tensor x({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const double gv = g[((2 * ch) * h + i) * w + j];
        const double gh = g[((2 * ch + 1) * h + i) * w + j];
        double& here = x[(ch * h + i) * w + j];
        if (i + 1 < h) {
          here -= gv;
          x[(ch * h + i + 1) * w + j] += gv;
        }
        if (j + 1 < w) {
          here -= gh;
          x[(ch * h + i) * w + j + 1] += gh;
        }
      }
  return x.reshaped(like);
}

// Anisotropic total variation seminorm.
inline double tv_seminorm(const Tensor& x) {
  const Tensor g = image_gradient(x);
  double s = 0.0;
  for (double v : g.vec()) s += std::abs(v);
  return s;
}

}  // namespace bdu
