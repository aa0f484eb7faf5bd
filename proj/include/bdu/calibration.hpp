// Calibration of per-pixel Gaussian predictions: reliability curves, MACE,
// RMSCE, miscalibration area, sharpness and isotonic quantile recalibration.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "bdu/predict.hpp"

namespace bdu {

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Acklam's rational approximation followed by one Halley step against erfc.
inline double normal_quantile(double p) {
  if (std::isnan(p) || p < 0.0 || p > 1.0) throw ValueError("normal_quantile: p outside [0, 1]");
  if (p == 0.0) return -std::numeric_limits<double>::infinity();
  if (p == 1.0) return std::numeric_limits<double>::infinity();
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double lo = 0.02425, hi = 1.0 - lo;
  double x;
  if (p < lo) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= hi) {
    const double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double e = normal_cdf(x) - p;
  const double u = e * std::sqrt(2.0 * kPi) * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

struct PixelGaussianSet {
  std::vector<double> mu;
  std::vector<double> var;
  std::vector<double> y;
  std::size_t floored = 0;  // pixels whose variance was raised to the floor

  std::size_t size() const { return mu.size(); }
  void validate() const {
    if (mu.empty()) throw ValueError("empty pixel set");
    if (var.size() != mu.size() || y.size() != mu.size()) throw DimensionError("pixel set arrays differ in length");
    for (double v : var)
      if (!(v > 0)) throw ValueError("pixel set variances must be positive");
  }
  void append(const PixelGaussianSet& o) {
    mu.insert(mu.end(), o.mu.begin(), o.mu.end());
    var.insert(var.end(), o.var.begin(), o.var.end());
    y.insert(y.end(), o.y.begin(), o.y.end());
    floored += o.floored;
  }
  PixelGaussianSet subset(const std::vector<std::size_t>& idx) const {
    PixelGaussianSet s;
    for (std::size_t i : idx) {
      s.mu.push_back(mu.at(i));
      s.var.push_back(var.at(i));
      s.y.push_back(y.at(i));
    }
    return s;
  }
};

constexpr double kVarianceFloor = 1e-12;

inline PixelGaussianSet gaussianize(const PredictiveSummary& s, const Tensor& y_true) {
  if (y_true.size() != s.mean.size()) throw DimensionError("gaussianize: target size does not match summary");
  PixelGaussianSet set;
  const Tensor total = s.total_var();
  for (std::size_t i = 0; i < s.mean.size(); ++i) {
    double v = total[i];
    if (!(v >= kVarianceFloor)) {
      v = kVarianceFloor;
      ++set.floored;
    }
    set.mu.push_back(s.mean[i]);
    set.var.push_back(v);
    set.y.push_back(y_true[i]);
  }
  return set;
}

struct CalibrationReport {
  std::vector<double> levels;
  std::vector<double> observed;
  double mace = 0.0;
  double rmsce = 0.0;
  double miscal_area = 0.0;
  double sharpness = 0.0;
};

inline std::vector<double> calibration_levels(std::size_t n_levels = 99) {
  if (n_levels == 0) throw ConfigError("need at least one calibration level");
  std::vector<double> p(n_levels);
  for (std::size_t i = 0; i < n_levels; ++i) p[i] = static_cast<double>(i + 1) / static_cast<double>(n_levels + 1);
  return p;
}

namespace detail {

inline std::vector<double> sorted_standardized(const PixelGaussianSet& set) {
  std::vector<double> z(set.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = (set.y[i] - set.mu[i]) / std::sqrt(set.var[i]);
  std::sort(z.begin(), z.end());
  return z;
}

// Fraction of pixels with standardized residual <= Phi^-1(q).
inline double coverage(const std::vector<double>& sorted_z, double q) {
  const double t = normal_quantile(q);
  return static_cast<double>(std::upper_bound(sorted_z.begin(), sorted_z.end(), t) - sorted_z.begin()) /
         static_cast<double>(sorted_z.size());
}

}  // namespace detail

inline double sharpness(const PixelGaussianSet& set) {
  set.validate();
  double s = 0.0;
  for (double v : set.var) s += std::sqrt(v);
  return s / static_cast<double>(set.size());
}

inline void calibration_metrics(CalibrationReport& r) {
  if (r.levels.size() != r.observed.size() || r.levels.empty()) throw DimensionError("calibration report is empty");
  double abs_sum = 0.0, sq_sum = 0.0;
  for (std::size_t i = 0; i < r.levels.size(); ++i) {
    const double d = r.observed[i] - r.levels[i];
    abs_sum += std::abs(d);
    sq_sum += d * d;
  }
  const double n = static_cast<double>(r.levels.size());
  r.mace = abs_sum / n;
  r.rmsce = std::sqrt(sq_sum / n);
  // Trapezoid of |observed - expected| with (0, 0) and (1, 1) appended.
  double area = 0.0, px = 0.0, pd = 0.0;
  for (std::size_t i = 0; i <= r.levels.size(); ++i) {
    const double x = i < r.levels.size() ? r.levels[i] : 1.0;
    const double d = i < r.levels.size() ? std::abs(r.observed[i] - r.levels[i]) : 0.0;
    area += 0.5 * (d + pd) * (x - px);
    px = x;
    pd = d;
  }
  r.miscal_area = area;
}

inline CalibrationReport calibration_curve(const PixelGaussianSet& set, std::size_t n_levels = 99) {
  set.validate();
  CalibrationReport r;
  r.levels = calibration_levels(n_levels);
  const auto z = detail::sorted_standardized(set);
  for (double p : r.levels) r.observed.push_back(detail::coverage(z, p));
  calibration_metrics(r);
  r.sharpness = sharpness(set);
  return r;
}

// Monotone non-decreasing piecewise-linear map on [0, 1] through its knots.
struct Recalibrator {
  std::vector<double> x;  // strictly increasing, x.front() = 0, x.back() = 1
  std::vector<double> y;  // non-decreasing, y.front() = 0, y.back() = 1
  bool degenerate = false;

  static Recalibrator identity() { return {{0.0, 1.0}, {0.0, 1.0}, false}; }

  double operator()(double p) const {
    if (p <= x.front()) return y.front();
    if (p >= x.back()) return y.back();
    const std::size_t k = static_cast<std::size_t>(std::upper_bound(x.begin(), x.end(), p) - x.begin());
    const double t = (p - x[k - 1]) / (x[k] - x[k - 1]);
    return y[k - 1] + t * (y[k] - y[k - 1]);
  }

  // q with R(q) = p. Where R is flat at level p the midpoint of the flat
  // stretch is returned.
  double inverse(double p) const {
    if (p <= y.front()) return x.front();
    if (p >= y.back()) return x.back();
    const auto first = std::lower_bound(y.begin(), y.end(), p);
    const auto last = std::upper_bound(y.begin(), y.end(), p);
    const std::size_t i = static_cast<std::size_t>(first - y.begin());
    const std::size_t j = static_cast<std::size_t>(last - y.begin());
    if (j > i) return 0.5 * (x[i] + x[j - 1]);  // p attained on knots i..j-1
    const double t = (p - y[i - 1]) / (y[i] - y[i - 1]);
    return x[i - 1] + t * (x[i] - x[i - 1]);
  }
};

// Pool-adjacent-violators least-squares isotonic fit of y on sorted x.
inline std::vector<double> isotonic_fit(const std::vector<double>& y, const std::vector<double>& w) {
  struct Block {
    double sum, weight;
    std::size_t count;
  };
  std::vector<Block> blocks;
  for (std::size_t i = 0; i < y.size(); ++i) {
    blocks.push_back({y[i] * w[i], w[i], 1});
    while (blocks.size() > 1) {
      const Block& b = blocks.back();
      const Block& a = blocks[blocks.size() - 2];
      if (a.sum / a.weight <= b.sum / b.weight) break;
      const Block merged{a.sum + b.sum, a.weight + b.weight, a.count + b.count};
      blocks.pop_back();
      blocks.back() = merged;
    }
  }
  std::vector<double> out;
  for (const auto& b : blocks) out.insert(out.end(), b.count, b.sum / b.weight);
  return out;
}

// Fits R(p) = P(u <= p) for the predicted CDF values u_i = Phi(z_i) of a
// calibration set by isotonic regression of their empirical CDF.
inline Recalibrator fit_recalibrator(const PixelGaussianSet& set, std::size_t max_knots = 2000) {
  set.validate();
  if (set.size() < 100) throw ValueError("fit_recalibrator needs at least 100 pixels");
  auto z = detail::sorted_standardized(set);
  std::vector<double> u(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) u[i] = normal_cdf(z[i]);
  const double n = static_cast<double>(u.size());

  // Distinct u values with their empirical CDF (ties take the upper value).
  std::vector<double> ux, ecdf, w;
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (!ux.empty() && u[i] == ux.back()) {
      ecdf.back() = static_cast<double>(i + 1) / n;
      w.back() += 1.0;
    } else {
      ux.push_back(u[i]);
      ecdf.push_back(static_cast<double>(i + 1) / n);
      w.push_back(1.0);
    }
  }
  const auto fit = isotonic_fit(ecdf, w);

  Recalibrator r;
  if (ux.size() == 1) {
    // All predicted CDF values coincide: R jumps from 0 to 1 at that value.
    const double c = std::clamp(ux[0], 1e-12, 1.0 - 1e-12);
    r.x = {0.0, c, std::nextafter(c, 1.0), 1.0};
    r.y = {0.0, 0.0, 1.0, 1.0};
    r.degenerate = true;
    return r;
  }
  r.x.push_back(0.0);
  r.y.push_back(0.0);
  const std::size_t stride = std::max<std::size_t>(1, ux.size() / std::max<std::size_t>(1, max_knots));
  for (std::size_t i = 0; i < ux.size(); i += stride) {
    if (ux[i] <= r.x.back() || ux[i] >= 1.0) continue;
    r.x.push_back(ux[i]);
    r.y.push_back(std::max(r.y.back(), fit[i]));
  }
  r.x.push_back(1.0);
  r.y.push_back(1.0);
  return r;
}

// Curve of the recalibrated predictions: at level p, the observed fraction
// below the predicted quantile of level q = R^-1(p).
inline CalibrationReport apply_recalibrator(const Recalibrator& R, const PixelGaussianSet& set,
                                            const std::vector<double>& levels) {
  set.validate();
  CalibrationReport r;
  r.levels = levels;
  const auto z = detail::sorted_standardized(set);
  for (double p : levels) r.observed.push_back(detail::coverage(z, R.inverse(p)));
  calibration_metrics(r);
  r.sharpness = sharpness(set);
  return r;
}

}  // namespace bdu
