// Non-learned reconstructions: zero-filling, filtered backprojection and
// anisotropic-TV regularized least squares solved by ADMM with CG inner solves.
#pragma once

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <vector>

#include "bdu/metrics.hpp"
#include "bdu/operators.hpp"

namespace bdu {

inline Tensor zero_fill(const LinearOperator& op, const Tensor& m) {
  if (!op.is_fourier()) throw ConfigError("zero_fill requires a fourier-mask operator");
  return op.adjoint(m);
}

// Ram-Lak filtering of every sinogram row (zero padded, spatial-domain kernel
// transformed to avoid the DC bias of a sampled |w|).
inline Tensor ramp_filter(const Tensor& sinogram) {
  const std::size_t views = sinogram.dim(0), nd = sinogram.dim(1);
  std::size_t len = 1;
  while (len < 2 * nd) len <<= 1;
  std::vector<double> h(len, 0.0);
  for (std::size_t i = 0; i < len; ++i) {
    const long n = i < len / 2 ? static_cast<long>(i) : static_cast<long>(i) - static_cast<long>(len);
    if (n == 0)
      h[i] = 0.25;
    else if (n % 2 != 0)
      h[i] = -1.0 / (kPi * kPi * static_cast<double>(n * n));
  }
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> hf, rowf, conv;
  fft.fwd(hf, h);
  Tensor out(sinogram.shape());
  std::vector<double> row(len), back(len);
  for (std::size_t v = 0; v < views; ++v) {
    std::fill(row.begin(), row.end(), 0.0);
    std::copy_n(sinogram.data() + v * nd, nd, row.begin());
    fft.fwd(rowf, row);
    for (std::size_t k = 0; k < rowf.size(); ++k) rowf[k] *= hf[k];
    fft.inv(back, rowf);
    std::copy_n(back.begin(), nd, out.data() + v * nd);
  }
  return out;
}

enum class FbpFilter { RamLak };

inline Tensor filtered_backprojection(const LinearOperator& op, const Tensor& sinogram,
                                      FbpFilter = FbpFilter::RamLak) {
  if (!op.is_radon()) throw ConfigError("filtered_backprojection requires a radon operator");
  if (sinogram.shape() != op.output_shape())
    throw DimensionError("sinogram shape " + shape_str(sinogram.shape()) + " does not match operator output " +
                         shape_str(op.output_shape()));
  const double views = static_cast<double>(op.output_shape()[0]);
  return op.adjoint(ramp_filter(sinogram)) * (kPi / views);
}

// Operator-appropriate starting image: zero-filling, FBP, or A^T m otherwise.
inline Tensor start_point(const LinearOperator& op, const Tensor& m) {
  if (op.is_fourier()) return zero_fill(op, m);
  if (op.is_radon()) return filtered_backprojection(op, m);
  if (const auto* s = std::get_if<ScalarDesc>(&op.descriptor())) return m * (1.0 / s->a);
  return op.adjoint(m);
}

struct CgResult {
  Tensor x;
  std::size_t iterations = 0;
  double relative_residual = 0.0;
  bool converged = false;
  std::vector<double> residual_history;  // relative residual before each iteration and at exit
};

// Conjugate gradients for a symmetric positive definite `normal_apply`.
inline CgResult cg_solve(const std::function<Tensor(const Tensor&)>& normal_apply, const Tensor& rhs, double tol,
                         std::size_t max_iter, const Tensor& x0) {
  rhs.check_same(x0, "cg_solve");
  CgResult res;
  res.x = x0;
  const double bnorm = norm2(rhs);
  if (bnorm == 0.0) {
    res.x = Tensor(rhs.shape());
    res.converged = true;
    res.residual_history = {0.0};
    return res;
  }
  Tensor r = rhs - normal_apply(res.x);
  Tensor p = r;
  double rr = dot(r, r);
  res.relative_residual = std::sqrt(rr) / bnorm;
  res.residual_history.push_back(res.relative_residual);
  while (res.relative_residual > tol && res.iterations < max_iter) {
    const Tensor ap = normal_apply(p);
    const double pap = dot(p, ap);
    if (!std::isfinite(pap) || pap <= 0.0) throw NumericError("cg_solve: operator is not positive definite");
    const double alpha = rr / pap;
    for (std::size_t i = 0; i < r.size(); ++i) {
      res.x[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
    }
    const double rr_new = dot(r, r);
    res.relative_residual = std::sqrt(rr_new) / bnorm;
    if (!std::isfinite(res.relative_residual)) throw NumericError("cg_solve: non-finite residual");
    res.residual_history.push_back(res.relative_residual);
    const double beta = rr_new / rr;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = r[i] + beta * p[i];
    rr = rr_new;
    ++res.iterations;
  }
  res.converged = res.relative_residual <= tol;
  return res;
}

struct AdmmConfig {
  std::size_t n_iters = 100;
  double rho = 10.0;
  double cg_tol = 1e-5;
  std::size_t cg_max_iter = 10;
  std::vector<double> beta_grid{1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1};

  void validate() const {
    if (n_iters == 0 || !(rho > 0) || !(cg_tol > 0) || cg_max_iter == 0)
      throw ConfigError("ADMM parameters must be positive");
    if (beta_grid.empty()) throw ConfigError("beta grid must be non-empty");
    for (double b : beta_grid)
      if (!(b > 0)) throw ConfigError("beta grid entries must be positive");
  }
};

struct TvResult {
  Tensor image;
  std::vector<double> objective;  // ||As - m||^2 + beta TV(s) after every round
};

inline double tv_objective(const LinearOperator& op, const Tensor& s, const Tensor& m, double beta) {
  const Tensor r = op.apply(s) - m;
  return dot(r, r) + beta * tv_seminorm(s);
}

// Scaled-form ADMM on  min ||As - m||^2 + beta ||Ds||_1  with split d = Ds.
// The primal starts from the operator's start point, d from D s0 and the
// scaled dual from zero.
inline TvResult tv_admm(const LinearOperator& op, const Tensor& m, double beta, const AdmmConfig& cfg = {}) {
  if (!(beta > 0)) throw ConfigError("tv_admm requires beta > 0");
  cfg.validate();
  Tensor s = start_point(op, m);
  const Shape shape = s.shape();
  Tensor d = image_gradient(s);
  Tensor u(d.shape());
  const Tensor atm2 = op.adjoint(m) * 2.0;
  auto system = [&](const Tensor& x) {
    return op.normal(x) * 2.0 + image_gradient_adjoint(image_gradient(x), shape) * cfg.rho;
  };
  TvResult res;
  const double initial = tv_objective(op, s, m, beta);
  const double limit = 1e6 * std::max(initial, dot(m, m));
  const double thresh = beta / cfg.rho;
  for (std::size_t it = 0; it < cfg.n_iters; ++it) {
    const Tensor rhs = atm2 + image_gradient_adjoint(d - u, shape) * cfg.rho;
    s = cg_solve(system, rhs, cfg.cg_tol, cfg.cg_max_iter, s).x;
    const Tensor ds = image_gradient(s);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double v = ds[i] + u[i];
      d[i] = v > thresh ? v - thresh : (v < -thresh ? v + thresh : 0.0);
      u[i] += ds[i] - d[i];
    }
    const double obj = tv_objective(op, s, m, beta);
    if (!std::isfinite(obj) || obj > limit) throw NumericError("tv_admm diverged at iteration " + std::to_string(it));
    res.objective.push_back(obj);
  }
  res.image = std::move(s);
  return res;
}

struct BetaSelection {
  double beta = 0.0;
  std::vector<double> grid;
  std::vector<double> ssims;
};

// Grid member maximizing SSIM against `reference`; ties go to the smaller beta.
inline BetaSelection select_beta(const LinearOperator& op, const Tensor& m, const Tensor& reference,
                                 const AdmmConfig& cfg = {}) {
  cfg.validate();
  BetaSelection sel;
  sel.grid = cfg.beta_grid;
  std::sort(sel.grid.begin(), sel.grid.end());
  double best = -std::numeric_limits<double>::infinity();
  for (double b : sel.grid) {
    const double q = ssim(tv_admm(op, m, b, cfg).image, reference);
    sel.ssims.push_back(q);
    if (q > best) {
      best = q;
      sel.beta = b;
    }
  }
  return sel;
}

}  // namespace bdu
