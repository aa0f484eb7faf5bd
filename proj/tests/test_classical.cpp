#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "bdu/classical.hpp"
#include "bdu/measurement.hpp"
#include "bdu/phantom.hpp"
#include "test_util.hpp"

using namespace bdu;
using bdu::testing::random_tensor;

namespace {

Tensor blob(std::size_t s, double width) {
  Tensor x({1, s, s});
  const double c = (s - 1) / 2.0;
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < s; ++j) {
      const double r2 = (i - c) * (i - c) + (j - c) * (j - c);
      x[i * s + j] = std::exp(-r2 / (2 * width * width));
    }
  return x;
}

Tensor as_complex(const Tensor& img) {
  const std::size_t h = img.dim(0), w = img.dim(1);
  Tensor z({2, h, w});
  for (std::size_t i = 0; i < h * w; ++i) z[i] = img[i];
  return z;
}

}  // namespace

TEST(Cg, MatchesDirectSolve) {
  Rng rng(1);
  const std::size_t n = 12;
  Eigen::MatrixXd b(n, n);
  for (std::size_t i = 0; i < n * n; ++i) b.data()[i] = standard_normal(rng);
  const Eigen::MatrixXd a = b.transpose() * b + Eigen::MatrixXd::Identity(n, n);
  const Tensor rhs = random_tensor({n}, rng);
  auto apply = [&](const Tensor& x) {
    Eigen::Map<const Eigen::VectorXd> v(x.data(), n);
    Tensor out({n});
    Eigen::Map<Eigen::VectorXd>(out.data(), n) = a * v;
    return out;
  };
  const auto res = cg_solve(apply, rhs, 1e-12, 100, Tensor({n}));
  const Eigen::VectorXd direct = a.ldlt().solve(Eigen::Map<const Eigen::VectorXd>(rhs.data(), n));
  for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(res.x[i], direct[i], 1e-9);
  EXPECT_TRUE(res.converged);
  EXPECT_LE(res.iterations, n + 5);
  EXPECT_EQ(res.residual_history.size(), res.iterations + 1);
  EXPECT_NEAR(res.residual_history.front(), 1.0, 1e-15);

  const auto capped = cg_solve(apply, rhs, 1e-12, 2, Tensor({n}));
  EXPECT_EQ(capped.iterations, 2u);
  EXPECT_FALSE(capped.converged);

  const auto zero = cg_solve(apply, Tensor({n}), 1e-8, 10, rhs);
  EXPECT_EQ(zero.x, Tensor({n}));
  EXPECT_THROW(cg_solve([](const Tensor& x) { return x * -1.0; }, rhs, 1e-8, 10, Tensor({n})), NumericError);
}

TEST(Cg, IdentitySystemTakesOneStep) {
  Rng rng(11);
  const Tensor rhs = random_tensor({5}, rng);
  const auto res = cg_solve([](const Tensor& x) { return x * 2.0; }, rhs, 1e-12, 10, Tensor({5}));
  EXPECT_EQ(res.iterations, 1u);
  EXPECT_LT(max_abs_diff(res.x, rhs * 0.5), 1e-15);
  const auto warm = cg_solve([](const Tensor& x) { return x * 2.0; }, rhs, 1e-12, 10, rhs * 0.5);
  EXPECT_EQ(warm.iterations, 0u);
  EXPECT_TRUE(warm.converged);
}

TEST(Gradient, AdjointPair) {
  Rng rng(2);
  for (int t = 0; t < 5; ++t) {
    const Tensor x = random_tensor({2, 7, 9}, rng), g = random_tensor({4, 7, 9}, rng);
    EXPECT_NEAR(dot(image_gradient(x), g), dot(x, image_gradient_adjoint(g, x.shape())), 1e-11);
  }
  Tensor ramp({1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) ramp[i] = static_cast<double>(i % 3);
  EXPECT_DOUBLE_EQ(tv_seminorm(ramp), 6.0);  // two unit steps per row, no vertical change
}

TEST(Metrics, SsimAndPsnr) {
  Rng rng(3);
  const Tensor a = bdu::testing::uniform_tensor({16, 16}, rng);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  Tensor shifted = a;
  for (auto& v : shifted.vec()) v += 0.1;
  EXPECT_NEAR(psnr(shifted, a), 20.0, 1e-9);
  Tensor c1({16, 16}), c2({16, 16});
  c1.fill(0.3);
  c2.fill(0.5);
  const double k1 = 0.01 * 0.01;
  EXPECT_NEAR(ssim(c1, c2), (2 * 0.15 + k1) / (0.09 + 0.25 + k1), 1e-12);
  EXPECT_LT(ssim(a, random_tensor({16, 16}, rng)), 0.5);
  EXPECT_NEAR(ssim(a, a * 1.0), ssim(a.reshaped({1, 16, 16}), a), 0.0);
}

TEST(Fbp, ReconstructsSmoothBlob) {
  const std::size_t s = 32;
  const auto op = make_radon_op(s, 180);
  const Tensor x = blob(s, 4.0);
  const Tensor rec = filtered_backprojection(op, op.apply(x));
  EXPECT_GT(psnr(rec, x), 20.0);
  EXPECT_THROW(filtered_backprojection(make_fourier_mask_op(16, 16, 0.5, 0.04, 0), Tensor({2, 128})), ConfigError);
}

TEST(ZeroFill, FullSamplingIsExact) {
  const auto op = make_fourier_mask_op(16, 16, 1.0, 0.04, 0);
  const Tensor x = as_complex(make_phantom(PhantomKind::SheppLike, 16));
  EXPECT_LT(max_abs_diff(zero_fill(op, op.apply(x)), x), 1e-12);
  EXPECT_THROW(zero_fill(make_radon_op(16, 4), Tensor({4, 23})), ConfigError);
}

TEST(ZeroFill, MatchesPseudoInverse) {
  const auto op = make_fourier_mask_op(8, 8, 0.3, 0.04, 2);
  Rng rng(12);
  const Tensor m = random_tensor(op.output_shape(), rng);
  EXPECT_EQ(zero_fill(op, Tensor(op.output_shape())), Tensor({2, 8, 8}));
  // dense complex matrix of the observed rows of the 2-D unitary DFT
  const Tensor mask = op.mask();
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < 64; ++i)
    if (mask[i] > 0) rows.push_back(i);
  Eigen::MatrixXcd a(rows.size(), 64);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t p = 0; p < 64; ++p) {
      const double ph = -2 * M_PI * (double((rows[r] / 8) * (p / 8)) + double((rows[r] % 8) * (p % 8))) / 8.0;
      a(static_cast<long>(r), static_cast<long>(p)) = std::polar(1.0 / 8.0, ph);
    }
  Eigen::VectorXcd y(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) y[static_cast<long>(r)] = {m[r], m[rows.size() + r]};
  const Eigen::VectorXcd x = a.completeOrthogonalDecomposition().pseudoInverse() * y;
  const Tensor zf = zero_fill(op, m);
  for (std::size_t p = 0; p < 64; ++p) {
    EXPECT_NEAR(zf[p], x[static_cast<long>(p)].real(), 1e-10);
    EXPECT_NEAR(zf[64 + p], x[static_cast<long>(p)].imag(), 1e-10);
  }
}

TEST(Admm, ConstantImageIsKept) {
  const auto op = make_fourier_mask_op(16, 16, 1.0, 0.04, 0);
  Tensor x({2, 16, 16});
  for (std::size_t i = 0; i < 256; ++i) x[i] = 0.7;
  EXPECT_LT(max_abs_diff(tv_admm(op, op.apply(x), 0.1).image, x), 1e-6);
}

TEST(Admm, TinyBetaAtFullSamplingKeepsZeroFill) {
  const auto op = make_fourier_mask_op(16, 16, 1.0, 0.04, 0);
  const Tensor x = as_complex(make_phantom(PhantomKind::SheppLike, 16));
  const Tensor m = op.apply(x);
  const auto res = tv_admm(op, m, 1e-12);
  EXPECT_EQ(res.objective.size(), 100u);
  EXPECT_LT(max_abs_diff(res.image, zero_fill(op, m)), 1e-6);
  EXPECT_THROW(tv_admm(op, m, 0.0), ConfigError);
}

TEST(Admm, ObjectiveDecreasesOverall) {
  const auto op = make_fourier_mask_op(32, 32, 0.2, 0.04, 5);
  const Tensor x = as_complex(make_phantom(PhantomKind::PiecewiseConstBlocks, 32, 5));
  const Tensor m = add_noise_snr(op.apply(x), 30.0, 1).measurement;
  const auto res = tv_admm(op, m, 0.1);
  EXPECT_LT(res.objective.back(), tv_objective(op, zero_fill(op, m), m, 0.1));
}

TEST(Admm, BeatsZeroFillOnPiecewiseConstant) {
  const auto op = make_fourier_mask_op(32, 32, 0.2, 0.04, 7);
  int wins = 0;
  for (std::uint64_t k = 0; k < 3; ++k) {
    const Tensor x = as_complex(make_phantom(PhantomKind::PiecewiseConstBlocks, 32, k));
    const Tensor m = add_noise_snr(op.apply(x), 30.0, k).measurement;
    AdmmConfig cfg;
    cfg.beta_grid = {1e-2, 1e-1};
    const auto sel = select_beta(op, m, x, cfg);
    if (ssim(tv_admm(op, m, sel.beta).image, x) > ssim(zero_fill(op, m), x)) ++wins;
  }
  EXPECT_GE(wins, 2);
}

TEST(SelectBeta, SortsGridAndPicksArgmax) {
  const auto op = make_fourier_mask_op(16, 16, 0.5, 0.04, 3);
  const Tensor x = as_complex(make_phantom(PhantomKind::PiecewiseConstBlocks, 16, 1));
  const Tensor m = op.apply(x);
  AdmmConfig cfg;
  cfg.n_iters = 10;
  cfg.beta_grid = {1.0, 1e-3, 1e-1};
  const auto sel = select_beta(op, m, x, cfg);
  EXPECT_EQ(sel.grid, (std::vector<double>{1e-3, 1e-1, 1.0}));
  ASSERT_EQ(sel.ssims.size(), 3u);
  const auto best = std::max_element(sel.ssims.begin(), sel.ssims.end()) - sel.ssims.begin();
  EXPECT_EQ(sel.beta, sel.grid[static_cast<std::size_t>(best)]);

  // equal scores keep the smaller value
  cfg.beta_grid = {0.5, 0.5};
  EXPECT_EQ(select_beta(op, m, x, cfg).beta, 0.5);
  cfg.beta_grid = {0.3};
  EXPECT_EQ(select_beta(op, m, x, cfg).beta, 0.3);
  cfg.beta_grid = {1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1};
  const Tensor full = make_fourier_mask_op(16, 16, 1.0, 0.04, 0).apply(x);
  const auto sel_full = select_beta(make_fourier_mask_op(16, 16, 1.0, 0.04, 0), full, x, cfg);
  EXPECT_GE(sel_full.ssims.front(), *std::max_element(sel_full.ssims.begin(), sel_full.ssims.end()) - 1e-9);
  cfg.beta_grid = {};
  EXPECT_THROW(select_beta(op, m, x, cfg), ConfigError);
}
