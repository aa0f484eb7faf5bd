// Synthetic target images with values in [0, 1].
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>

#include "bdu/rng.hpp"
#include "bdu/tensor.hpp"

namespace bdu {

enum class PhantomKind { SheppLike, RandomEllipses, PiecewiseConstBlocks };

inline PhantomKind parse_phantom_kind(const std::string& s) {
  if (s == "shepp_like") return PhantomKind::SheppLike;
  if (s == "random_ellipses") return PhantomKind::RandomEllipses;
  if (s == "piecewise_const_blocks") return PhantomKind::PiecewiseConstBlocks;
  throw ConfigError("unknown phantom kind: " + s);
}

inline std::string phantom_kind_name(PhantomKind k) {
  switch (k) {
    case PhantomKind::SheppLike: return "shepp_like";
    case PhantomKind::RandomEllipses: return "random_ellipses";
    case PhantomKind::PiecewiseConstBlocks: return "piecewise_const_blocks";
  }
  return "?";
}

struct Ellipse {
  double value, a, b, x0, y0, phi_deg;
};

namespace detail {

// Adds ellipses on [-1, 1]^2 sampled at pixel centres (y axis pointing up).
inline void paint_ellipses(Tensor& img, std::size_t size, const Ellipse* e, std::size_t count) {
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) {
      const double x = (2.0 * static_cast<double>(j) + 1.0) / static_cast<double>(size) - 1.0;
      const double y = 1.0 - (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(size);
      for (std::size_t k = 0; k < count; ++k) {
        const double phi = e[k].phi_deg * 3.14159265358979323846 / 180.0;
        const double dx = x - e[k].x0, dy = y - e[k].y0;
        const double u = dx * std::cos(phi) + dy * std::sin(phi);
        const double v = -dx * std::sin(phi) + dy * std::cos(phi);
        if ((u * u) / (e[k].a * e[k].a) + (v * v) / (e[k].b * e[k].b) <= 1.0) img[i * size + j] += e[k].value;
      }
    }
}

}  // namespace detail

// Returns a (size, size) image.
inline Tensor make_phantom(PhantomKind kind, std::size_t size, std::uint64_t seed = 0, std::size_t n_ellipses = 6) {
  if (size < 16 || size > 128) throw ConfigError("phantom size must lie in [16, 128]");
  Tensor img({size, size});
  switch (kind) {
    case PhantomKind::SheppLike: {
      // Modified Shepp-Logan (Toft) ellipse table.
      static constexpr std::array<Ellipse, 10> table{{{1.0, .69, .92, 0, 0, 0},
                                                      {-0.8, .6624, .874, 0, -.0184, 0},
                                                      {-0.2, .11, .31, .22, 0, -18},
                                                      {-0.2, .16, .41, -.22, 0, 18},
                                                      {0.1, .21, .25, 0, .35, 0},
                                                      {0.1, .046, .046, 0, .1, 0},
                                                      {0.1, .046, .046, 0, -.1, 0},
                                                      {0.1, .046, .023, -.08, -.605, 0},
                                                      {0.1, .023, .023, 0, -.605, 0},
                                                      {0.1, .023, .046, .06, -.605, 0}}};
      detail::paint_ellipses(img, size, table.data(), table.size());
      break;
    }
    case PhantomKind::RandomEllipses: {
      Rng rng(derive_seed(seed, "random_ellipses"));
      std::vector<Ellipse> es;
      for (std::size_t k = 0; k < n_ellipses; ++k) {
        const double r = 0.55 * std::sqrt(uniform01(rng));
        const double t = 2.0 * 3.14159265358979323846 * uniform01(rng);
        const double a = 0.08 + 0.3 * uniform01(rng);
        const double b = 0.08 + 0.3 * uniform01(rng);
        es.push_back({0.15 + 0.6 * uniform01(rng), a, b, r * std::cos(t), r * std::sin(t), 180.0 * uniform01(rng)});
      }
      detail::paint_ellipses(img, size, es.data(), es.size());
      break;
    }
    case PhantomKind::PiecewiseConstBlocks: {
      Rng rng(derive_seed(seed, "piecewise_const_blocks"));
      img.fill(0.1 + 0.2 * uniform01(rng));
      const std::size_t n_blocks = 4 + static_cast<std::size_t>(uniform01(rng) * 5.0);
      for (std::size_t k = 0; k < n_blocks; ++k) {
        const auto h = static_cast<std::size_t>((0.15 + 0.35 * uniform01(rng)) * static_cast<double>(size));
        const auto w = static_cast<std::size_t>((0.15 + 0.35 * uniform01(rng)) * static_cast<double>(size));
        const auto y0 = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(size - h));
        const auto x0 = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(size - w));
        const double v = uniform01(rng);
        for (std::size_t i = y0; i < y0 + h; ++i)
          for (std::size_t j = x0; j < x0 + w; ++j) img[i * size + j] = v;
      }
      break;
    }
  }
  for (auto& v : img.vec()) v = std::clamp(v, 0.0, 1.0);
  return img;
}

}  // namespace bdu
