// Seeded random streams. A root seed fans out to named sub-streams so that
// adding a new consumer never perturbs an existing one.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace bdu {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view name) {
  return splitmix64(root ^ splitmix64(fnv1a64(name)));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t counter) {
  return splitmix64(splitmix64(root) + counter);
}

inline Rng make_rng(std::uint64_t root, std::string_view name) { return Rng(derive_seed(root, name)); }

// Uniform double in [0, 1) from 53 random bits; independent of the
// standard library's distribution implementations.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Box-Muller; one fresh pair per call keeps streams position-independent.
inline double standard_normal(Rng& rng) {
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

}  // namespace bdu
