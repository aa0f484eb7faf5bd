// Additive white Gaussian noise at an exact signal-to-noise ratio.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

#include "bdu/rng.hpp"
#include "bdu/tensor.hpp"

namespace bdu {

struct MeasurementRecord {
  Tensor measurement;
  std::string operator_id;
  double snr_db = std::numeric_limits<double>::infinity();
  std::uint64_t noise_seed = 0;
};

// SNR in dB: 20 log10(||m|| / ||n||).
inline double snr_db(const Tensor& noiseless, const Tensor& noise) {
  return 20.0 * std::log10(norm2(noiseless) / norm2(noise));
}

// Draws white Gaussian noise and rescales it so the realized SNR equals
// `target_db` exactly. An infinite target yields the noiseless measurement.
inline MeasurementRecord add_noise_snr(const Tensor& noiseless, double target_db, std::uint64_t seed,
                                       std::string operator_id = {}) {
  const double mnorm = norm2(noiseless);
  if (!(mnorm > 0.0)) throw ValueError("add_noise_snr: noiseless measurement has zero norm");
  MeasurementRecord rec{noiseless, std::move(operator_id), target_db, seed};
  if (std::isinf(target_db) && target_db > 0) return rec;
  Rng rng(derive_seed(seed, "awgn"));
  Tensor n(noiseless.shape());
  for (std::size_t i = 0; i < n.size(); ++i) n[i] = standard_normal(rng);
  const double target_norm = mnorm * std::pow(10.0, -target_db / 20.0);
  n *= target_norm / norm2(n);
  rec.measurement += n;
  return rec;
}

}  // namespace bdu
