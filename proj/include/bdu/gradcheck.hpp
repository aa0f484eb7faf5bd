// Central finite-difference verification of tape gradients.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "bdu/autodiff.hpp"

namespace bdu {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst;  // "<parameter>[<index>]"
  std::size_t checked = 0;
  bool passed = false;
};

// `loss` builds a fresh tape, runs the forward pass and returns a one-element
// output. It must be deterministic (replay frozen dropout masks). The relative
// error of one entry is |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline GradCheckReport grad_check(const std::vector<ad::Parameter*>& params,
                                  const std::function<ad::Var(ad::Tape&)>& loss, double tolerance = 1e-4,
                                  double h = 1e-5, double floor = 1e-6) {
  std::size_t total = 0;
  for (auto* p : params) total += p->value.size();
  if (total > 10000) throw ConfigError("grad_check is limited to 1e4 parameters");

  for (auto* p : params) p->zero_grad();
  {
    ad::Tape tape;
    ad::Var out = loss(tape);
    if (out.value().size() != 1) throw DimensionError("grad_check loss must be a scalar");
    tape.backward(out);
  }
  auto eval = [&] {
    ad::Tape tape;
    return loss(tape).value()[0];
  };

  GradCheckReport r;
  for (auto* p : params) {
    const Tensor analytic = p->grad;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double up = eval();
      p->value[i] = orig - h;
      const double down = eval();
      p->value[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double abs_err = std::abs(analytic[i] - numeric);
      const double rel = abs_err / std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      if (rel >= r.max_rel_error) {
        r.max_rel_error = rel;
        r.worst = p->name + "[" + std::to_string(i) + "]";
      }
      ++r.checked;
    }
  }
  r.passed = r.max_rel_error < tolerance;
  return r;
}

}  // namespace bdu
