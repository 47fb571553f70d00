#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "saan/autodiff.hpp"

namespace saan {

template <typename S>
using TapeFunction = std::function<Var<S>(Tape<S>&, const std::vector<Var<S>>&)>;

struct GradProbe {
  std::size_t input = 0;
  Index element = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradProbe> probes;

  bool passed() const;
  std::size_t failures() const;
  double max_rel_error() const;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Probes per input tensor, sampled without replacement; 0 checks every element.
  Index probes_per_input = 0;
  std::uint64_t seed = 1;
  /// Inputs to probe; empty means all.
  std::vector<bool> check_input;
};

/// Central-difference verification of reverse-mode gradients.
///
/// A non-scalar output is reduced to a scalar by a fixed random projection
/// sum(out * R), R ~ U[-1, 1] drawn from `seed`. For every probed element the
/// numeric derivative (f(x+h) - f(x-h)) / 2h is compared with the autodiff
/// value; rel error = |a - n| / max(|a|, |n|, 1e-8). Failures are reported,
/// not thrown.
template <typename S>
GradCheckReport finite_difference_check(const TapeFunction<S>& f, const std::vector<Tensor<S>>& inputs,
                                        const GradCheckOptions& options = {});

}  // namespace saan
