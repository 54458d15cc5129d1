#pragma once

// Central finite-difference gradient checking in double precision.

#include <cstddef>
#include <functional>
#include <stdexcept>

#include "epc/tensor.hpp"

namespace epc {

/// Two evaluations of the checked function at the same point disagreed.
class NondeterminismError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
  /// Coordinates where the step had to shrink because ±step crossed a kink.
  std::size_t step_reductions = 0;
};

struct GradCheckOptions {
  double step = 1e-5;
  /// How many times the step may be divided by 10 when the perturbation
  /// changes the branch pattern of a nonsmooth operation.
  int max_step_reductions = 4;
  /// Check at most this many coordinates (evenly strided); 0 means all.
  std::size_t max_coordinates = 0;
};

/// Compares the tape gradient of `f` with respect to `leaf` against central
/// differences. Returns max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8).
/// `f` must return a scalar and must read `leaf` on every call.
GradCheckResult finite_difference_check(const std::function<Tensor<double>()>& f, Tensor<double>& leaf,
                                        const GradCheckOptions& options = {});

GradCheckResult finite_difference_check(const std::function<Tensor<double>()>& f, Parameter<double>& p,
                                        double step = 1e-5);

}  // namespace epc
