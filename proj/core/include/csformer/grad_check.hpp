#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "csformer/tensor.hpp"

namespace csformer {

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  /// Coordinates probed per tensor; larger tensors use a random subset.
  int max_coords = 64;
  /// Relative error is |a − n| / max(|a|, |n|, denom_floor).
  double denom_floor = 1e-8;
  std::uint64_t seed = 0x5eed;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  int coords_checked = 0;
  bool pass = true;
};

double relative_error(double analytic, double numeric, double denom_floor);

/// Compares the analytic gradient of ⟨f(x), R⟩ for a fixed random R against
/// five-point central differences. Failure is reported, never thrown.
GradCheckReport grad_check(const std::function<Tensor64(const Tensor64&)>& f, const Tensor64& x,
                           const GradCheckOptions& options = {});

/// Same comparison for a scalar loss with respect to leaf parameters; the
/// parameters are perturbed in place and restored.
GradCheckReport grad_check_params(const std::function<Tensor64()>& loss, std::span<Tensor64> params,
                                  const GradCheckOptions& options = {});

}  // namespace csformer
