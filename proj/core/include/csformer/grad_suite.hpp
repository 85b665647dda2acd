#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "csformer/config.hpp"
#include "csformer/grad_check.hpp"

namespace csformer {

struct GradCase {
  std::string name;
  int samples = 0;
  GradCheckReport report;  // worst sample
};

struct GradSuiteReport {
  std::vector<GradCase> cases;
  double max_rel_err = 0.0;
  bool pass = true;
};

struct GradSuiteOptions {
  /// Independent random inputs per case.
  int samples = 5;
  std::uint64_t seed = 1;
  /// The five-point stencil keeps truncation error negligible at a 1e-3 step,
  /// while smaller steps amplify evaluation roundoff. Gradients below the
  /// floor are compared on absolute error, since several parameters (the key
  /// bias of every attention layer) have an exactly zero gradient.
  GradCheckOptions check{.eps = 1e-3, .tol = 1e-4, .max_coords = 64, .denom_floor = 1e-6};
  bool include_ops = true;
  bool include_model = true;
};

/// Finite-difference checks at 64-bit over every differentiable op, the
/// losses, the model components, and the whole network under `model`.
/// `on_case` sees each case as it finishes.
GradSuiteReport run_gradient_suite(const ModelConfig& model, const GradSuiteOptions& options = {},
                                   const std::function<void(const GradCase&)>& on_case = {});

}  // namespace csformer
