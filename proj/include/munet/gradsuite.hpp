#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "munet/nn.hpp"

namespace munet {

struct GradSuiteOptions {
  std::uint64_t seed = 0;
  double tolerance = 1e-4;
  double step = 1e-5;
  /// Doubles one analytic gradient so the detector has something to find.
  bool inject_fault = false;
};

struct GradSuiteEntry {
  std::string name;
  nn::GradCheckReport report;
};

/// Finite-difference checks of every layer, encoder, projection and differentiable loss
/// on small random instances drawn from `seed`.
std::vector<GradSuiteEntry> run_gradient_suite(const GradSuiteOptions& options);

} // namespace munet
