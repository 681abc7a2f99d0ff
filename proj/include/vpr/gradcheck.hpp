#pragma once

// Finite-difference self-checks for every differentiable component, run on
// small random instances. Objectives are random weighted sums of the outputs
// so no coordinate sits on a symmetric zero of the gradient.

#include <cstdint>
#include <string>
#include <vector>

#include "vpr/numerics.hpp"

namespace vpr {

struct GradCheckOptions {
  std::uint64_t seed = 0;
  double eps = 1e-5;
  double tol = 1e-4;
};

/// gem, gca, gemfc, g2m, netvlad, nvl, nvl_cls, backbone, msloss
const std::vector<std::string>& gradcheck_components();

GradReport gradcheck_component(const std::string& name, const GradCheckOptions& opts = {});

}  // namespace vpr
