#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "plr/rng.hpp"
#include "plr/tensor.hpp"

namespace plr {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  bool passed = false;
};

// Compares analytic gradients against central differences on randomly chosen
// scalar parameters. compute_grads must zero and repopulate every parameter's
// gradient; loss64 must evaluate the same objective from the current float
// parameter values using 64-bit arithmetic (the probe path). The difference
// quotient uses the actually representable perturbed values. Throws if loss64
// is not deterministic between calls.
GradCheckReport finite_diff_check(
    std::vector<std::pair<std::string, Tensor*>> params,
    const std::function<void()>& compute_grads,
    const std::function<double()>& loss64, double epsilon, int samples,
    double tolerance, RngStream rng);

}  // namespace plr
