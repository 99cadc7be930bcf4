#include "plr/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace plr {

GradCheckReport finite_diff_check(
    std::vector<std::pair<std::string, Tensor*>> params,
    const std::function<void()>& compute_grads,
    const std::function<double()>& loss64, double epsilon, int samples,
    double tolerance, RngStream rng) {
  if (epsilon <= 0.0) throw std::invalid_argument("gradcheck: epsilon <= 0");
  if (samples < 1) throw std::invalid_argument("gradcheck: samples < 1");

  const double probe0 = loss64();
  const double probe1 = loss64();
  if (probe0 != probe1) {
    throw std::runtime_error(
        "gradcheck: loss function is not deterministic between probes (" +
        std::to_string(probe0) + " vs " + std::to_string(probe1) + ")");
  }

  compute_grads();

  i64 total = 0;
  for (auto& [name, t] : params) {
    (void)name;
    total += t->numel();
  }
  if (total == 0) throw std::invalid_argument("gradcheck: no parameters");

  GradCheckReport report;
  for (int s = 0; s < samples; ++s) {
    i64 flat =
        static_cast<i64>(rng.next_below(static_cast<std::uint64_t>(total)));
    size_t pi = 0;
    while (flat >= params[pi].second->numel()) {
      flat -= params[pi].second->numel();
      ++pi;
    }
    Tensor* t = params[pi].second;
    float* slot = t->data() + flat;
    const float original = *slot;
    const float hi = static_cast<float>(static_cast<double>(original) + epsilon);
    const float lo = static_cast<float>(static_cast<double>(original) - epsilon);

    *slot = hi;
    const double f_hi = loss64();
    *slot = lo;
    const double f_lo = loss64();
    *slot = original;

    const double spacing = static_cast<double>(hi) - static_cast<double>(lo);
    const double numeric = (f_hi - f_lo) / spacing;
    const double analytic = static_cast<double>(t->grad()[flat]);
    const double denom =
        std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic - numeric) / denom;
    if (rel > report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_parameter =
          params[pi].first + "[" + std::to_string(flat) + "]";
    }
  }
  report.passed = report.max_relative_error <= tolerance;
  return report;
}

}  // namespace plr
