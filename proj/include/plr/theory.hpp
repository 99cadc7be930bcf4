#pragma once

#include <functional>
#include <string>
#include <vector>

#include "plr/rng.hpp"
#include "plr/tensor.hpp"

namespace plr::theory {

using VecD = std::vector<double>;
using MapFn = std::function<VecD(const VecD&)>;

// ---- ensemble error decomposition ------------------------------------------

struct EnsembleGap {
  double l_ens = 0.0;   // loss of the uniform ensemble
  double l_ind = 0.0;   // mean individual loss
  double gap = 0.0;     // specialization benefit, l_ind - l_ens
  bool has_infinite = false;  // a target-supported item had zero probability
};

// Expectations over the target distribution are exact finite sums.
EnsembleGap ensemble_gap(const std::vector<VecD>& members, const VecD& target);

double representational_diversity(const std::vector<VecD>& z);  // needs M >= 2

struct BoundCheck {
  double r_max = 0.0;      // max embedding norm
  double delta_e = 0.0;    // min pairwise embedding separation
  double c = 0.0;          // delta^2 / (8 R^2)
  double diversity = 0.0;  // D over the z vectors
  double gap = 0.0;        // specialization benefit at the ensemble's own mean
  bool vacuous = false;    // duplicate embeddings make the bound empty
  bool holds = false;      // gap >= c * diversity - 1e-6
};

// Linear-scoring instance: member m predicts softmax(z_m . E). The benefit is
// measured against the uniform ensemble's own predictive distribution.
BoundCheck specialization_bound_check(const std::vector<VecD>& z_list,
                                      const std::vector<VecD>& embeddings);

// ---- contraction dynamics ----------------------------------------------------

struct DecayTrace {
  std::vector<double> d;        // D^(0..T)
  double bound_l = 0.0;         // Lipschitz constant used by the bound
  double max_step_ratio = 0.0;  // max pairwise contraction ratio observed
  double fitted_rate = 0.0;     // (ln D0 - ln DT) / T, decay per step
  bool holds = false;           // D^T <= L^{2T} D^0 (1 + 1e-6)
};

DecayTrace diversity_decay_trace(const MapFn& f, std::vector<VecD> states,
                                 i64 steps, double declared_l);

// Max ratio ||f(h)-f(h')|| / ||h-h'|| over random probe pairs near the given
// base points; a lower bound on the true Lipschitz constant.
double lipschitz_estimate(const MapFn& f, const std::vector<VecD>& base_points,
                          i64 probe_count, double radius, RngStream rng);

// power-iteration spectral norm, the oracle for linear maps
double spectral_norm(const std::vector<double>& mat, i64 dim);

// ---- gating ---------------------------------------------------------------------

struct GatingResult {
  double l_gated = 0.0;
  double l_uniform = 0.0;  // computed through the same mixture code path
  double gain = 0.0;       // l_uniform - l_gated
  double mi_style = 0.0;   // the appendix's mutual-information-style quantity
};

GatingResult gating_benefit(const std::vector<VecD>& members,
                            const VecD& weights, const VecD& target);

// per-instance loss-minimizing vertex (all mass on the best member)
VecD oracle_vertex_weights(const std::vector<VecD>& members,
                           const VecD& target);
// softmax over negative member losses at inverse temperature beta
VecD softmin_loss_weights(const std::vector<VecD>& members, const VecD& target,
                          double beta);

// ---- refinement-diversity trade-off ---------------------------------------------

struct TradeoffPoint {
  i64 t = 0;
  double l_ind = 0.0;
  double l_ens = 0.0;
  double gap = 0.0;
  double diversity = 0.0;
  double bound = 0.0;  // c * exp(-2 gamma t) * D^(0)
};

struct TradeoffCurve {
  std::vector<TradeoffPoint> points;  // t = 0..T
  i64 best_t = 0;                     // argmin ensemble loss, may equal T
};

TradeoffCurve tradeoff_curve(const MapFn& f, std::vector<VecD> states,
                             i64 t_max, const std::vector<VecD>& embeddings,
                             const VecD& target, double declared_l);

// ---- validator battery -----------------------------------------------------------

struct InequalityVerdict {
  std::string name;      // which inequality this checks
  bool passed = false;
  double measured = 0.0;
  double threshold = 0.0;
  std::string detail;
};

struct TheoryReport {
  std::vector<InequalityVerdict> verdicts;
  double jensen_gap_example = 0.0;
  double gating_gain_example = 0.0;
  double mi_style_example = 0.0;
  double lipschitz_estimate_linear = 0.0;
  double gamma_linear = 0.0;  // -ln L of the probed linear map
  // constants of one representative bound instance
  double bound_c = 0.0;
  double bound_delta_e = 0.0;
  double bound_r_max = 0.0;
  double bound_diversity = 0.0;
  double bound_gap = 0.0;
  std::vector<double> decay_trace;  // D^(0..T) of the exact contraction case
  bool all_passed() const;
};

// The standard inequality suites at the documented trial counts.
TheoryReport run_theory_suite(std::uint64_t seed);

}  // namespace plr::theory
