#include "plr/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace plr::theory {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void check_distribution(const VecD& p, const char* what) {
  double sum = 0.0;
  for (double v : p) {
    require(v >= -1e-12, std::string(what) + ": negative probability");
    sum += v;
  }
  require(std::abs(sum - 1.0) < 1e-8,
          std::string(what) + ": probabilities sum to " + std::to_string(sum));
}

double norm2(const VecD& a, const VecD& b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc;
}

VecD softmax_scores(const VecD& z, const std::vector<VecD>& emb) {
  VecD s(emb.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (size_t v = 0; v < emb.size(); ++v) {
    double acc = 0.0;
    for (size_t j = 0; j < z.size(); ++j) acc += z[j] * emb[v][j];
    s[v] = acc;
    mx = std::max(mx, acc);
  }
  double sum = 0.0;
  for (double& x : s) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (double& x : s) x /= sum;
  return s;
}

// expected negative log likelihood of a mixture under the target
double mixture_loss(const std::vector<VecD>& members, const VecD& weights,
                    const VecD& target, bool* infinite) {
  double loss = 0.0;
  for (size_t v = 0; v < target.size(); ++v) {
    if (target[v] == 0.0) continue;
    double mix = 0.0;
    for (size_t m = 0; m < members.size(); ++m)
      mix += weights[m] * members[m][v];
    if (mix <= 0.0) {
      if (infinite) *infinite = true;
      return std::numeric_limits<double>::infinity();
    }
    loss -= target[v] * std::log(mix);
  }
  return loss;
}

}  // namespace

EnsembleGap ensemble_gap(const std::vector<VecD>& members, const VecD& target) {
  require(!members.empty(), "ensemble_gap: need at least one member");
  check_distribution(target, "ensemble_gap target");
  for (const auto& m : members) check_distribution(m, "ensemble_gap member");

  EnsembleGap out;
  const size_t M = members.size();
  const VecD uniform(M, 1.0 / static_cast<double>(M));
  out.l_ens = mixture_loss(members, uniform, target, &out.has_infinite);

  double acc = 0.0;
  for (size_t m = 0; m < M; ++m) {
    VecD onehot(M, 0.0);
    onehot[m] = 1.0;
    acc += mixture_loss(members, onehot, target, &out.has_infinite);
  }
  out.l_ind = acc / static_cast<double>(M);
  out.gap = out.l_ind - out.l_ens;
  if (!out.has_infinite && out.gap < -1e-9) {
    throw std::runtime_error(
        "ensemble_gap: Jensen gap came out negative (" +
        std::to_string(out.gap) + "), which contradicts AM-GM");
  }
  return out;
}

double representational_diversity(const std::vector<VecD>& z) {
  require(z.size() >= 2, "representational_diversity: need M >= 2 streams");
  const size_t M = z.size();
  double acc = 0.0;
  for (size_t a = 0; a < M; ++a)
    for (size_t b = 0; b < M; ++b) {
      if (a == b) continue;
      acc += norm2(z[a], z[b]);
    }
  return acc / static_cast<double>(M * (M - 1));
}

BoundCheck specialization_bound_check(const std::vector<VecD>& z_list,
                                      const std::vector<VecD>& embeddings) {
  require(z_list.size() >= 2, "bound check: need M >= 2");
  require(embeddings.size() >= 2, "bound check: need at least two items");

  BoundCheck out;
  for (const auto& e : embeddings) {
    double n2 = 0.0;
    for (double x : e) n2 += x * x;
    out.r_max = std::max(out.r_max, std::sqrt(n2));
  }
  double min_sep = std::numeric_limits<double>::infinity();
  for (size_t a = 0; a < embeddings.size(); ++a)
    for (size_t b = a + 1; b < embeddings.size(); ++b)
      min_sep = std::min(min_sep, std::sqrt(norm2(embeddings[a], embeddings[b])));
  out.delta_e = min_sep;
  if (out.delta_e <= 0.0) {
    out.vacuous = true;  // duplicate embeddings; the bound says nothing
    return out;
  }
  out.c = out.delta_e * out.delta_e / (8.0 * out.r_max * out.r_max);
  out.diversity = representational_diversity(z_list);

  std::vector<VecD> members;
  for (const auto& z : z_list) members.push_back(softmax_scores(z, embeddings));
  // benefit measured under the uniform ensemble's own prediction
  VecD target(embeddings.size(), 0.0);
  for (const auto& p : members)
    for (size_t v = 0; v < target.size(); ++v)
      target[v] += p[v] / static_cast<double>(members.size());
  EnsembleGap gap = ensemble_gap(members, target);
  out.gap = gap.gap;
  out.holds = out.gap >= out.c * out.diversity - 1e-6;
  return out;
}

DecayTrace diversity_decay_trace(const MapFn& f, std::vector<VecD> states,
                                 i64 steps, double declared_l) {
  require(states.size() >= 2, "decay trace: need M >= 2 states");
  require(steps >= 1, "decay trace: need T >= 1");
  DecayTrace out;
  out.bound_l = declared_l;
  out.d.push_back(representational_diversity(states));
  for (i64 t = 1; t <= steps; ++t) {
    std::vector<VecD> next;
    next.reserve(states.size());
    for (const auto& h : states) {
      VecD y = f(h);
      double n2 = 0.0;
      for (double v : y) n2 += v * v;
      if (!std::isfinite(n2) || n2 > 1e24) {
        throw std::runtime_error(
            "decay trace: trajectory diverged at step " + std::to_string(t));
      }
      next.push_back(std::move(y));
    }
    for (size_t a = 0; a < states.size(); ++a)
      for (size_t b = a + 1; b < states.size(); ++b) {
        const double before = norm2(states[a], states[b]);
        const double after = norm2(next[a], next[b]);
        if (before > 1e-24) {
          out.max_step_ratio =
              std::max(out.max_step_ratio, std::sqrt(after / before));
        }
      }
    states = std::move(next);
    out.d.push_back(representational_diversity(states));
  }
  const double d0 = out.d.front(), dT = out.d.back();
  const double factor =
      std::pow(declared_l, 2.0 * static_cast<double>(steps));
  out.holds = dT <= factor * d0 * (1.0 + 1e-6) + 1e-300;
  if (d0 > 0.0 && dT > 0.0) {
    out.fitted_rate =
        (std::log(d0) - std::log(dT)) / static_cast<double>(steps);
  }
  return out;
}

double lipschitz_estimate(const MapFn& f, const std::vector<VecD>& base_points,
                          i64 probe_count, double radius, RngStream rng) {
  require(!base_points.empty(), "lipschitz_estimate: need base points");
  require(probe_count >= 1, "lipschitz_estimate: need probes");
  require(radius > 0.0, "lipschitz_estimate: radius must be positive");
  const size_t dim = base_points[0].size();
  double best = 0.0;
  for (i64 p = 0; p < probe_count; ++p) {
    const VecD& base = base_points[static_cast<size_t>(
        rng.next_below(base_points.size()))];
    VecD a(dim), b(dim);
    for (size_t j = 0; j < dim; ++j) {
      a[j] = base[j] + radius * (2.0 * rng.next_double() - 1.0);
      b[j] = base[j] + radius * (2.0 * rng.next_double() - 1.0);
    }
    const double dist = std::sqrt(norm2(a, b));
    if (dist < 1e-12) continue;  // degenerate probe pair
    const double out_dist = std::sqrt(norm2(f(a), f(b)));
    best = std::max(best, out_dist / dist);
  }
  return best;
}

double spectral_norm(const std::vector<double>& mat, i64 dim) {
  VecD v(static_cast<size_t>(dim), 1.0 / std::sqrt(static_cast<double>(dim)));
  double sigma = 0.0;
  for (int it = 0; it < 200; ++it) {
    // w = A v, u = A^T w
    VecD w(static_cast<size_t>(dim), 0.0);
    for (i64 i = 0; i < dim; ++i)
      for (i64 j = 0; j < dim; ++j)
        w[static_cast<size_t>(i)] +=
            mat[static_cast<size_t>(i * dim + j)] * v[static_cast<size_t>(j)];
    VecD u(static_cast<size_t>(dim), 0.0);
    for (i64 i = 0; i < dim; ++i)
      for (i64 j = 0; j < dim; ++j)
        u[static_cast<size_t>(j)] +=
            mat[static_cast<size_t>(i * dim + j)] * w[static_cast<size_t>(i)];
    double nu = 0.0;
    for (double x : u) nu += x * x;
    nu = std::sqrt(nu);
    if (nu < 1e-300) return 0.0;
    for (size_t j = 0; j < u.size(); ++j) v[j] = u[j] / nu;
    double nw = 0.0;
    for (double x : w) nw += x * x;
    sigma = std::sqrt(nw);
  }
  // one more pass for the final estimate
  VecD w(static_cast<size_t>(dim), 0.0);
  for (i64 i = 0; i < dim; ++i)
    for (i64 j = 0; j < dim; ++j)
      w[static_cast<size_t>(i)] +=
          mat[static_cast<size_t>(i * dim + j)] * v[static_cast<size_t>(j)];
  double nw = 0.0;
  for (double x : w) nw += x * x;
  return std::sqrt(nw);
}

GatingResult gating_benefit(const std::vector<VecD>& members,
                            const VecD& weights, const VecD& target) {
  require(members.size() == weights.size(),
          "gating_benefit: weight count mismatch");
  double wsum = 0.0;
  for (double w : weights) {
    require(w >= -1e-12, "gating_benefit: negative weight");
    wsum += w;
  }
  require(std::abs(wsum - 1.0) < 1e-8,
          "gating_benefit: weights sum to " + std::to_string(wsum));
  check_distribution(target, "gating_benefit target");

  GatingResult out;
  const VecD uniform(members.size(), 1.0 / static_cast<double>(members.size()));
  // both losses go through the identical mixture routine, so uniform weights
  // give gain == 0 bitwise
  out.l_gated = mixture_loss(members, weights, target, nullptr);
  out.l_uniform = mixture_loss(members, uniform, target, nullptr);
  out.gain = out.l_uniform - out.l_gated;

  // paper-defined MI-style quantity: sum_m w_m E_{v~p*} ln(p_m(v)/p_tilde(v))
  double mi = 0.0;
  for (size_t m = 0; m < members.size(); ++m) {
    if (weights[m] == 0.0) continue;
    double term = 0.0;
    for (size_t v = 0; v < target.size(); ++v) {
      if (target[v] == 0.0) continue;
      double mix = 0.0;
      for (size_t mm = 0; mm < members.size(); ++mm)
        mix += weights[mm] * members[mm][v];
      const double pm = std::max(members[m][v], 1e-300);
      term += target[v] * std::log(pm / std::max(mix, 1e-300));
    }
    mi += weights[m] * term;
  }
  out.mi_style = mi;
  return out;
}

VecD oracle_vertex_weights(const std::vector<VecD>& members,
                           const VecD& target) {
  size_t best = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  for (size_t m = 0; m < members.size(); ++m) {
    VecD onehot(members.size(), 0.0);
    onehot[m] = 1.0;
    const double loss = mixture_loss(members, onehot, target, nullptr);
    if (loss < best_loss) {
      best_loss = loss;
      best = m;
    }
  }
  VecD w(members.size(), 0.0);
  w[best] = 1.0;
  return w;
}

VecD softmin_loss_weights(const std::vector<VecD>& members, const VecD& target,
                          double beta) {
  VecD w(members.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (size_t m = 0; m < members.size(); ++m) {
    VecD onehot(members.size(), 0.0);
    onehot[m] = 1.0;
    w[m] = -beta * mixture_loss(members, onehot, target, nullptr);
    mx = std::max(mx, w[m]);
  }
  double sum = 0.0;
  for (double& x : w) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (double& x : w) x /= sum;
  return w;
}

TradeoffCurve tradeoff_curve(const MapFn& f, std::vector<VecD> states,
                             i64 t_max, const std::vector<VecD>& embeddings,
                             const VecD& target, double declared_l) {
  require(states.size() >= 2, "tradeoff curve: need M >= 2");
  const double d0 = representational_diversity(states);
  double c = 0.0;
  {
    // reuse the bound constant from the embedding geometry
    BoundCheck bc = specialization_bound_check(states, embeddings);
    c = bc.vacuous ? 0.0 : bc.c;
  }
  const double gamma = -std::log(declared_l);

  TradeoffCurve out;
  double best_loss = std::numeric_limits<double>::infinity();
  for (i64 t = 0; t <= t_max; ++t) {
    if (t > 0) {
      std::vector<VecD> next;
      for (const auto& h : states) next.push_back(f(h));
      states = std::move(next);
    }
    std::vector<VecD> members;
    for (const auto& z : states)
      members.push_back(softmax_scores(z, embeddings));
    EnsembleGap gap = ensemble_gap(members, target);
    TradeoffPoint pt;
    pt.t = t;
    pt.l_ind = gap.l_ind;
    pt.l_ens = gap.l_ens;
    pt.gap = gap.gap;
    pt.diversity = representational_diversity(states);
    pt.bound = c * std::exp(-2.0 * gamma * static_cast<double>(t)) * d0;
    if (pt.l_ens < best_loss) {
      best_loss = pt.l_ens;
      out.best_t = t;
    }
    out.points.push_back(pt);
  }
  return out;
}

// ---- validator battery --------------------------------------------------------

bool TheoryReport::all_passed() const {
  for (const auto& v : verdicts)
    if (!v.passed) return false;
  return true;
}

namespace {

VecD dirichlet_row(RngStream& rng, i64 v) {
  VecD p(static_cast<size_t>(v));
  double sum = 0.0;
  for (double& x : p) {
    x = -std::log(std::max(rng.next_double(), 1e-300));
    sum += x;
  }
  for (double& x : p) x /= sum;
  return p;
}

std::vector<double> random_matrix_with_norm(RngStream& rng, i64 dim,
                                            double target_norm) {
  std::vector<double> mat(static_cast<size_t>(dim * dim));
  for (double& x : mat) x = rng.next_normal();
  const double sn = spectral_norm(mat, dim);
  for (double& x : mat) x *= target_norm / sn;
  return mat;
}

MapFn linear_map(std::vector<double> mat, i64 dim) {
  return [mat = std::move(mat), dim](const VecD& h) {
    VecD y(static_cast<size_t>(dim), 0.0);
    for (i64 i = 0; i < dim; ++i)
      for (i64 j = 0; j < dim; ++j)
        y[static_cast<size_t>(i)] +=
            mat[static_cast<size_t>(i * dim + j)] * h[static_cast<size_t>(j)];
    return y;
  };
}

}  // namespace

TheoryReport run_theory_suite(std::uint64_t seed) {
  TheoryReport rep;
  RngStream root(seed);

  // Jensen gap nonnegativity over 1e4 random ensembles, plus equality cases
  {
    RngStream rng = root.child("ensemble");
    double worst = std::numeric_limits<double>::infinity();
    bool ok = true;
    for (int trial = 0; trial < 10000; ++trial) {
      const i64 M = 2 + static_cast<i64>(rng.next_below(4));
      const i64 V = 2 + static_cast<i64>(rng.next_below(49));
      std::vector<VecD> members;
      for (i64 m = 0; m < M; ++m) members.push_back(dirichlet_row(rng, V));
      EnsembleGap g = ensemble_gap(members, dirichlet_row(rng, V));
      worst = std::min(worst, g.gap);
      ok = ok && g.gap >= -1e-9;
    }
    rep.verdicts.push_back({"ensemble gap is nonnegative (10^4 ensembles)",
                            ok, worst, -1e-9, "min observed gap"});

    RngStream rng2 = root.child("ensemble-equal");
    double worst_eq = 0.0;
    bool ok_eq = true;
    for (int trial = 0; trial < 200; ++trial) {
      const i64 V = 2 + static_cast<i64>(rng2.next_below(20));
      VecD row = dirichlet_row(rng2, V);
      std::vector<VecD> members(3, row);  // duplicated rows
      EnsembleGap g = ensemble_gap(members, dirichlet_row(rng2, V));
      worst_eq = std::max(worst_eq, std::abs(g.gap));
      ok_eq = ok_eq && std::abs(g.gap) <= 1e-9;
    }
    rep.verdicts.push_back({"identical members give zero gap", ok_eq, worst_eq,
                            1e-9, "max |gap| over duplicated ensembles"});

    // worked example
    std::vector<VecD> two = {{0.8, 0.2}, {0.4, 0.6}};
    EnsembleGap g = ensemble_gap(two, {1.0, 0.0});
    rep.jensen_gap_example = g.gap;
    const double want = 0.5 * (-std::log(0.8) - std::log(0.4)) + std::log(0.6);
    rep.verdicts.push_back({"worked two-member example gap",
                            std::abs(g.gap - want) < 1e-4 &&
                                std::abs(g.gap - 0.0589) < 1e-4,
                            g.gap, want, "expected about 0.0589"});
  }

  // diversity decay bound over 100 random linear systems, spectral norm
  // in (0, 1.5]; the bound holds whether or not the map is a contraction
  {
    RngStream rng = root.child("decay");
    bool ok = true;
    double worst_slack = std::numeric_limits<double>::infinity();
    for (int trial = 0; trial < 100; ++trial) {
      const i64 dim = 2 + static_cast<i64>(rng.next_below(7));
      const double target_norm = 0.015 + 1.485 * rng.next_double();
      auto mat = random_matrix_with_norm(rng, dim, target_norm);
      const double sn = spectral_norm(mat, dim);
      MapFn f = linear_map(mat, dim);
      const i64 M = 2 + static_cast<i64>(rng.next_below(3));
      const i64 T = 1 + static_cast<i64>(rng.next_below(8));
      std::vector<VecD> states;
      for (i64 m = 0; m < M; ++m) {
        VecD h(static_cast<size_t>(dim));
        for (double& x : h) x = rng.next_normal();
        states.push_back(std::move(h));
      }
      DecayTrace tr = diversity_decay_trace(f, states, T, sn);
      ok = ok && tr.holds;
      const double bound =
          std::pow(sn, 2.0 * static_cast<double>(T)) * tr.d.front();
      if (bound > 0.0) worst_slack = std::min(worst_slack, bound - tr.d.back());
    }
    rep.verdicts.push_back({"diversity decay bound on 100 linear systems", ok,
                            worst_slack, 0.0, "min bound slack"});

    // exact scalar contraction: 0.5 I, D0 = 4, T = 3 -> 0.0625
    std::vector<double> half = {0.5, 0.0, 0.0, 0.5};
    DecayTrace tr = diversity_decay_trace(linear_map(half, 2),
                                          {{1.0, 0.0}, {-1.0, 0.0}}, 3, 0.5);
    rep.decay_trace = tr.d;
    rep.verdicts.push_back({"scalar contraction trace is exact",
                            std::abs(tr.d.back() - 0.0625) < 1e-9 && tr.holds,
                            tr.d.back(), 0.0625, "D(3) for 0.5*I from D(0)=4"});
  }

  // Diversity-specialization bound on 200 random linear-scoring instances.
  // Items arrive in near-duplicate pairs so the minimum separation is small
  // against the embedding radius, the regime of large catalogues where the
  // bound's constant is informative.
  {
    RngStream rng = root.child("bound");
    bool ok = true;
    i64 failures = 0;
    double min_margin = std::numeric_limits<double>::infinity();
    for (int trial = 0; trial < 200; ++trial) {
      const i64 V = 10, d = 4;
      std::vector<VecD> emb;
      for (i64 v = 0; v < V; v += 2) {
        VecD center(static_cast<size_t>(d));
        for (double& x : center) x = rng.next_normal();
        VecD twin = center;
        for (double& x : twin) x += 0.05 * rng.next_normal();
        emb.push_back(std::move(center));
        emb.push_back(std::move(twin));
      }
      const i64 M = 2 + static_cast<i64>(rng.next_below(4));
      std::vector<VecD> z;
      for (i64 m = 0; m < M; ++m) {
        VecD x(static_cast<size_t>(d));
        for (double& v : x) v = 0.4 * rng.next_normal();
        z.push_back(std::move(x));
      }
      BoundCheck bc = specialization_bound_check(z, emb);
      if (bc.vacuous) continue;
      if (trial == 0) {
        rep.bound_c = bc.c;
        rep.bound_delta_e = bc.delta_e;
        rep.bound_r_max = bc.r_max;
        rep.bound_diversity = bc.diversity;
        rep.bound_gap = bc.gap;
      }
      min_margin = std::min(min_margin, bc.gap - bc.c * bc.diversity);
      if (!bc.holds) ++failures;
      ok = ok && bc.holds;
    }
    rep.verdicts.push_back(
        {"specialization bound I >= c*D on 200 instances", ok, min_margin,
         -1e-6,
         failures == 0 ? "zero failures"
                       : std::to_string(failures) + " failures"});
  }

  // gating: uniform weights give exactly zero gain; oracle vertex weights
  // never lose on point-mass targets
  {
    RngStream rng = root.child("gating");
    bool uniform_ok = true, vertex_ok = true;
    double worst_vertex = std::numeric_limits<double>::infinity();
    for (int trial = 0; trial < 500; ++trial) {
      const i64 M = 2 + static_cast<i64>(rng.next_below(4));
      const i64 V = 3 + static_cast<i64>(rng.next_below(20));
      std::vector<VecD> members;
      for (i64 m = 0; m < M; ++m) members.push_back(dirichlet_row(rng, V));
      VecD target(static_cast<size_t>(V), 0.0);
      target[rng.next_below(static_cast<std::uint64_t>(V))] = 1.0;

      const VecD uniform(members.size(),
                         1.0 / static_cast<double>(members.size()));
      GatingResult gu = gating_benefit(members, uniform, target);
      uniform_ok = uniform_ok && gu.gain == 0.0;

      GatingResult gv =
          gating_benefit(members, oracle_vertex_weights(members, target),
                         target);
      worst_vertex = std::min(worst_vertex, gv.gain);
      vertex_ok = vertex_ok && gv.gain >= -1e-9;
    }
    rep.verdicts.push_back({"uniform gating gain is exactly zero", uniform_ok,
                            0.0, 0.0, "bitwise, same code path"});
    rep.verdicts.push_back({"oracle vertex gating never loses (500 instances)",
                            vertex_ok, worst_vertex, -1e-9,
                            "min gain over point-mass targets"});

    // worked example: one perfect stream, one uniform, all weight on the first
    std::vector<VecD> two = {VecD(10, 0.0), VecD(10, 0.1)};
    two[0][0] = 1.0;
    VecD target(10, 0.0);
    target[0] = 1.0;
    GatingResult g = gating_benefit(two, {1.0, 0.0}, target);
    rep.gating_gain_example = g.gain;
    rep.mi_style_example = g.mi_style;
    rep.verdicts.push_back({"worked gating example",
                            std::abs(g.gain - (-std::log(0.55))) < 1e-4 &&
                                std::abs(g.l_gated) < 1e-12,
                            g.gain, -std::log(0.55), "expected about 0.5978"});
  }

  // Lipschitz estimator on a known linear map
  {
    RngStream rng = root.child("lipschitz");
    auto mat = random_matrix_with_norm(rng, 8, 0.7);
    const double sn = spectral_norm(mat, 8);
    MapFn f = linear_map(mat, 8);
    const double est = lipschitz_estimate(f, {VecD(8, 0.0)}, 10000, 1.0,
                                          root.child("lipschitz-probes"));
    rep.lipschitz_estimate_linear = est;
    rep.gamma_linear = -std::log(est);
    rep.verdicts.push_back({"lipschitz estimate brackets a 0.7-norm map",
                            est >= 0.6 && est <= sn + 1e-6, est, sn,
                            "estimate in [0.6, spectral norm]"});
  }

  return rep;
}

}  // namespace plr::theory
