#include "plr/reference.hpp"

#include <stdexcept>

namespace plr::ref {

namespace {

double log_sum_exp(const std::vector<double>& v) {
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  double sum = 0.0;
  for (double x : v) sum += std::exp(x - mx);
  return mx + std::log(sum);
}

}  // namespace

double objective_f64(const PLRParams& params, const PLRConfig& cfg,
                     const ObjectiveConfig& loss_cfg,
                     const std::vector<std::vector<i64>>& contexts,
                     const std::vector<i64>& targets) {
  if (contexts.size() != targets.size() || contexts.empty())
    throw std::invalid_argument("objective_f64: bad batch");
  const i64 B = static_cast<i64>(contexts.size());
  const i64 d = cfg.d, V = cfg.vocab_size, T = cfg.T, M = cfg.M;
  const Weights<double> w = to_weights<double>(params, cfg);

  // states[u][m][t-1], pooled z and gate per user
  std::vector<std::vector<std::vector<std::vector<double>>>> states(
      static_cast<size_t>(B));
  std::vector<std::vector<double>> z_rea(static_cast<size_t>(B));
  for (i64 u = 0; u < B; ++u) {
    Forward<double> f;
    f.w = &w;
    f.encode(contexts[static_cast<size_t>(u)]);
    states[static_cast<size_t>(u)] = f.reason();
    std::vector<std::vector<double>> zs;
    std::vector<double> gate;
    f.aggregate(states[static_cast<size_t>(u)], zs, gate,
                z_rea[static_cast<size_t>(u)]);
  }

  auto score_row = [&](const std::vector<double>& z) {
    std::vector<double> logits(static_cast<size_t>(V));
    for (i64 v = 0; v < V; ++v) {
      double acc = 0.0;
      for (i64 j = 0; j < d; ++j)
        acc += z[static_cast<size_t>(j)] * w.E[static_cast<size_t>(v * d + j)];
      logits[static_cast<size_t>(v)] = acc;
    }
    return logits;
  };

  // next-item prediction on the training-phase representation
  double nip = 0.0;
  for (i64 u = 0; u < B; ++u) {
    auto logits = score_row(z_rea[static_cast<size_t>(u)]);
    nip += log_sum_exp(logits) -
           logits[static_cast<size_t>(targets[static_cast<size_t>(u)])];
  }
  nip /= static_cast<double>(B);

  // global reasoning regularization: mean pairwise KL over the T*M
  // per-state item distributions of each user
  double kl = 0.0;
  const i64 K = T * M;
  if (loss_cfg.kl_enabled && K > 1) {
    for (i64 u = 0; u < B; ++u) {
      std::vector<std::vector<double>> p;
      for (i64 t = 0; t < T; ++t)
        for (i64 m = 0; m < M; ++m) {
          auto logits = score_row(
              states[static_cast<size_t>(u)][static_cast<size_t>(m)]
                    [static_cast<size_t>(t)]);
          s_softmax_row(logits.data(), V);
          p.push_back(std::move(logits));
        }
      double acc = 0.0;
      for (i64 i = 0; i < K; ++i)
        for (i64 j = 0; j < K; ++j) {
          if (i == j) continue;
          for (i64 v = 0; v < V; ++v) {
            const double pi =
                std::max(p[static_cast<size_t>(i)][static_cast<size_t>(v)],
                         1e-12);
            const double pj =
                std::max(p[static_cast<size_t>(j)][static_cast<size_t>(v)],
                         1e-12);
            acc += pi * (std::log(pi) - std::log(pj));
          }
        }
      kl += acc / static_cast<double>(K * (K - 1));
    }
    kl /= static_cast<double>(B);
  }

  // reasoning contrastive loss with identical views (dropout disabled)
  double rcl = 0.0;
  if (loss_cfg.rcl_enabled) {
    if (B < 2)
      throw std::invalid_argument("objective_f64: rcl needs batch >= 2");
    const double tau = loss_cfg.temperature;
    for (i64 t = 0; t < T; ++t)
      for (i64 m = 0; m < M; ++m) {
        std::vector<std::vector<double>> hn(static_cast<size_t>(B));
        for (i64 u = 0; u < B; ++u) {
          const auto& hv = states[static_cast<size_t>(u)][static_cast<size_t>(
              m)][static_cast<size_t>(t)];
          double nrm = 0.0;
          for (double x : hv) nrm += x * x;
          nrm = std::sqrt(nrm);
          hn[static_cast<size_t>(u)].resize(static_cast<size_t>(d));
          for (i64 j = 0; j < d; ++j)
            hn[static_cast<size_t>(u)][static_cast<size_t>(j)] =
                hv[static_cast<size_t>(j)] / nrm;
        }
        std::vector<std::vector<double>> s(
            static_cast<size_t>(B), std::vector<double>(static_cast<size_t>(B)));
        for (i64 i = 0; i < B; ++i)
          for (i64 j = 0; j < B; ++j) {
            double acc = 0.0;
            for (i64 p = 0; p < d; ++p)
              acc += hn[static_cast<size_t>(i)][static_cast<size_t>(p)] *
                     hn[static_cast<size_t>(j)][static_cast<size_t>(p)];
            s[static_cast<size_t>(i)][static_cast<size_t>(j)] = acc / tau;
          }
        // both directions of the symmetric in-batch objective
        for (i64 i = 0; i < B; ++i) {
          rcl += (log_sum_exp(s[static_cast<size_t>(i)]) -
                  s[static_cast<size_t>(i)][static_cast<size_t>(i)]) /
                 static_cast<double>(B);
          std::vector<double> col(static_cast<size_t>(B));
          for (i64 j = 0; j < B; ++j)
            col[static_cast<size_t>(j)] =
                s[static_cast<size_t>(j)][static_cast<size_t>(i)];
          rcl += (log_sum_exp(col) -
                  s[static_cast<size_t>(i)][static_cast<size_t>(i)]) /
                 static_cast<double>(B);
        }
      }
    rcl /= static_cast<double>(T * M);
  }

  double total = nip;
  if (loss_cfg.rcl_enabled) total += rcl;
  if (loss_cfg.kl_enabled)
    total += static_cast<double>(loss_cfg.kl_sign) *
             static_cast<double>(loss_cfg.lambda_kl) * kl;
  return total;
}

}  // namespace plr::ref
