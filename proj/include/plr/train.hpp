#pragma once

#include <string>
#include <vector>

#include "plr/data.hpp"
#include "plr/model.hpp"
#include "plr/objectives.hpp"

namespace plr {

struct TrainConfig {
  i64 batch_size = 128;
  float learning_rate = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float adam_eps = 1e-8f;
  i64 max_epochs = 50;
  i64 patience = 10;
  std::uint64_t seed = 0;
  std::vector<i64> eval_ks = {10, 20};
  float grad_clip = 0.0f;  // 0 disables clipping
  i64 train_cap_per_user = 8;
  bool exclude_seen = false;
  i64 eval_batch = 256;
  void validate() const;
};

struct MetricsReport {
  std::vector<i64> ks;
  std::vector<double> recall;
  std::vector<double> ndcg;
  std::vector<i64> ranks;  // per evaluated user, in user order
  std::string split;
  i64 users = 0;
  double runtime_seconds = 0.0;
  double perturb_rate = 0.0;
  std::uint64_t perturb_seed = 0;

  double recall_at(i64 k) const;
  double ndcg_at(i64 k) const;
};

struct EpochRecord {
  i64 epoch = 0;  // 1-based
  double train_loss = 0.0;
  double valid_ndcg10 = 0.0;
};

struct TrainResult {
  PLRParams params;  // best-validation parameters
  std::vector<EpochRecord> history;
  i64 best_epoch = 0;
  bool aborted_non_finite = false;
  double runtime_seconds = 0.0;
};

// Stop once `patience` consecutive epochs fail to exceed the best value;
// ties consume patience. Returns (stop_now, best_epoch), epochs 1-based.
std::pair<bool, i64> early_stop(const std::vector<double>& valid_history,
                                i64 patience);

TrainResult train(const Dataset& dataset, const PLRConfig& model_cfg,
                  const LossConfig& loss_cfg, const TrainConfig& tc);

MetricsReport evaluate(const PLRParams& params, const PLRConfig& cfg,
                       const Dataset& dataset, SplitLabel split,
                       const std::vector<i64>& ks, bool exclude_seen = false,
                       i64 eval_batch = 256);

// Returns the configuration pair with exactly one mechanism disabled.
// Recognized variants: "no-mors", "no-rcl", "no-kl".
std::pair<PLRConfig, LossConfig> ablate(const PLRConfig& model_cfg,
                                        const LossConfig& loss_cfg,
                                        const std::string& variant);

struct SweepCell {
  i64 m = 0, t = 0;
  float lambda = 0.0f, dropout = 0.0f;
  MetricsReport valid, test;
  double train_runtime = 0.0;
};

struct SweepResult {
  std::vector<SweepCell> cells;
  bool complete = true;  // false when the budget cut the grid short
};

SweepResult sweep(const Dataset& dataset, const PLRConfig& base_model,
                  const LossConfig& base_loss, const TrainConfig& tc,
                  const std::vector<i64>& ms, const std::vector<i64>& ts,
                  const std::vector<float>& lambdas,
                  const std::vector<float>& dropouts, i64 budget);

struct CeilingReport {
  MetricsReport current;
  MetricsReport ceiling;  // per-user best rank over all reasoning states
};

CeilingReport oracle_ceiling(const PLRParams& params, const PLRConfig& cfg,
                             const Dataset& dataset, SplitLabel split,
                             const std::vector<i64>& ks, i64 eval_batch = 256);

std::vector<MetricsReport> robustness_run(const PLRParams& params,
                                          const PLRConfig& cfg,
                                          const Dataset& dataset,
                                          const std::vector<double>& rates,
                                          std::uint64_t seed,
                                          const std::vector<i64>& ks);

// ---- analytic FLOPs accounting -------------------------------------------------

struct FlopsSpec {
  i64 n = 50;          // encoded sequence length
  i64 d = 256;         // model width
  i64 H = 2;           // heads (projection cost is head-count free)
  i64 L = 2;           // layers
  i64 T = 2;           // reasoning steps
  i64 M = 2;           // streams
  i64 ffn_hidden = 0;  // 0 when the backbone has no feed-forward sublayer

  // Table-3 style backbone: SASRec with a d-wide feed-forward network.
  static FlopsSpec paper_scale();
  static FlopsSpec from_config(const PLRConfig& cfg, i64 n);
};

struct FlopsReport {
  double flops_base = 0.0;
  double flops_reasoning = 0.0;
  double flops_total = 0.0;
  double ratio_vs_base = 0.0;
  std::string assumptions;
};

FlopsReport count_flops(const FlopsSpec& spec);

}  // namespace plr
