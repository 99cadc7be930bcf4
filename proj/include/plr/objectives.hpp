#pragma once

#include <vector>

#include "plr/model.hpp"
#include "plr/tensor.hpp"

namespace plr {

struct LossConfig {
  float lambda_kl = 0.1f;
  float temperature = 1.0f;  // contrastive temperature
  // +1 follows the combined objective exactly as written; -1 rewards
  // divergence, which is the direction the regularizer is described to push.
  int kl_sign = -1;
  bool rcl_enabled = true;
  bool kl_enabled = true;
  void validate() const;
};

struct LossBreakdown {
  float nip = 0.0f;
  float kl = 0.0f;   // raw regularizer value, always >= 0
  float rcl = 0.0f;
  float total = 0.0f;
  Tensor total_tensor;  // differentiable combination
};

// item distributions of every reasoning state: [B, T*M, V], rows (t-major)
Tensor reasoning_distributions(const ReasoningGrid& grid,
                               const PLRParams& params, const PLRConfig& cfg);

// Eq-style global regularization: mean over users of the normalized pairwise
// KL across all T*M per-state distributions. Accepts [K,V] or [G,K,V].
Tensor kl_regularization(const Tensor& p);

// Symmetric in-batch InfoNCE between two dropout views. states*[t-1] holds
// the step-t states as [B*M, d]; the loss averages over all T*M cells.
Tensor rcl_loss(const std::vector<Tensor>& view1_states,
                const std::vector<Tensor>& view2_states, i64 streams,
                float temperature);

LossBreakdown total_loss(const Tensor& nip, const Tensor& kl,
                         const Tensor& rcl, const LossConfig& cfg);

// Full training-step objective: NIP and KL from view 1, RCL across views.
// grid2 may be null when the contrastive term is disabled.
LossBreakdown training_objective(ReasoningGrid& grid1, ReasoningGrid* grid2,
                                 const PLRParams& params, const PLRConfig& cfg,
                                 const LossConfig& loss_cfg,
                                 const std::vector<i64>& targets);

}  // namespace plr
