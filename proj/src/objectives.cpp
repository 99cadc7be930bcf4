#include "plr/objectives.hpp"

#include <stdexcept>

namespace plr {

namespace {
void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}
}  // namespace

void LossConfig::validate() const {
  require(temperature > 0.0f, "loss config: temperature must be positive");
  require(lambda_kl >= 0.0f, "loss config: lambda must be >= 0");
  require(kl_sign == 1 || kl_sign == -1, "loss config: kl_sign must be +-1");
}

Tensor reasoning_distributions(const ReasoningGrid& grid,
                               const PLRParams& params, const PLRConfig& cfg) {
  require(grid.steps_done == cfg.T,
          "reasoning_distributions: grid incomplete");
  const i64 b = grid.batch, m = cfg.M, v = cfg.vocab_size;
  Tensor stacked;
  for (i64 t = 1; t <= cfg.T; ++t) {
    Tensor logits = score_items(grid.states[static_cast<size_t>(t)], params)
                        .reshape({b, m, v});
    stacked = (t == 1) ? logits : concat_axis1(stacked, logits);
  }
  return softmax(stacked);  // [B, T*M, V]
}

Tensor kl_regularization(const Tensor& p) {
  if (p.rank() == 2) {
    return pairwise_kl_mean(p.reshape({1, p.dim(0), p.dim(1)}));
  }
  require(p.rank() == 3, "kl_regularization: expected [K,V] or [G,K,V]");
  return pairwise_kl_mean(p);
}

Tensor rcl_loss(const std::vector<Tensor>& view1_states,
                const std::vector<Tensor>& view2_states, i64 streams,
                float temperature) {
  require(temperature > 0.0f, "rcl_loss: temperature must be positive");
  require(!view1_states.empty() &&
              view1_states.size() == view2_states.size(),
          "rcl_loss: view state lists must match");
  const i64 steps = static_cast<i64>(view1_states.size());
  const i64 bm = view1_states[0].dim(0);
  require(bm % streams == 0, "rcl_loss: row count not divisible by streams");
  const i64 batch = bm / streams;
  require(batch >= 2, "rcl_loss: batch must be >= 2 for in-batch negatives");

  std::vector<i64> diag(static_cast<size_t>(batch));
  for (i64 i = 0; i < batch; ++i) diag[static_cast<size_t>(i)] = i;

  const float inv_tau = 1.0f / temperature;
  Tensor acc;
  for (i64 t = 0; t < steps; ++t) {
    for (i64 m = 0; m < streams; ++m) {
      Tensor h1 = l2_normalize_rows(
          take_rows_strided(view1_states[static_cast<size_t>(t)], m, streams));
      Tensor h2 = l2_normalize_rows(
          take_rows_strided(view2_states[static_cast<size_t>(t)], m, streams));
      Tensor sims = scale(matmul_nt(h1, h2), inv_tau);  // [B,B]
      Tensor cell = add(nip_loss(sims, diag),
                        nip_loss(transpose2d(sims), diag));
      acc = acc.defined() ? add(acc, cell) : cell;
    }
  }
  return scale(acc, 1.0f / static_cast<float>(steps * streams));
}

LossBreakdown total_loss(const Tensor& nip, const Tensor& kl,
                         const Tensor& rcl, const LossConfig& cfg) {
  cfg.validate();
  LossBreakdown out;
  out.nip = nip.item();
  Tensor total = nip;
  if (cfg.rcl_enabled && rcl.defined()) {
    out.rcl = rcl.item();
    total = add(total, rcl);
  }
  if (cfg.kl_enabled && kl.defined()) {
    out.kl = kl.item();
    total = add(
        total, scale(kl, static_cast<float>(cfg.kl_sign) * cfg.lambda_kl));
  }
  out.total_tensor = total;
  out.total = total.item();
  return out;
}

LossBreakdown training_objective(ReasoningGrid& grid1, ReasoningGrid* grid2,
                                 const PLRParams& params, const PLRConfig& cfg,
                                 const LossConfig& loss_cfg,
                                 const std::vector<i64>& targets) {
  loss_cfg.validate();
  Tensor z_train = final_representation(grid1.h0, grid1.z_rea, Phase::kTrain);
  Tensor nip = nip_loss(score_items(z_train, params), targets);

  Tensor kl;
  if (loss_cfg.kl_enabled && cfg.T * cfg.M > 1) {
    kl = kl_regularization(reasoning_distributions(grid1, params, cfg));
  } else if (loss_cfg.kl_enabled) {
    kl = Tensor::scalar(0.0f);
  }

  Tensor rcl;
  if (loss_cfg.rcl_enabled) {
    require(grid2 != nullptr, "training_objective: rcl needs a second view");
    std::vector<Tensor> v1(grid1.states.begin() + 1, grid1.states.end());
    std::vector<Tensor> v2(grid2->states.begin() + 1, grid2->states.end());
    rcl = rcl_loss(v1, v2, cfg.M, loss_cfg.temperature);
  }
  return total_loss(nip, kl, rcl, loss_cfg);
}

}  // namespace plr
