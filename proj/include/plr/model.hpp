#pragma once

#include <string>
#include <utility>
#include <vector>

#include "plr/rng.hpp"
#include "plr/tensor.hpp"

namespace plr {

struct PLRConfig {
  i64 d = 32;        // embedding dimension
  i64 H = 2;         // attention heads
  i64 L = 2;         // encoder layers
  i64 T = 2;         // reasoning steps
  i64 M = 2;         // parallel reasoning streams
  i64 max_len = 20;  // context window
  i64 vocab_size = 0;
  float dropout_rep = 0.2f;
  float dropout_attn = 0.2f;
  bool mors_enabled = true;
  bool rcl_enabled = true;
  bool kl_enabled = true;
  // true: pre-norm attention + feed-forward sublayers; false: bare
  // attention+residual layers exactly as the backbone equations are written
  bool use_layernorm_ffn = true;

  i64 head_dim() const { return d / H; }
  i64 ffn_dim() const { return 4 * d; }
  void validate() const;  // throws on violated invariants
};

struct LayerParams {
  Tensor wq, wk, wv, wo;  // [d,d]
  Tensor w1, b1, w2, b2;  // feed-forward d -> 4d -> d
};

// Every learnable tensor of the model, in a fixed enumeration order.
struct PLRParams {
  Tensor item_emb;  // [V,d]
  Tensor pos_emb;   // [max_len,d]
  std::vector<LayerParams> layers;
  Tensor rpe;       // [T,d] reasoning position embeddings
  Tensor triggers;  // [M,d] stream trigger tokens
  Tensor gate_w;    // [M,d]
  Tensor gate_b;    // [M]

  static PLRParams init(const PLRConfig& cfg, RngStream rng);
  std::vector<std::pair<std::string, Tensor*>> named_tensors();
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
  PLRParams clone() const;
  void zero_grad();
};

enum class Phase { kTrain, kInfer };

struct LayerKV {
  Tensor ctx_k, ctx_v;          // [B,H,n,dh], stored once for all streams
  Tensor ctx_k_exp, ctx_v_exp;  // [B*M,H,n,dh]
  Tensor rea_k, rea_v;          // [B*M,H,steps_cached,dh], per-stream segments
};

// Workspace of one forward pass over a batch of contexts. Stream states are
// kept batched as [B*M,d] rows ordered (user-major, stream-minor).
struct ReasoningGrid {
  i64 batch = 0;
  i64 n = 0;  // padded context length
  Tensor h_enc;     // [B,n,d]
  Tensor h0;        // [B,d]
  Tensor pad_mask;  // [B,n] additive, 0 for real positions, -1e9 for pads
  std::vector<LayerKV> kv;
  std::vector<Tensor> states;  // states[t]: [B*M,d]; index 0 is the init state
  i64 steps_done = 0;
  Tensor stream_z;  // [B,M,d]
  Tensor gate;      // [B,M]
  Tensor z_rea;     // [B,d]
};

// Per-step attention rows captured for the attention-dump artifact.
struct AttnCapture {
  struct Record {
    i64 step, layer;
    i64 heads, keys;
    std::vector<float> probs;  // [B*M, H, keys] flattened
  };
  std::vector<Record> records;
};

// Encoder: embeddings + positional, L causal attention layers, per-layer
// K/V cache of all context positions. Contexts shorter than the longest in
// the batch are left-padded and masked out of attention.
ReasoningGrid encode_batch(const PLRParams& params, const PLRConfig& cfg,
                           const std::vector<std::vector<i64>>& contexts,
                           bool training, RngStream& rng);

void init_streams(ReasoningGrid& grid, const PLRParams& params,
                  const PLRConfig& cfg);

// One reasoning step for every stream; t is 1-based and must be executed in
// order. Keys/values are the shared context cache plus the stream's own
// earlier reasoning states; the RPE enters the query path only.
void reasoning_step(ReasoningGrid& grid, const PLRParams& params,
                    const PLRConfig& cfg, i64 t, RngStream& rng, bool training,
                    AttnCapture* capture = nullptr);

Tensor pool_streams(ReasoningGrid& grid, const PLRConfig& cfg);  // [B,M,d]
Tensor pool_stream(ReasoningGrid& grid, const PLRConfig& cfg, i64 m);

void gate_streams(ReasoningGrid& grid, const PLRParams& params,
                  const PLRConfig& cfg);

Tensor final_representation(const Tensor& h0, const Tensor& z_rea, Phase phase);

Tensor score_items(const Tensor& z, const PLRParams& params);

// Full forward: encode, T reasoning steps, pooling and gating.
ReasoningGrid forward_pass(const PLRParams& params, const PLRConfig& cfg,
                           const std::vector<std::vector<i64>>& contexts,
                           bool training, RngStream& rng,
                           AttnCapture* capture = nullptr);

// instrumentation counters used by tests and the training loop
namespace stats {
void reset();
i64 forward_passes();
i64 train_reps_with_h0();  // must stay 0: the training path never adds h0
void count_forward();
// brackets a training step so an h0-added representation inside it is counted
void set_in_training(bool active);
}  // namespace stats

// Checkpoint: "PLR1" magic, length-prefixed JSON header (config + ordered
// tensor manifest), then raw little-endian float32 payloads. Round-trips
// bit-exactly.
void save_checkpoint(const PLRParams& params, const PLRConfig& cfg,
                     const std::string& path);
std::pair<PLRParams, PLRConfig> load_checkpoint(const std::string& path);

}  // namespace plr
