#include "plr/model.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace plr {

namespace {
constexpr float kMaskValue = -1e9f;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}
}  // namespace

void PLRConfig::validate() const {
  require(d > 0 && H > 0 && d % H == 0,
          "config: d must be positive and divisible by H");
  require(L >= 1, "config: L must be >= 1");
  require(T >= 1, "config: T must be >= 1");
  require(M >= 1, "config: M must be >= 1");
  require(max_len >= 1, "config: max_len must be >= 1");
  require(vocab_size >= 1, "config: vocab_size must be >= 1");
  require(dropout_rep >= 0.0f && dropout_rep < 1.0f,
          "config: dropout_rep must be in [0,1)");
  require(dropout_attn >= 0.0f && dropout_attn < 1.0f,
          "config: dropout_attn must be in [0,1)");
}

// ---- parameters --------------------------------------------------------------

namespace {
Tensor trunc_normal(Shape shape, RngStream& rng, float std_dev) {
  Tensor t = Tensor::zeros(std::move(shape));
  float* p = t.data();
  const i64 n = t.numel();
  for (i64 i = 0; i < n; ++i)
    p[i] = static_cast<float>(rng.next_trunc_normal(std_dev));
  return t;
}
}  // namespace

PLRParams PLRParams::init(const PLRConfig& cfg, RngStream rng) {
  cfg.validate();
  constexpr float kStd = 0.02f;
  PLRParams p;
  p.item_emb = trunc_normal({cfg.vocab_size, cfg.d}, rng, kStd);
  p.pos_emb = trunc_normal({cfg.max_len, cfg.d}, rng, kStd);
  for (i64 l = 0; l < cfg.L; ++l) {
    LayerParams lp;
    lp.wq = trunc_normal({cfg.d, cfg.d}, rng, kStd);
    lp.wk = trunc_normal({cfg.d, cfg.d}, rng, kStd);
    lp.wv = trunc_normal({cfg.d, cfg.d}, rng, kStd);
    lp.wo = trunc_normal({cfg.d, cfg.d}, rng, kStd);
    lp.w1 = trunc_normal({cfg.d, cfg.ffn_dim()}, rng, kStd);
    lp.b1 = Tensor::zeros({cfg.ffn_dim()});
    lp.w2 = trunc_normal({cfg.ffn_dim(), cfg.d}, rng, kStd);
    lp.b2 = Tensor::zeros({cfg.d});
    p.layers.push_back(std::move(lp));
  }
  p.rpe = trunc_normal({cfg.T, cfg.d}, rng, kStd);
  p.triggers = trunc_normal({cfg.M, cfg.d}, rng, kStd);
  p.gate_w = trunc_normal({cfg.M, cfg.d}, rng, kStd);
  p.gate_b = Tensor::zeros({cfg.M});
  for (auto& [name, t] : p.named_tensors()) {
    (void)name;
    t->set_requires_grad();
  }
  return p;
}

std::vector<std::pair<std::string, Tensor*>> PLRParams::named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("item_embeddings", &item_emb);
  out.emplace_back("positional", &pos_emb);
  for (size_t l = 0; l < layers.size(); ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    out.emplace_back(pre + "wq", &layers[l].wq);
    out.emplace_back(pre + "wk", &layers[l].wk);
    out.emplace_back(pre + "wv", &layers[l].wv);
    out.emplace_back(pre + "wo", &layers[l].wo);
    out.emplace_back(pre + "ffn_w1", &layers[l].w1);
    out.emplace_back(pre + "ffn_b1", &layers[l].b1);
    out.emplace_back(pre + "ffn_w2", &layers[l].w2);
    out.emplace_back(pre + "ffn_b2", &layers[l].b2);
  }
  out.emplace_back("rpe", &rpe);
  out.emplace_back("triggers", &triggers);
  out.emplace_back("gate_w", &gate_w);
  out.emplace_back("gate_b", &gate_b);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> PLRParams::named_tensors()
    const {
  auto mut = const_cast<PLRParams*>(this)->named_tensors();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mut.size());
  for (auto& [n, t] : mut) out.emplace_back(n, t);
  return out;
}

PLRParams PLRParams::clone() const {
  PLRParams c;
  auto copy = [](const Tensor& t) {
    Tensor r = Tensor::from_data(t.shape(), t.to_vector());
    r.set_requires_grad();
    return r;
  };
  c.item_emb = copy(item_emb);
  c.pos_emb = copy(pos_emb);
  for (const auto& l : layers) {
    LayerParams lp;
    lp.wq = copy(l.wq);
    lp.wk = copy(l.wk);
    lp.wv = copy(l.wv);
    lp.wo = copy(l.wo);
    lp.w1 = copy(l.w1);
    lp.b1 = copy(l.b1);
    lp.w2 = copy(l.w2);
    lp.b2 = copy(l.b2);
    c.layers.push_back(std::move(lp));
  }
  c.rpe = copy(rpe);
  c.triggers = copy(triggers);
  c.gate_w = copy(gate_w);
  c.gate_b = copy(gate_b);
  return c;
}

void PLRParams::zero_grad() {
  for (auto& [name, t] : named_tensors()) {
    (void)name;
    t->zero_grad();
  }
}

// ---- instrumentation ----------------------------------------------------------

namespace stats {
namespace {
std::atomic<i64> g_forward_passes{0};
std::atomic<i64> g_train_h0{0};
std::atomic<bool> g_in_training{false};
}  // namespace
void reset() {
  g_forward_passes = 0;
  g_train_h0 = 0;
  g_in_training = false;
}
i64 forward_passes() { return g_forward_passes.load(); }
i64 train_reps_with_h0() { return g_train_h0.load(); }
void count_forward() { ++g_forward_passes; }
void set_in_training(bool active) { g_in_training = active; }
void count_h0_added() {
  if (g_in_training.load()) ++g_train_h0;
}
}  // namespace stats

// ---- encoder -------------------------------------------------------------------

namespace {

// pre-norm when the config enables layer normalization, identity otherwise
Tensor pre_norm(const Tensor& x, const PLRConfig& cfg) {
  return cfg.use_layernorm_ffn ? layer_norm(x) : x;
}

Tensor ffn_sublayer(const Tensor& x2d, const LayerParams& lp) {
  Tensor f = add(matmul(x2d, lp.w1), lp.b1);
  f = gelu(f);
  return add(matmul(f, lp.w2), lp.b2);
}

// [rows,d] -> [B,H,n,dh] -> [B*H,n,dh] ready for grouped attention
Tensor to_heads(const Tensor& x2d, i64 b, i64 n, i64 h, i64 dh) {
  return permute0213(x2d.reshape({b, n, h, dh})).reshape({b * h, n, dh});
}

}  // namespace

ReasoningGrid encode_batch(const PLRParams& params, const PLRConfig& cfg,
                           const std::vector<std::vector<i64>>& contexts,
                           bool training, RngStream& rng) {
  cfg.validate();
  require(!contexts.empty(), "encode: empty batch");
  i64 n = 0;
  for (const auto& c : contexts) {
    require(!c.empty(), "encode: empty context");
    require(static_cast<i64>(c.size()) <= cfg.max_len,
            "encode: context longer than max_len");
    for (i64 v : c)
      require(v >= 0 && v < cfg.vocab_size,
              "encode: item index " + std::to_string(v) +
                  " outside vocabulary of size " +
                  std::to_string(cfg.vocab_size));
    n = std::max<i64>(n, static_cast<i64>(c.size()));
  }
  const i64 b = static_cast<i64>(contexts.size());
  const i64 d = cfg.d, h = cfg.H, dh = cfg.head_dim();

  // Left-pad to the longest context; a length-k context occupies the last k
  // slots and uses the last k positional rows, so batch composition does not
  // change any sequence's representation.
  std::vector<i64> item_idx(static_cast<size_t>(b * n), 0);
  std::vector<i64> pos_idx(static_cast<size_t>(b * n), 0);
  Tensor pad_mask = Tensor::zeros({b, n});
  for (i64 i = 0; i < b; ++i) {
    const i64 len = static_cast<i64>(contexts[i].size());
    const i64 off = n - len;
    for (i64 j = 0; j < off; ++j) pad_mask.data()[i * n + j] = kMaskValue;
    for (i64 j = 0; j < len; ++j) {
      item_idx[static_cast<size_t>(i * n + off + j)] = contexts[i][j];
      pos_idx[static_cast<size_t>(i * n + off + j)] = cfg.max_len - len + j;
    }
  }

  Tensor x = add(embedding(params.item_emb, item_idx),
                 embedding(params.pos_emb, pos_idx));
  x = dropout(x, cfg.dropout_rep, rng, training);

  // causal mask shared by the whole batch
  Tensor causal = Tensor::zeros({n, n});
  for (i64 i = 0; i < n; ++i)
    for (i64 j = i + 1; j < n; ++j) causal.data()[i * n + j] = kMaskValue;

  ReasoningGrid grid;
  grid.batch = b;
  grid.n = n;
  grid.pad_mask = pad_mask;

  Tensor x3 = x.reshape({b, n, d});
  const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
  for (i64 l = 0; l < cfg.L; ++l) {
    const LayerParams& lp = params.layers[static_cast<size_t>(l)];
    Tensor src = pre_norm(x3, cfg).reshape({b * n, d});
    Tensor q = to_heads(matmul(src, lp.wq), b, n, h, dh);
    Tensor k = to_heads(matmul(src, lp.wk), b, n, h, dh);
    Tensor v = to_heads(matmul(src, lp.wv), b, n, h, dh);

    Tensor scores = scale(bmm_nt(q, k), inv_sqrt_dh).reshape({b, h, n, n});
    scores = add(scores, causal);
    scores = add_attn_mask(scores, pad_mask);
    Tensor probs = softmax(scores);
    probs = dropout(probs, cfg.dropout_attn, rng, training);
    Tensor ctx = bmm(probs.reshape({b * h, n, n}), v);
    Tensor merged =
        permute0213(ctx.reshape({b, h, n, dh})).reshape({b * n, d});
    Tensor o = dropout(matmul(merged, lp.wo), cfg.dropout_rep, rng, training);
    x3 = add(x3, o.reshape({b, n, d}));

    if (cfg.use_layernorm_ffn) {
      Tensor f = ffn_sublayer(layer_norm(x3).reshape({b * n, d}), lp);
      f = dropout(f, cfg.dropout_rep, rng, training);
      x3 = add(x3, f.reshape({b, n, d}));
    }

    LayerKV kv;
    kv.ctx_k = k.reshape({b, h, n, dh});
    kv.ctx_v = v.reshape({b, h, n, dh});
    grid.kv.push_back(std::move(kv));
  }

  grid.h_enc = cfg.use_layernorm_ffn ? layer_norm(x3) : x3;
  grid.h0 = take_axis1(grid.h_enc, n - 1);
  stats::count_forward();
  return grid;
}

// ---- reasoning -----------------------------------------------------------------

void init_streams(ReasoningGrid& grid, const PLRParams& params,
                  const PLRConfig& cfg) {
  require(grid.h0.defined(), "init_streams: encode the context first");
  require(params.triggers.dim(0) == cfg.M,
          "init_streams: trigger count does not match M");
  const i64 b = grid.batch, d = cfg.d, m = cfg.M;
  // h0 row per (user, stream) plus the stream's trigger token
  Tensor base = repeat_rows(grid.h0, m);  // [B*M, d]
  Tensor with_trigger =
      add(base.reshape({b, m * d}), params.triggers.reshape({m * d}));
  grid.states.clear();
  grid.states.push_back(with_trigger.reshape({b * m, d}));
  grid.steps_done = 0;

  // expand the shared context cache across streams once per forward
  for (auto& kv : grid.kv) {
    kv.ctx_k_exp = repeat_rows(kv.ctx_k, m);
    kv.ctx_v_exp = repeat_rows(kv.ctx_v, m);
    kv.rea_k = Tensor();
    kv.rea_v = Tensor();
  }
}

void reasoning_step(ReasoningGrid& grid, const PLRParams& params,
                    const PLRConfig& cfg, i64 t, RngStream& rng, bool training,
                    AttnCapture* capture) {
  require(!grid.states.empty(), "reasoning_step: streams not initialized");
  require(t >= 1 && t <= cfg.T, "reasoning_step: step index out of range");
  require(t == grid.steps_done + 1,
          "reasoning_step: steps must run in order, expected " +
              std::to_string(grid.steps_done + 1) + " got " +
              std::to_string(t));
  const i64 b = grid.batch, m = cfg.M, d = cfg.d, h = cfg.H,
            dh = cfg.head_dim(), n = grid.n;
  const i64 bm = b * m;
  const i64 s_len = n + (t - 1);
  const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));

  Tensor rt = slice_rows(params.rpe, t - 1, 1).reshape({d});

  // additive mask over [context ; own reasoning states]
  Tensor step_mask = Tensor::zeros({bm, s_len});
  for (i64 i = 0; i < b; ++i)
    for (i64 s = 0; s < m; ++s)
      std::memcpy(step_mask.data() + (i * m + s) * s_len,
                  grid.pad_mask.data() + i * n,
                  sizeof(float) * static_cast<size_t>(n));

  Tensor y = grid.states[static_cast<size_t>(t - 1)];
  for (i64 l = 0; l < cfg.L; ++l) {
    const LayerKV& kv = grid.kv[static_cast<size_t>(l)];
    const LayerParams& lp = params.layers[static_cast<size_t>(l)];
    // RPE joins the query path at every layer and never the residual stream
    Tensor q_src = pre_norm(add(y, rt), cfg);
    Tensor q = matmul(q_src, lp.wq).reshape({bm * h, 1, dh});
    Tensor k_full = kv.ctx_k_exp.reshape({bm * h, n, dh});
    Tensor v_full = kv.ctx_v_exp.reshape({bm * h, n, dh});
    if (t > 1) {
      k_full = concat_axis1(k_full, kv.rea_k.reshape({bm * h, t - 1, dh}));
      v_full = concat_axis1(v_full, kv.rea_v.reshape({bm * h, t - 1, dh}));
    }
    Tensor scores =
        scale(bmm_nt(q, k_full), inv_sqrt_dh).reshape({bm, h, 1, s_len});
    scores = add_attn_mask(scores, step_mask);
    Tensor probs = softmax(scores);
    if (capture) {
      AttnCapture::Record rec;
      rec.step = t;
      rec.layer = l;
      rec.heads = h;
      rec.keys = s_len;
      rec.probs = probs.to_vector();
      capture->records.push_back(std::move(rec));
    }
    probs = dropout(probs, cfg.dropout_attn, rng, training);
    Tensor ctx = bmm(probs.reshape({bm * h, 1, s_len}), v_full);
    Tensor o = dropout(matmul(ctx.reshape({bm, d}), lp.wo), cfg.dropout_rep,
                       rng, training);
    y = add(y, o);
    if (cfg.use_layernorm_ffn) {
      Tensor f = ffn_sublayer(layer_norm(y), lp);
      f = dropout(f, cfg.dropout_rep, rng, training);
      y = add(y, f);
    }
  }
  Tensor h_t = cfg.use_layernorm_ffn ? layer_norm(y) : y;
  grid.states.push_back(h_t);
  grid.steps_done = t;

  // Cache this state's keys/values for later steps of the same stream. The
  // cached entries are projections of the post-stack state; the RPE never
  // enters them.
  if (t < cfg.T) {
    Tensor src = pre_norm(h_t, cfg);
    for (i64 l = 0; l < cfg.L; ++l) {
      LayerKV& kv = grid.kv[static_cast<size_t>(l)];
      const LayerParams& lp = params.layers[static_cast<size_t>(l)];
      Tensor k_new = permute0213(matmul(src, lp.wk).reshape({bm, 1, h, dh}));
      Tensor v_new = permute0213(matmul(src, lp.wv).reshape({bm, 1, h, dh}));
      if (kv.rea_k.defined()) {
        kv.rea_k = concat_axis1(kv.rea_k.reshape({bm * h, t - 1, dh}),
                                k_new.reshape({bm * h, 1, dh}))
                       .reshape({bm, h, t, dh});
        kv.rea_v = concat_axis1(kv.rea_v.reshape({bm * h, t - 1, dh}),
                                v_new.reshape({bm * h, 1, dh}))
                       .reshape({bm, h, t, dh});
      } else {
        kv.rea_k = k_new;  // [bm, h, 1, dh]
        kv.rea_v = v_new;
      }
    }
  }
}

Tensor pool_streams(ReasoningGrid& grid, const PLRConfig& cfg) {
  require(grid.steps_done == cfg.T,
          "pool_streams: reasoning incomplete, ran " +
              std::to_string(grid.steps_done) + " of " + std::to_string(cfg.T) +
              " steps");
  const i64 bm = grid.batch * cfg.M, d = cfg.d;
  Tensor stacked = grid.states[1].reshape({bm, 1, d});
  for (i64 t = 2; t <= cfg.T; ++t) {
    stacked = concat_axis1(stacked,
                           grid.states[static_cast<size_t>(t)].reshape(
                               {bm, 1, d}));
  }
  grid.stream_z = mean_axis1(stacked).reshape({grid.batch, cfg.M, d});
  return grid.stream_z;
}

Tensor pool_stream(ReasoningGrid& grid, const PLRConfig& cfg, i64 m) {
  require(m >= 0 && m < cfg.M, "pool_stream: stream index out of range");
  Tensor z = grid.stream_z.defined() ? grid.stream_z : pool_streams(grid, cfg);
  return take_rows_strided(z.reshape({grid.batch * cfg.M, cfg.d}), m, cfg.M);
}

void gate_streams(ReasoningGrid& grid, const PLRParams& params,
                  const PLRConfig& cfg) {
  if (!grid.stream_z.defined()) pool_streams(grid, cfg);
  const i64 b = grid.batch;
  if (cfg.mors_enabled) {
    Tensor logits = add(matmul_nt(grid.h0, params.gate_w), params.gate_b);
    grid.gate = softmax(logits);
  } else {
    grid.gate = Tensor::full({b, cfg.M}, 1.0f / static_cast<float>(cfg.M));
  }
  grid.z_rea = weighted_sum_axis1(grid.stream_z, grid.gate);
}

Tensor final_representation(const Tensor& h0, const Tensor& z_rea,
                            Phase phase) {
  if (phase == Phase::kTrain) return z_rea;
  stats::count_h0_added();
  return add(h0, z_rea);
}

Tensor score_items(const Tensor& z, const PLRParams& params) {
  return matmul_nt(z, params.item_emb);
}

ReasoningGrid forward_pass(const PLRParams& params, const PLRConfig& cfg,
                           const std::vector<std::vector<i64>>& contexts,
                           bool training, RngStream& rng,
                           AttnCapture* capture) {
  ReasoningGrid grid = encode_batch(params, cfg, contexts, training, rng);
  init_streams(grid, params, cfg);
  for (i64 t = 1; t <= cfg.T; ++t)
    reasoning_step(grid, params, cfg, t, rng, training, capture);
  pool_streams(grid, cfg);
  gate_streams(grid, params, cfg);
  return grid;
}

// ---- checkpoint ----------------------------------------------------------------

namespace {
constexpr char kMagic[4] = {'P', 'L', 'R', '1'};
constexpr int kCheckpointVersion = 1;

nlohmann::json config_to_json(const PLRConfig& c) {
  return nlohmann::json{{"d", c.d},
                        {"H", c.H},
                        {"L", c.L},
                        {"T", c.T},
                        {"M", c.M},
                        {"max_len", c.max_len},
                        {"vocab_size", c.vocab_size},
                        {"dropout_rep", c.dropout_rep},
                        {"dropout_attn", c.dropout_attn},
                        {"mors_enabled", c.mors_enabled},
                        {"rcl_enabled", c.rcl_enabled},
                        {"kl_enabled", c.kl_enabled},
                        {"use_layernorm_ffn", c.use_layernorm_ffn}};
}

PLRConfig config_from_json(const nlohmann::json& j) {
  PLRConfig c;
  c.d = j.at("d");
  c.H = j.at("H");
  c.L = j.at("L");
  c.T = j.at("T");
  c.M = j.at("M");
  c.max_len = j.at("max_len");
  c.vocab_size = j.at("vocab_size");
  c.dropout_rep = j.at("dropout_rep");
  c.dropout_attn = j.at("dropout_attn");
  c.mors_enabled = j.at("mors_enabled");
  c.rcl_enabled = j.at("rcl_enabled");
  c.kl_enabled = j.at("kl_enabled");
  c.use_layernorm_ffn = j.at("use_layernorm_ffn");
  return c;
}
}  // namespace

void save_checkpoint(const PLRParams& params, const PLRConfig& cfg,
                     const std::string& path) {
  nlohmann::json manifest = nlohmann::json::array();
  i64 offset = 0;
  for (const auto& [name, t] : params.named_tensors()) {
    nlohmann::json entry;
    entry["name"] = name;
    entry["shape"] = t->shape();
    entry["offset"] = offset;
    manifest.push_back(entry);
    offset += t->numel() * static_cast<i64>(sizeof(float));
  }
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["config"] = config_to_json(cfg);
  header["tensors"] = manifest;
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path);
  out.write(kMagic, 4);
  const std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
  out.write(reinterpret_cast<const char*>(&hlen), 4);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : params.named_tensors()) {
    (void)name;
    out.write(reinterpret_cast<const char*>(t->data()),
              static_cast<std::streamsize>(t->numel() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

std::pair<PLRParams, PLRConfig> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic bytes in " + path);
  std::uint32_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 4);
  if (!in) throw std::runtime_error("checkpoint: truncated header in " + path);
  std::string hs(hlen, '\0');
  in.read(hs.data(), hlen);
  if (!in) throw std::runtime_error("checkpoint: truncated header in " + path);
  nlohmann::json header = nlohmann::json::parse(hs);
  if (header.at("version").get<int>() != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " +
                             header.at("version").dump());
  PLRConfig cfg = config_from_json(header.at("config"));
  cfg.validate();

  PLRParams params = PLRParams::init(cfg, RngStream(0));
  auto named = params.named_tensors();
  const auto& manifest = header.at("tensors");
  if (manifest.size() != named.size())
    throw std::runtime_error("checkpoint: tensor manifest size mismatch");
  for (size_t i = 0; i < named.size(); ++i) {
    const auto& entry = manifest[i];
    auto& [name, t] = named[i];
    if (entry.at("name").get<std::string>() != name)
      throw std::runtime_error("checkpoint: unexpected tensor '" +
                               entry.at("name").get<std::string>() +
                               "', wanted '" + name + "'");
    const auto shape = entry.at("shape").get<Shape>();
    if (shape != t->shape())
      throw std::runtime_error(
          "checkpoint: shape mismatch for tensor '" + name + "': file has " +
          shape_str(shape) + ", config implies " + shape_str(t->shape()));
    in.read(reinterpret_cast<char*>(t->data()),
            static_cast<std::streamsize>(t->numel() * sizeof(float)));
    if (!in)
      throw std::runtime_error("checkpoint: truncated payload at tensor '" +
                               name + "'");
  }
  return {std::move(params), cfg};
}

}  // namespace plr
