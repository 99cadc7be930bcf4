#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "plr/model.hpp"
#include "plr/reference.hpp"

using namespace plr;

namespace {

PLRConfig small_config() {
  PLRConfig cfg;
  cfg.d = 16;
  cfg.H = 2;
  cfg.L = 2;
  cfg.T = 2;
  cfg.M = 2;
  cfg.max_len = 10;
  cfg.vocab_size = 23;
  cfg.dropout_rep = 0.0f;
  cfg.dropout_attn = 0.0f;
  return cfg;
}

void zero_params(PLRParams& p) {
  for (auto& [name, t] : p.named_tensors()) {
    (void)name;
    std::fill(t->data(), t->data() + t->numel(), 0.0f);
  }
}

std::vector<i64> random_context(RngStream& rng, i64 len, i64 vocab) {
  std::vector<i64> ctx(static_cast<size_t>(len));
  for (auto& v : ctx)
    v = static_cast<i64>(rng.next_below(static_cast<std::uint64_t>(vocab)));
  return ctx;
}

double max_abs_diff(const float* a, const std::vector<float>& b) {
  double mx = 0.0;
  for (size_t i = 0; i < b.size(); ++i)
    mx = std::max(mx, std::abs(static_cast<double>(a[i]) - b[i]));
  return mx;
}

template <typename S>
double max_abs_diff_vec(const float* a, const std::vector<S>& b) {
  double mx = 0.0;
  for (size_t i = 0; i < b.size(); ++i)
    mx = std::max(mx,
                  std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return mx;
}

}  // namespace

TEST_CASE("single zero token through zero parameters gives zero h0") {
  for (bool ln : {true, false}) {
    PLRConfig cfg = small_config();
    cfg.use_layernorm_ffn = ln;
    PLRParams params = PLRParams::init(cfg, RngStream(1));
    zero_params(params);
    RngStream rng(2);
    ReasoningGrid grid = encode_batch(params, cfg, {{0}}, false, rng);
    for (i64 j = 0; j < cfg.d; ++j) CHECK(grid.h0.at(j) == 0.0f);
  }
}

TEST_CASE("encode validates inputs") {
  PLRConfig cfg = small_config();
  PLRParams params = PLRParams::init(cfg, RngStream(1));
  RngStream rng(2);
  CHECK_THROWS_AS(encode_batch(params, cfg, {{}}, false, rng),
                  std::invalid_argument);
  CHECK_THROWS_AS(encode_batch(params, cfg, {{cfg.vocab_size}}, false, rng),
                  std::invalid_argument);
}

TEST_CASE("causal mask: future items never change earlier rows") {
  PLRConfig cfg = small_config();
  PLRParams params = PLRParams::init(cfg, RngStream(3));
  RngStream rng(4);
  std::vector<i64> ctx = random_context(rng, 8, cfg.vocab_size);
  RngStream r1(9), r2(9);
  ReasoningGrid g1 = encode_batch(params, cfg, {ctx}, false, r1);
  std::vector<i64> ctx2 = ctx;
  ctx2[5] = (ctx2[5] + 1) % cfg.vocab_size;
  ReasoningGrid g2 = encode_batch(params, cfg, {ctx2}, false, r2);
  for (i64 i = 0; i < 5; ++i)
    for (i64 j = 0; j < cfg.d; ++j)
      CHECK(g1.h_enc.at(i * cfg.d + j) == g2.h_enc.at(i * cfg.d + j));
}

TEST_CASE("encoder matches the serial unbatched reference") {
  PLRConfig cfg = small_config();
  PLRParams params = PLRParams::init(cfg, RngStream(5));
  const auto w = ref::to_weights<float>(params, cfg);
  RngStream rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    const i64 len = 1 + static_cast<i64>(rng.next_below(8));
    std::vector<i64> ctx = random_context(rng, len, cfg.vocab_size);
    RngStream fr(7);
    ReasoningGrid grid = encode_batch(params, cfg, {ctx}, false, fr);
    ref::Forward<float> f;
    f.w = &w;
    f.encode(ctx);
    CHECK(max_abs_diff(grid.h_enc.data(), f.h_enc) < 1e-5);
    CHECK(max_abs_diff(grid.h0.data(), f.h0) < 1e-5);
  }
}

TEST_CASE("left padding does not change a sequence's representation") {
  PLRConfig cfg = small_config();
  PLRParams params = PLRParams::init(cfg, RngStream(8));
  RngStream rng(9);
  std::vector<i64> long_ctx = random_context(rng, 9, cfg.vocab_size);
  std::vector<i64> short_ctx = random_context(rng, 3, cfg.vocab_size);

  RngStream r1(1), r2(1);
  ReasoningGrid batched =
      encode_batch(params, cfg, {long_ctx, short_ctx}, false, r1);
  ReasoningGrid alone = encode_batch(params, cfg, {short_ctx}, false, r2);
  const i64 d = cfg.d;
  // second row block, last 3 positions are the real ones
  for (i64 i = 0; i < 3; ++i)
    for (i64 j = 0; j < d; ++j) {
      const float padded = batched.h_enc.at((1 * 9 + 6 + i) * d + j);
      const float plain = alone.h_enc.at(i * d + j);
      CHECK(std::abs(padded - plain) < 1e-5);
    }
  for (i64 j = 0; j < d; ++j)
    CHECK(std::abs(batched.h0.at(1 * d + j) - alone.h0.at(j)) < 1e-5);
}

TEST_CASE("init_streams adds trigger tokens") {
  PLRConfig cfg = small_config();
  PLRParams params = PLRParams::init(cfg, RngStream(10));
  RngStream rng(11);
  std::vector<i64> ctx = random_context(rng, 5, cfg.vocab_size);
  ReasoningGrid grid = encode_batch(params, cfg, {ctx}, false, rng);

  SUBCASE("zero triggers leave every stream at h0") {
    std::fill(params.triggers.data(),
              params.triggers.data() + params.triggers.numel(), 0.0f);
    init_streams(grid, params, cfg);
    for (i64 m = 0; m < cfg.M; ++m)
      for (i64 j = 0; j < cfg.d; ++j)
        CHECK(grid.states[0].at(m * cfg.d + j) == grid.h0.at(j));
  }
  SUBCASE("initial diversity equals mean pairwise trigger distance") {
    init_streams(grid, params, cfg);
    // oracle: h0 cancels in every pairwise difference
    double expect = 0.0;
    for (i64 a = 0; a < cfg.M; ++a)
      for (i64 b = 0; b < cfg.M; ++b) {
        if (a == b) continue;
        double nsq = 0.0;
        for (i64 j = 0; j < cfg.d; ++j) {
          const double diff = params.triggers.at(a * cfg.d + j) -
                              params.triggers.at(b * cfg.d + j);
          nsq += diff * diff;
        }
        expect += nsq;
      }
    expect /= static_cast<double>(cfg.M * (cfg.M - 1));
    double got = 0.0;
    for (i64 a = 0; a < cfg.M; ++a)
      for (i64 b = 0; b < cfg.M; ++b) {
        if (a == b) continue;
        double nsq = 0.0;
        for (i64 j = 0; j < cfg.d; ++j) {
          const double diff =
              grid.states[0].at(a * cfg.d + j) - grid.states[0].at(b * cfg.d + j);
          nsq += diff * diff;
        }
        got += nsq;
      }
    got /= static_cast<double>(cfg.M * (cfg.M - 1));
    CHECK(got == doctest::Approx(expect).epsilon(1e-4));
  }
}

TEST_CASE("reasoning steps must run in order") {
  PLRConfig cfg = small_config();
  PLRParams params = PLRParams::init(cfg, RngStream(12));
  RngStream rng(13);
  ReasoningGrid grid =
      encode_batch(params, cfg, {random_context(rng, 4, cfg.vocab_size)},
                   false, rng);
  init_streams(grid, params, cfg);
  CHECK_THROWS_AS(reasoning_step(grid, params, cfg, 2, rng, false),
                  std::invalid_argument);
  reasoning_step(grid, params, cfg, 1, rng, false);
  CHECK_THROWS_AS(reasoning_step(grid, params, cfg, 1, rng, false),
                  std::invalid_argument);
}

TEST_CASE("identical triggers make all streams identical") {
  PLRConfig cfg = small_config();
  cfg.M = 3;
  PLRParams params = PLRParams::init(cfg, RngStream(14));
  // copy stream 0's trigger into every stream
  for (i64 m = 1; m < cfg.M; ++m)
    for (i64 j = 0; j < cfg.d; ++j)
      params.triggers.data()[m * cfg.d + j] = params.triggers.at(j);
  RngStream rng(15);
  ReasoningGrid grid = forward_pass(
      params, cfg, {random_context(rng, 6, cfg.vocab_size)}, false, rng);
  for (i64 t = 1; t <= cfg.T; ++t)
    for (i64 m = 1; m < cfg.M; ++m)
      for (i64 j = 0; j < cfg.d; ++j)
        CHECK(grid.states[static_cast<size_t>(t)].at(m * cfg.d + j) ==
              grid.states[static_cast<size_t>(t)].at(j));
}

TEST_CASE("cached multi-stream forward equals the uncached reference") {
  RngStream meta(16);
  for (int trial = 0; trial < 6; ++trial) {
    PLRConfig cfg = small_config();
    cfg.T = 1 + static_cast<i64>(meta.next_below(3));
    cfg.M = 1 + static_cast<i64>(meta.next_below(3));
    cfg.use_layernorm_ffn = (trial % 2 == 0);
    PLRParams params = PLRParams::init(cfg, RngStream(17 + trial));
    const auto w = ref::to_weights<float>(params, cfg);
    RngStream rng(18);
    std::vector<i64> ctx =
        random_context(rng, 3 + static_cast<i64>(meta.next_below(5)),
                       cfg.vocab_size);
    ReasoningGrid grid = forward_pass(params, cfg, {ctx}, false, rng);

    ref::Forward<float> f;
    f.w = &w;
    f.encode(ctx);
    auto states = f.reason();
    for (i64 t = 1; t <= cfg.T; ++t)
      for (i64 m = 0; m < cfg.M; ++m) {
        const auto& want =
            states[static_cast<size_t>(m)][static_cast<size_t>(t - 1)];
        double mx = 0.0;
        for (i64 j = 0; j < cfg.d; ++j)
          mx = std::max<double>(
              mx, std::abs(grid.states[static_cast<size_t>(t)].at(m * cfg.d + j) -
                           want[static_cast<size_t>(j)]));
        INFO("trial " << trial << " t " << t << " m " << m);
        CHECK(mx < 1e-5);
      }
    std::vector<std::vector<float>> zs;
    std::vector<float> gate, z_rea;
    f.aggregate(states, zs, gate, z_rea);
    CHECK(max_abs_diff(grid.z_rea.data(), z_rea) < 1e-5);
  }
}

TEST_CASE("perturbing one trigger never touches other streams") {
  PLRConfig cfg = small_config();
  cfg.M = 3;
  PLRParams params = PLRParams::init(cfg, RngStream(20));
  RngStream rng(21);
  std::vector<i64> ctx = random_context(rng, 6, cfg.vocab_size);
  RngStream r1(22), r2(22);
  ReasoningGrid base = forward_pass(params, cfg, {ctx}, false, r1);
  params.triggers.data()[1 * cfg.d + 3] += 0.5f;  // perturb stream 1 only
  ReasoningGrid pert = forward_pass(params, cfg, {ctx}, false, r2);
  for (i64 t = 1; t <= cfg.T; ++t)
    for (i64 m = 0; m < cfg.M; ++m) {
      if (m == 1) continue;
      for (i64 j = 0; j < cfg.d; ++j)
        CHECK(base.states[static_cast<size_t>(t)].at(m * cfg.d + j) ==
              pert.states[static_cast<size_t>(t)].at(m * cfg.d + j));
    }
}

TEST_CASE("pool_stream arithmetic") {
  PLRConfig cfg = small_config();
  cfg.T = 2;
  cfg.M = 1;
  ReasoningGrid grid;
  grid.batch = 1;
  grid.steps_done = 2;
  grid.states.push_back(Tensor::zeros({1, cfg.d}));
  Tensor s1 = Tensor::zeros({1, cfg.d});
  Tensor s2 = Tensor::zeros({1, cfg.d});
  s1.data()[0] = 1.0f;  // h1 = e0
  s2.data()[1] = 1.0f;  // h2 = e1
  grid.states.push_back(s1);
  grid.states.push_back(s2);
  Tensor z = pool_streams(grid, cfg);
  CHECK(z.at(0) == doctest::Approx(0.5));
  CHECK(z.at(1) == doctest::Approx(0.5));
  for (i64 j = 2; j < cfg.d; ++j) CHECK(z.at(j) == 0.0f);

  SUBCASE("incomplete grid errors") {
    ReasoningGrid bad;
    bad.batch = 1;
    bad.steps_done = 1;
    bad.states.push_back(Tensor::zeros({1, cfg.d}));
    bad.states.push_back(Tensor::zeros({1, cfg.d}));
    CHECK_THROWS_AS(pool_streams(bad, cfg), std::invalid_argument);
  }
}

TEST_CASE("gate_streams worked examples") {
  PLRConfig cfg = small_config();
  PLRParams params = PLRParams::init(cfg, RngStream(23));
  RngStream rng(24);
  std::vector<i64> ctx = random_context(rng, 5, cfg.vocab_size);

  SUBCASE("zero gate parameters give the uniform gate") {
    std::fill(params.gate_w.data(),
              params.gate_w.data() + params.gate_w.numel(), 0.0f);
    std::fill(params.gate_b.data(),
              params.gate_b.data() + params.gate_b.numel(), 0.0f);
    ReasoningGrid grid = forward_pass(params, cfg, {ctx}, false, rng);
    for (i64 m = 0; m < cfg.M; ++m)
      CHECK(grid.gate.at(m) == doctest::Approx(0.5));
  }
  SUBCASE("bias ln3 vs 0 gives 0.75 / 0.25") {
    std::fill(params.gate_w.data(),
              params.gate_w.data() + params.gate_w.numel(), 0.0f);
    params.gate_b.data()[0] = std::log(3.0f);
    params.gate_b.data()[1] = 0.0f;
    ReasoningGrid grid = forward_pass(params, cfg, {ctx}, false, rng);
    CHECK(grid.gate.at(0) == doctest::Approx(0.75));
    CHECK(grid.gate.at(1) == doctest::Approx(0.25));
  }
  SUBCASE("M=1 gate is [1] regardless of weights") {
    PLRConfig one = cfg;
    one.M = 1;
    PLRParams p1 = PLRParams::init(one, RngStream(25));
    ReasoningGrid grid = forward_pass(p1, one, {ctx}, false, rng);
    CHECK(grid.gate.at(0) == doctest::Approx(1.0));
  }
  SUBCASE("gate rows are a distribution for random inputs") {
    ReasoningGrid grid = forward_pass(params, cfg, {ctx, ctx}, false, rng);
    for (i64 b = 0; b < 2; ++b) {
      double sum = 0.0;
      for (i64 m = 0; m < cfg.M; ++m) {
        CHECK(grid.gate.at(b * cfg.M + m) >= 0.0f);
        sum += grid.gate.at(b * cfg.M + m);
      }
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }
  SUBCASE("disabled gating falls back to the uniform average") {
    PLRConfig no_mors = cfg;
    no_mors.mors_enabled = false;
    ReasoningGrid grid = forward_pass(params, no_mors, {ctx}, false, rng);
    for (i64 m = 0; m < cfg.M; ++m)
      CHECK(grid.gate.at(m) == doctest::Approx(0.5));
  }
}

TEST_CASE("final_representation follows the train/infer asymmetry") {
  Tensor h0 = Tensor::from_data({1, 2}, {1, 2});
  Tensor z = Tensor::from_data({1, 2}, {3, 4});
  Tensor train = final_representation(h0, z, Phase::kTrain);
  CHECK(train.at(0) == 3.0f);
  CHECK(train.at(1) == 4.0f);
  Tensor infer = final_representation(h0, z, Phase::kInfer);
  CHECK(infer.at(0) == 4.0f);
  CHECK(infer.at(1) == 6.0f);
  // train output is independent of h0
  Tensor h0b = Tensor::from_data({1, 2}, {9, -9});
  Tensor train2 = final_representation(h0b, z, Phase::kTrain);
  CHECK(train2.at(0) == train.at(0));
  CHECK(train2.at(1) == train.at(1));
}

TEST_CASE("score_items dot products and ranking behavior") {
  PLRConfig cfg = small_config();
  cfg.vocab_size = 20;
  cfg.d = 8;
  cfg.H = 2;
  PLRParams params = PLRParams::init(cfg, RngStream(26));

  SUBCASE("zero query scores everything zero") {
    Tensor z = Tensor::zeros({1, cfg.d});
    Tensor logits = score_items(z, params);
    for (i64 v = 0; v < cfg.vocab_size; ++v) CHECK(logits.at(v) == 0.0f);
  }
  SUBCASE("orthonormal embeddings make the matching item the argmax") {
    std::fill(params.item_emb.data(),
              params.item_emb.data() + params.item_emb.numel(), 0.0f);
    for (i64 v = 0; v < 8; ++v) params.item_emb.data()[v * cfg.d + v] = 1.0f;
    Tensor z = Tensor::zeros({1, cfg.d});
    z.data()[5] = 1.0f;  // z = E[5]
    Tensor logits = score_items(z, params);
    i64 best = 0;
    for (i64 v = 1; v < cfg.vocab_size; ++v)
      if (logits.at(v) > logits.at(best)) best = v;
    CHECK(best == 5);
  }
  SUBCASE("matches a per-item loop oracle") {
    RngStream rng(27);
    Tensor z = Tensor::zeros({1, cfg.d});
    for (i64 j = 0; j < cfg.d; ++j) z.data()[j] = rng.next_float() - 0.5f;
    Tensor logits = score_items(z, params);
    for (i64 v = 0; v < cfg.vocab_size; ++v) {
      double dot = 0.0;
      for (i64 j = 0; j < cfg.d; ++j)
        dot += static_cast<double>(z.at(j)) * params.item_emb.at(v * cfg.d + j);
      CHECK(std::abs(logits.at(v) - dot) < 1e-5);
    }
  }
  SUBCASE("argmax invariant under positive scaling") {
    RngStream rng(28);
    Tensor z = Tensor::zeros({1, cfg.d});
    for (i64 j = 0; j < cfg.d; ++j) z.data()[j] = rng.next_float() - 0.5f;
    Tensor s1 = score_items(z, params);
    Tensor z5 = scale(z, 5.0f);
    Tensor s2 = score_items(z5, params);
    i64 a1 = 0, a2 = 0;
    for (i64 v = 1; v < cfg.vocab_size; ++v) {
      if (s1.at(v) > s1.at(a1)) a1 = v;
      if (s2.at(v) > s2.at(a2)) a2 = v;
    }
    CHECK(a1 == a2);
  }
}

TEST_CASE("PLR with a single null stream reduces to the ERL baseline") {
  PLRConfig cfg = small_config();
  cfg.M = 1;
  cfg.mors_enabled = false;
  cfg.rcl_enabled = false;
  cfg.kl_enabled = false;
  PLRParams params = PLRParams::init(cfg, RngStream(30));
  std::fill(params.triggers.data(),
            params.triggers.data() + params.triggers.numel(), 0.0f);
  const auto w = ref::to_weights<float>(params, cfg);
  RngStream rng(31);
  for (int trial = 0; trial < 4; ++trial) {
    std::vector<i64> ctx =
        random_context(rng, 2 + static_cast<i64>(rng.next_below(7)),
                       cfg.vocab_size);
    RngStream fr(32);
    ReasoningGrid grid = forward_pass(params, cfg, {ctx}, false, fr);
    auto erl = ref::erl_forward(w, ctx);
    Tensor z_train = final_representation(grid.h0, grid.z_rea, Phase::kTrain);
    CHECK(max_abs_diff_vec(z_train.data(), erl.z) < 1e-5);
    CHECK(max_abs_diff_vec(grid.h0.data(), erl.h0) < 1e-5);
  }
}

TEST_CASE("checkpoint round-trip is bit-exact and validates on load") {
  PLRConfig cfg = small_config();
  PLRParams params = PLRParams::init(cfg, RngStream(33));
  const std::string path = "test_checkpoint.plr";
  save_checkpoint(params, cfg, path);

  SUBCASE("round trip") {
    auto [loaded, lcfg] = load_checkpoint(path);
    CHECK(lcfg.d == cfg.d);
    CHECK(lcfg.vocab_size == cfg.vocab_size);
    auto a = params.named_tensors();
    auto b = loaded.named_tensors();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
      REQUIRE(a[i].second->numel() == b[i].second->numel());
      const auto va = a[i].second->to_vector();
      const auto vb = b[i].second->to_vector();
      CHECK(std::memcmp(va.data(), vb.data(), va.size() * sizeof(float)) == 0);
    }
  }
  SUBCASE("corrupt magic bytes are rejected") {
    std::fstream f(path,
                   std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(0);
    f.write("XXXX", 4);
    f.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("magic"),
                         std::runtime_error);
  }
  SUBCASE("truncated payload is rejected") {
    std::ifstream in(path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(path, std::ios::binary);
    out.write(all.data(), static_cast<std::streamsize>(all.size() - 64));
    out.close();
    CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  }
  SUBCASE("declared vocab mismatch names the offending tensor") {
    std::ifstream in(path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
    in.close();
    // bump the declared vocabulary in the JSON header without moving bytes
    const std::string needle = "\"vocab_size\":23";
    const auto at = all.find(needle);
    REQUIRE(at != std::string::npos);
    all.replace(at, needle.size(), "\"vocab_size\":25");
    std::ofstream out(path, std::ios::binary);
    out.write(all.data(), static_cast<std::streamsize>(all.size()));
    out.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(path),
                         doctest::Contains("item_embeddings"),
                         std::runtime_error);
  }
  std::remove(path.c_str());
}

TEST_CASE("training instrumentation counts forwards and h0 additions") {
  stats::reset();
  PLRConfig cfg = small_config();
  PLRParams params = PLRParams::init(cfg, RngStream(34));
  RngStream rng(35);
  std::vector<i64> ctx = random_context(rng, 5, cfg.vocab_size);
  ReasoningGrid grid = forward_pass(params, cfg, {ctx}, false, rng);
  CHECK(stats::forward_passes() == 1);

  stats::set_in_training(true);
  (void)final_representation(grid.h0, grid.z_rea, Phase::kTrain);
  CHECK(stats::train_reps_with_h0() == 0);
  (void)final_representation(grid.h0, grid.z_rea, Phase::kInfer);
  CHECK(stats::train_reps_with_h0() == 1);  // tripwire fires
  stats::set_in_training(false);
  stats::reset();
}
