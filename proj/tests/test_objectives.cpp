#include <doctest.h>

#include <cmath>

#include "plr/gradcheck.hpp"
#include "plr/model.hpp"
#include "plr/objectives.hpp"
#include "plr/reference.hpp"

using namespace plr;

namespace {

PLRConfig tiny_config() {
  PLRConfig cfg;
  cfg.d = 12;
  cfg.H = 2;
  cfg.L = 2;
  cfg.T = 2;
  cfg.M = 2;
  cfg.max_len = 8;
  cfg.vocab_size = 17;
  cfg.dropout_rep = 0.0f;
  cfg.dropout_attn = 0.0f;
  return cfg;
}

}  // namespace

TEST_CASE("nip_loss worked examples") {
  SUBCASE("uniform logits give ln |V|") {
    Tensor logits = Tensor::zeros({1, 100});
    Tensor loss = nip_loss(logits, {42});
    CHECK(loss.item() == doctest::Approx(std::log(100.0)).epsilon(1e-6));
  }
  SUBCASE("near-certain prediction has near-zero loss") {
    Tensor logits = Tensor::zeros({1, 50});
    logits.data()[7] = 30.0f;
    Tensor loss = nip_loss(logits, {7});
    CHECK(loss.item() < 1e-9);
  }
  SUBCASE("three-way closed form") {
    Tensor logits = Tensor::from_data({1, 3}, {1, 2, 3});
    Tensor loss = nip_loss(logits, {2});
    CHECK(loss.item() == doctest::Approx(0.40760596).epsilon(1e-5));
  }
  SUBCASE("invalid target rejected") {
    Tensor logits = Tensor::zeros({1, 3});
    CHECK_THROWS_AS(nip_loss(logits, {3}), std::invalid_argument);
  }
}

TEST_CASE("reasoning_distributions are softmax rows over the vocabulary") {
  PLRConfig cfg = tiny_config();
  PLRParams params = PLRParams::init(cfg, RngStream(1));
  RngStream rng(2);
  ReasoningGrid grid =
      forward_pass(params, cfg, {{1, 2, 3}, {4, 5, 6}}, false, rng);
  Tensor p = reasoning_distributions(grid, params, cfg);
  REQUIRE(p.shape() == Shape{2, cfg.T * cfg.M, cfg.vocab_size});
  // rows sum to one
  for (i64 r = 0; r < 2 * cfg.T * cfg.M; ++r) {
    double sum = 0.0;
    for (i64 v = 0; v < cfg.vocab_size; ++v)
      sum += p.at(r * cfg.vocab_size + v);
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
  // per-item loop oracle for one state
  const Tensor& h1 = grid.states[1];  // step 1, both streams
  double mx = -1e30;
  std::vector<double> dots(static_cast<size_t>(cfg.vocab_size));
  for (i64 v = 0; v < cfg.vocab_size; ++v) {
    double acc = 0.0;
    for (i64 j = 0; j < cfg.d; ++j)
      acc += static_cast<double>(h1.at(j)) * params.item_emb.at(v * cfg.d + j);
    dots[static_cast<size_t>(v)] = acc;
    mx = std::max(mx, acc);
  }
  double z = 0.0;
  for (double v : dots) z += std::exp(v - mx);
  for (i64 v = 0; v < cfg.vocab_size; ++v) {
    const double want = std::exp(dots[static_cast<size_t>(v)] - mx) / z;
    CHECK(std::abs(p.at(v) - want) < 1e-5);
  }

  SUBCASE("zero state rows give the uniform distribution") {
    ReasoningGrid g2 = grid;
    g2.states[1] = Tensor::zeros({2 * cfg.M, cfg.d});
    Tensor p2 = reasoning_distributions(g2, params, cfg);
    for (i64 v = 0; v < cfg.vocab_size; ++v)
      CHECK(p2.at(v) ==
            doctest::Approx(1.0 / static_cast<double>(cfg.vocab_size)));
  }
}

TEST_CASE("kl_regularization worked examples and properties") {
  SUBCASE("identical distributions give zero") {
    Tensor p = Tensor::from_data({3, 4},
                                 {0.1f, 0.2f, 0.3f, 0.4f, 0.1f, 0.2f, 0.3f,
                                  0.4f, 0.1f, 0.2f, 0.3f, 0.4f});
    CHECK(kl_regularization(p).item() == doctest::Approx(0.0).epsilon(1e-9));
  }
  SUBCASE("single state has no pairs") {
    Tensor p = Tensor::from_data({1, 4}, {0.1f, 0.2f, 0.3f, 0.4f});
    CHECK(kl_regularization(p).item() == 0.0f);
  }
  SUBCASE("two-state closed form 0.8 ln 9") {
    Tensor p = Tensor::from_data({2, 2}, {0.9f, 0.1f, 0.1f, 0.9f});
    CHECK(kl_regularization(p).item() ==
          doctest::Approx(0.8 * std::log(9.0)).epsilon(1e-5));
  }
  SUBCASE("non-normalized rows are rejected") {
    Tensor p = Tensor::from_data({2, 2}, {0.9f, 0.3f, 0.5f, 0.5f});
    CHECK_THROWS_AS(kl_regularization(p), std::invalid_argument);
  }
  SUBCASE("nonnegative on random ensembles, zero only for duplicates") {
    RngStream rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      const i64 k = 2 + static_cast<i64>(rng.next_below(4));
      const i64 v = 2 + static_cast<i64>(rng.next_below(6));
      Tensor logits = Tensor::zeros({k, v});
      for (i64 i = 0; i < k * v; ++i)
        logits.data()[i] = 2.0f * rng.next_float() - 1.0f;
      Tensor val = kl_regularization(softmax(logits));
      CHECK(val.item() >= 0.0f);
    }
  }
  SUBCASE("invariant under permuting the state index set") {
    Tensor p = Tensor::from_data(
        {3, 3}, {0.5f, 0.3f, 0.2f, 0.2f, 0.5f, 0.3f, 0.1f, 0.1f, 0.8f});
    Tensor q = Tensor::from_data(
        {3, 3}, {0.1f, 0.1f, 0.8f, 0.5f, 0.3f, 0.2f, 0.2f, 0.5f, 0.3f});
    CHECK(kl_regularization(p).item() ==
          doctest::Approx(kl_regularization(q).item()).epsilon(1e-6));
  }
}

TEST_CASE("rcl_loss worked examples and properties") {
  const i64 d = 4;

  SUBCASE("equal views with orthogonal users hit the two-point closed form") {
    Tensor h = Tensor::from_data({2, d}, {1, 0, 0, 0, 0, 1, 0, 0});
    Tensor loss = rcl_loss({h}, {h}, 1, 1.0f);
    const double per_direction = std::log(1.0 + std::exp(-1.0));
    CHECK(loss.item() == doctest::Approx(2.0 * per_direction).epsilon(1e-5));
    CHECK(loss.item() == doctest::Approx(0.6266).epsilon(1e-3));
  }
  SUBCASE("cosine similarity makes the loss scale invariant") {
    RngStream rng(7);
    Tensor h1 = Tensor::zeros({3, d});
    Tensor h2 = Tensor::zeros({3, d});
    for (i64 i = 0; i < 3 * d; ++i) {
      h1.data()[i] = rng.next_float() + 0.1f;
      h2.data()[i] = rng.next_float() + 0.1f;
    }
    Tensor a = rcl_loss({h1}, {h2}, 1, 1.0f);
    Tensor b = rcl_loss({scale(h1, 5.0f)}, {h2}, 1, 1.0f);
    CHECK(a.item() == doctest::Approx(b.item()).epsilon(1e-5));
  }
  SUBCASE("consistent user permutation leaves the loss unchanged") {
    RngStream rng(8);
    Tensor h1 = Tensor::zeros({3, d});
    Tensor h2 = Tensor::zeros({3, d});
    for (i64 i = 0; i < 3 * d; ++i) {
      h1.data()[i] = rng.next_float() - 0.5f;
      h2.data()[i] = rng.next_float() - 0.5f;
    }
    auto permute = [&](const Tensor& t) {
      Tensor out = Tensor::zeros({3, d});
      const i64 perm[3] = {2, 0, 1};
      for (i64 i = 0; i < 3; ++i)
        for (i64 j = 0; j < d; ++j)
          out.data()[i * d + j] = t.at(perm[i] * d + j);
      return out;
    };
    Tensor a = rcl_loss({h1}, {h2}, 1, 1.0f);
    Tensor b = rcl_loss({permute(h1)}, {permute(h2)}, 1, 1.0f);
    CHECK(a.item() == doctest::Approx(b.item()).epsilon(1e-5));
  }
  SUBCASE("loss decreases as same-user similarity rises") {
    double prev = 1e9;
    for (double theta : {0.9, 0.5, 0.1}) {
      Tensor h1 = Tensor::from_data({2, 2}, {1, 0, 0, 1});
      Tensor h2 = Tensor::from_data(
          {2, 2}, {static_cast<float>(std::cos(theta)),
                   static_cast<float>(std::sin(theta)), 0, 1});
      const double val = rcl_loss({h1}, {h2}, 1, 1.0f).item();
      CHECK(val < prev);
      prev = val;
    }
  }
  SUBCASE("batch of one is an error") {
    Tensor h = Tensor::from_data({1, d}, {1, 0, 0, 0});
    CHECK_THROWS_AS(rcl_loss({h}, {h}, 1, 1.0f), std::invalid_argument);
  }
  SUBCASE("zero-norm state is an error") {
    Tensor h = Tensor::from_data({2, d}, {1, 0, 0, 0, 0, 0, 0, 0});
    CHECK_THROWS_AS(rcl_loss({h}, {h}, 1, 1.0f), std::domain_error);
  }
}

TEST_CASE("total_loss combination") {
  LossConfig cfg;
  cfg.lambda_kl = 0.1f;
  cfg.kl_sign = -1;

  SUBCASE("lambda zero reduces to nip + rcl") {
    LossConfig c0 = cfg;
    c0.lambda_kl = 0.0f;
    auto out = total_loss(Tensor::scalar(1.0f), Tensor::scalar(2.0f),
                          Tensor::scalar(0.5f), c0);
    CHECK(out.total == doctest::Approx(1.5));
  }
  SUBCASE("all mechanisms off leaves pure nip") {
    LossConfig off = cfg;
    off.rcl_enabled = false;
    off.kl_enabled = false;
    auto out = total_loss(Tensor::scalar(1.0f), Tensor::scalar(2.0f),
                          Tensor::scalar(0.5f), off);
    CHECK(out.total == doctest::Approx(1.0));
    CHECK(out.kl == 0.0f);
    CHECK(out.rcl == 0.0f);
  }
  SUBCASE("worked arithmetic with the divergence-rewarding sign") {
    auto out = total_loss(Tensor::scalar(1.0f), Tensor::scalar(2.0f),
                          Tensor::scalar(0.5f), cfg);
    CHECK(out.total == doctest::Approx(1.3));
    // breakdown identity: total = nip + rcl + sign * lambda * kl
    CHECK(std::abs(out.total - (out.nip + out.rcl +
                                cfg.kl_sign * cfg.lambda_kl * out.kl)) < 1e-6);
  }
  SUBCASE("literal combined-objective sign is available") {
    LossConfig plus = cfg;
    plus.kl_sign = 1;
    auto out = total_loss(Tensor::scalar(1.0f), Tensor::scalar(2.0f),
                          Tensor::scalar(0.5f), plus);
    CHECK(out.total == doctest::Approx(1.7));
  }
  SUBCASE("invalid temperature rejected") {
    LossConfig bad = cfg;
    bad.temperature = 0.0f;
    CHECK_THROWS_AS(total_loss(Tensor::scalar(1.0f), Tensor::scalar(0.0f),
                               Tensor::scalar(0.0f), bad),
                    std::invalid_argument);
  }
}

TEST_CASE("full objective gradient passes the 64-bit finite-difference check") {
  PLRConfig cfg = tiny_config();
  PLRParams params = PLRParams::init(cfg, RngStream(42));
  LossConfig loss_cfg;
  loss_cfg.lambda_kl = 0.1f;
  loss_cfg.kl_sign = -1;

  std::vector<std::vector<i64>> contexts = {
      {1, 2, 3, 4}, {5, 6}, {7, 8, 9, 10, 11, 12}, {13, 14, 15}};
  std::vector<i64> targets = {4, 7, 1, 16};

  ref::ObjectiveConfig ref_cfg;
  ref_cfg.lambda_kl = loss_cfg.lambda_kl;
  ref_cfg.temperature = loss_cfg.temperature;
  ref_cfg.kl_sign = loss_cfg.kl_sign;
  ref_cfg.rcl_enabled = loss_cfg.rcl_enabled;
  ref_cfg.kl_enabled = loss_cfg.kl_enabled;

  auto loss64 = [&]() {
    return ref::objective_f64(params, cfg, ref_cfg, contexts, targets);
  };
  auto compute = [&]() {
    params.zero_grad();
    Tape tape;
    RngStream r1(1), r2(2);
    ReasoningGrid g1 = forward_pass(params, cfg, contexts, true, r1);
    ReasoningGrid g2 = forward_pass(params, cfg, contexts, true, r2);
    auto breakdown =
        training_objective(g1, &g2, params, cfg, loss_cfg, targets);
    backward(breakdown.total_tensor);
  };
  auto rep = finite_diff_check(params.named_tensors(), compute, loss64, 1e-3,
                               48, 1e-3, RngStream(50));
  INFO("worst " << rep.worst_parameter << " rel " << rep.max_relative_error);
  CHECK(rep.passed);
}

TEST_CASE("float objective agrees with the double reference value") {
  PLRConfig cfg = tiny_config();
  PLRParams params = PLRParams::init(cfg, RngStream(60));
  LossConfig loss_cfg;
  std::vector<std::vector<i64>> contexts = {{1, 2, 3}, {4, 5, 6, 7}};
  std::vector<i64> targets = {9, 2};

  RngStream r1(1), r2(2);
  ReasoningGrid g1 = forward_pass(params, cfg, contexts, false, r1);
  ReasoningGrid g2 = forward_pass(params, cfg, contexts, false, r2);
  auto breakdown = training_objective(g1, &g2, params, cfg, loss_cfg, targets);

  ref::ObjectiveConfig ref_cfg;
  const double want =
      ref::objective_f64(params, cfg, ref_cfg, contexts, targets);
  CHECK(std::abs(breakdown.total - want) < 1e-4);
}
