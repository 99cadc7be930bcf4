#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "plr/cli.hpp"

using namespace plr;
using namespace plr::cli;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) {
    path = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string str(const std::string& f = "") const {
    return (f.empty() ? path : path / f).string();
  }
};

}  // namespace

TEST_CASE("parse_config defaults, file and flag precedence") {
  SUBCASE("empty inputs give the desk-scale defaults") {
    RunConfig cfg = parse_config("", {});
    CHECK(cfg.model.d == 32);
    CHECK(cfg.model.M == 2);
    CHECK(cfg.model.T == 2);
    CHECK(cfg.model.max_len == 20);
    CHECK(cfg.loss.kl_sign == -1);
    CHECK(cfg.origin("streams") == Provenance::kDefault);
  }
  SUBCASE("flag overrides file overrides default") {
    TempDir dir("plr_cli_cfg");
    {
      std::ofstream f(dir.str("run.conf"));
      f << "# comment line\n";
      f << "streams = 3\n";
      f << "lambda = 0.01\n";
    }
    RunConfig cfg = parse_config(dir.str("run.conf"), {"--streams", "2"});
    CHECK(cfg.model.M == 2);
    CHECK(cfg.origin("streams") == Provenance::kFlag);
    CHECK(cfg.loss.lambda_kl == doctest::Approx(0.01));
    CHECK(cfg.origin("lambda") == Provenance::kFile);
    CHECK(cfg.origin("d") == Provenance::kDefault);
  }
  SUBCASE("unknown keys are rejected by name") {
    CHECK_THROWS_WITH_AS(parse_config("", {"--warpdrive", "on"}),
                         doctest::Contains("warpdrive"),
                         std::invalid_argument);
  }
  SUBCASE("constraint violations name the key and the rule") {
    CHECK_THROWS_WITH_AS(parse_config("", {"--lambda", "-0.5"}),
                         doctest::Contains("lambda"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config("", {"--dropout_rep", "1.5"}),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_config("", {"--steps", "two"}),
                    std::invalid_argument);
  }
  SUBCASE("key=value flag form works") {
    RunConfig cfg = parse_config("", {"--steps=4"});
    CHECK(cfg.model.T == 4);
  }
}

TEST_CASE("cli pipeline: synth, train, eval, ablate, flops") {
  TempDir dir("plr_cli_pipeline");
  // tiny single-stream run so the gate is degenerate
  std::vector<std::string> common = {
      "--out",       dir.str(),  "--users",   "60",      "--items", "40",
      "--interests", "4",        "--len_min", "5",       "--len_max", "10",
      "--seed",      "5",        "--d",       "16",      "--heads", "2",
      "--layers",    "1",        "--steps",   "1",       "--streams", "1",
      "--max_len",   "10",       "--epochs",  "1",       "--batch_size", "16",
      "--train_cap", "2",        "--min_interactions", "3"};

  RunConfig synth_cfg = parse_config("", common);
  REQUIRE(run_command("synth", synth_cfg) == 0);
  CHECK(std::filesystem::exists(dir.str("data.tsv")));
  const std::string stats = slurp(dir.str("stats.json"));
  CHECK(stats.find("\"schema_version\"") != std::string::npos);
  CHECK(stats.find("\"config\"") != std::string::npos);
  CHECK(stats.find("\"seed\"") != std::string::npos);

  auto with_data = common;
  with_data.push_back("--data");
  with_data.push_back(dir.str("data.tsv"));
  RunConfig train_cfg = parse_config("", with_data);
  REQUIRE(run_command("train", train_cfg) == 0);
  CHECK(std::filesystem::exists(dir.str("checkpoint.plr")));
  const std::string history = slurp(dir.str("history.csv"));
  CHECK(history.rfind("epoch,train_loss,valid_ndcg@10", 0) == 0);

  RunConfig eval_cfg = parse_config("", with_data);
  eval_cfg.checkpoint = dir.str("checkpoint.plr");
  REQUIRE(run_command("eval", eval_cfg) == 0);
  const std::string metrics = slurp(dir.str("metrics.json"));
  CHECK(metrics.find("recall@10") != std::string::npos);
  CHECK(metrics.find("\"config\"") != std::string::npos);

  // a single-stream checkpoint evaluated without the gate is unchanged
  RunConfig ablate_cfg = eval_cfg;
  ablate_cfg.variant = "no-mors";
  const std::string before = slurp(dir.str("metrics.json"));
  REQUIRE(run_command("ablate", ablate_cfg) == 0);
  const std::string after = slurp(dir.str("metrics.json"));
  auto metric_part = [](const std::string& s) {
    const auto at = s.find("\"metrics\"");
    return s.substr(at, s.find("runtime_seconds") - at);
  };
  CHECK(metric_part(before) == metric_part(after));

  // missing checkpoint for an eval-family command errors
  RunConfig missing = eval_cfg;
  missing.checkpoint = dir.str("nope.plr");
  CHECK_THROWS_WITH_AS(run_command("eval", missing),
                       doctest::Contains("checkpoint"), std::runtime_error);

  RunConfig flops_cfg = parse_config("", {"--out", dir.str(),
                                          "--paper_scale", "true"});
  REQUIRE(run_command("flops", flops_cfg) == 0);
  const std::string flops = slurp(dir.str("flops.json"));
  CHECK(flops.find("ratio_vs_base") != std::string::npos);

  RunConfig dump_cfg = eval_cfg;
  dump_cfg.dump_users = 2;
  REQUIRE(run_command("dump-attention", dump_cfg) == 0);
  const std::string attn = slurp(dir.str("attention.json"));
  CHECK(attn.find("\"attention\"") != std::string::npos);
  CHECK(attn.find("\"step\"") != std::string::npos);
}

TEST_CASE("unknown command fails with the expected message") {
  RunConfig cfg = parse_config("", {});
  CHECK_THROWS_WITH_AS(run_command("transmogrify", cfg),
                       doctest::Contains("transmogrify"),
                       std::invalid_argument);
}

TEST_CASE("main_entry returns nonzero on bad usage") {
  const char* argv1[] = {"plr"};
  CHECK(main_entry(1, argv1) == 2);
  const char* argv2[] = {"plr", "eval", "--no-such-key", "1"};
  CHECK(main_entry(4, argv2) == 2);
}
