#pragma once

#include <map>
#include <string>
#include <vector>

#include "plr/objectives.hpp"
#include "plr/train.hpp"

namespace plr::cli {

enum class Provenance { kDefault, kFile, kFlag };

struct RunConfig {
  PLRConfig model;
  LossConfig loss;
  TrainConfig train_cfg;

  std::string data_path;
  std::string out_dir = ".";
  std::string checkpoint = "checkpoint.plr";
  std::string split = "test";
  i64 min_interactions = 3;
  int positive_threshold = 3;

  i64 synth_users = 2000;
  i64 synth_items = 500;
  i64 synth_interests = 4;
  i64 synth_len_min = 8;
  i64 synth_len_max = 24;
  double synth_persistence = 0.8;
  double synth_persistence_jitter = 0.0;

  std::string variant;  // ablate
  std::vector<double> rates = {0.0, 0.1, 0.2, 0.3};
  bool paper_scale = false;
  i64 flops_n = 50;
  i64 sweep_budget = 64;
  std::vector<i64> sweep_m = {1, 2};
  std::vector<i64> sweep_t = {1, 2};
  std::vector<float> sweep_lambda = {0.1f};
  std::vector<float> sweep_dropout = {0.2f};
  i64 dump_users = 4;

  std::map<std::string, Provenance> provenance;
  Provenance origin(const std::string& key) const;

  std::string to_json_string() const;  // resolved values plus provenance
};

// Flat `key = value` file (# comments) overridden by --key value flags.
// Unknown keys and constraint violations throw with the offending key named.
RunConfig parse_config(const std::string& file_path,
                       const std::vector<std::string>& flags);

// Returns the process exit status; artifacts land under cfg.out_dir.
int run_command(const std::string& command, RunConfig cfg);

int main_entry(int argc, const char* const* argv);

}  // namespace plr::cli
