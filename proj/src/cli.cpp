#include "plr/cli.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "plr/data.hpp"
#include "plr/reference.hpp"
#include "plr/theory.hpp"

namespace plr::cli {

namespace {

using nlohmann::json;

constexpr int kSchemaVersion = 1;

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

// typed setter registry: every configurable key goes through one of these
struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
};

i64 to_i64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const i64 out = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (...) {
    fail("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

double to_f64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (...) {
    fail("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  fail("config key '" + key + "': expected a boolean, got '" + v + "'");
}

template <typename T, typename Conv>
std::vector<T> to_list(const std::string& key, const std::string& v,
                       Conv conv) {
  std::vector<T> out;
  std::string item;
  std::istringstream ss(v);
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(static_cast<T>(conv(key, item)));
  }
  if (out.empty()) fail("config key '" + key + "': empty list");
  return out;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> kFields = {
      // model
      {"d", [](RunConfig& c, const std::string& v) { c.model.d = to_i64("d", v); }},
      {"heads", [](RunConfig& c, const std::string& v) { c.model.H = to_i64("heads", v); }},
      {"layers", [](RunConfig& c, const std::string& v) { c.model.L = to_i64("layers", v); }},
      {"steps", [](RunConfig& c, const std::string& v) { c.model.T = to_i64("steps", v); }},
      {"streams", [](RunConfig& c, const std::string& v) { c.model.M = to_i64("streams", v); }},
      {"max_len", [](RunConfig& c, const std::string& v) { c.model.max_len = to_i64("max_len", v); }},
      {"vocab_size", [](RunConfig& c, const std::string& v) { c.model.vocab_size = to_i64("vocab_size", v); }},
      {"dropout_rep",
       [](RunConfig& c, const std::string& v) {
         c.model.dropout_rep = static_cast<float>(to_f64("dropout_rep", v));
         if (c.model.dropout_rep < 0.0f || c.model.dropout_rep >= 1.0f)
           fail("config key 'dropout_rep': must be in [0,1)");
       }},
      {"dropout_attn",
       [](RunConfig& c, const std::string& v) {
         c.model.dropout_attn = static_cast<float>(to_f64("dropout_attn", v));
         if (c.model.dropout_attn < 0.0f || c.model.dropout_attn >= 1.0f)
           fail("config key 'dropout_attn': must be in [0,1)");
       }},
      {"mors", [](RunConfig& c, const std::string& v) { c.model.mors_enabled = to_bool("mors", v); }},
      {"rcl",
       [](RunConfig& c, const std::string& v) {
         c.model.rcl_enabled = to_bool("rcl", v);
         c.loss.rcl_enabled = c.model.rcl_enabled;
       }},
      {"kl",
       [](RunConfig& c, const std::string& v) {
         c.model.kl_enabled = to_bool("kl", v);
         c.loss.kl_enabled = c.model.kl_enabled;
       }},
      {"layernorm_ffn",
       [](RunConfig& c, const std::string& v) {
         c.model.use_layernorm_ffn = to_bool("layernorm_ffn", v);
       }},
      // loss
      {"lambda",
       [](RunConfig& c, const std::string& v) {
         c.loss.lambda_kl = static_cast<float>(to_f64("lambda", v));
         if (c.loss.lambda_kl < 0.0f)
           fail("config key 'lambda': must be >= 0");
       }},
      {"temperature",
       [](RunConfig& c, const std::string& v) {
         c.loss.temperature = static_cast<float>(to_f64("temperature", v));
         if (c.loss.temperature <= 0.0f)
           fail("config key 'temperature': must be > 0");
       }},
      {"kl_sign",
       [](RunConfig& c, const std::string& v) {
         const i64 s = to_i64("kl_sign", v);
         if (s != 1 && s != -1) fail("config key 'kl_sign': must be 1 or -1");
         c.loss.kl_sign = static_cast<int>(s);
       }},
      // training
      {"batch_size", [](RunConfig& c, const std::string& v) { c.train_cfg.batch_size = to_i64("batch_size", v); }},
      {"lr",
       [](RunConfig& c, const std::string& v) {
         c.train_cfg.learning_rate = static_cast<float>(to_f64("lr", v));
       }},
      {"epochs", [](RunConfig& c, const std::string& v) { c.train_cfg.max_epochs = to_i64("epochs", v); }},
      {"patience", [](RunConfig& c, const std::string& v) { c.train_cfg.patience = to_i64("patience", v); }},
      {"seed",
       [](RunConfig& c, const std::string& v) {
         c.train_cfg.seed = static_cast<std::uint64_t>(to_i64("seed", v));
       }},
      {"ks",
       [](RunConfig& c, const std::string& v) {
         c.train_cfg.eval_ks = to_list<i64>("ks", v, to_i64);
       }},
      {"grad_clip",
       [](RunConfig& c, const std::string& v) {
         c.train_cfg.grad_clip = static_cast<float>(to_f64("grad_clip", v));
       }},
      {"train_cap", [](RunConfig& c, const std::string& v) { c.train_cfg.train_cap_per_user = to_i64("train_cap", v); }},
      {"exclude_seen",
       [](RunConfig& c, const std::string& v) {
         c.train_cfg.exclude_seen = to_bool("exclude_seen", v);
       }},
      {"eval_batch", [](RunConfig& c, const std::string& v) { c.train_cfg.eval_batch = to_i64("eval_batch", v); }},
      // data
      {"data", [](RunConfig& c, const std::string& v) { c.data_path = v; }},
      {"out", [](RunConfig& c, const std::string& v) { c.out_dir = v; }},
      {"checkpoint", [](RunConfig& c, const std::string& v) { c.checkpoint = v; }},
      {"split",
       [](RunConfig& c, const std::string& v) {
         if (v != "test" && v != "valid")
           fail("config key 'split': expected test or valid");
         c.split = v;
       }},
      {"min_interactions", [](RunConfig& c, const std::string& v) { c.min_interactions = to_i64("min_interactions", v); }},
      {"positive_threshold",
       [](RunConfig& c, const std::string& v) {
         c.positive_threshold = static_cast<int>(to_i64("positive_threshold", v));
       }},
      // synthetic generator
      {"users", [](RunConfig& c, const std::string& v) { c.synth_users = to_i64("users", v); }},
      {"items", [](RunConfig& c, const std::string& v) { c.synth_items = to_i64("items", v); }},
      {"interests", [](RunConfig& c, const std::string& v) { c.synth_interests = to_i64("interests", v); }},
      {"len_min", [](RunConfig& c, const std::string& v) { c.synth_len_min = to_i64("len_min", v); }},
      {"len_max", [](RunConfig& c, const std::string& v) { c.synth_len_max = to_i64("len_max", v); }},
      {"persistence",
       [](RunConfig& c, const std::string& v) {
         c.synth_persistence = to_f64("persistence", v);
         if (c.synth_persistence < 0.0 || c.synth_persistence > 1.0)
           fail("config key 'persistence': must be in [0,1]");
       }},
      {"persistence_jitter",
       [](RunConfig& c, const std::string& v) {
         c.synth_persistence_jitter = to_f64("persistence_jitter", v);
         if (c.synth_persistence_jitter < 0.0 ||
             c.synth_persistence_jitter > 0.5)
           fail("config key 'persistence_jitter': must be in [0,0.5]");
       }},
      // command specific
      {"variant", [](RunConfig& c, const std::string& v) { c.variant = v; }},
      {"rates",
       [](RunConfig& c, const std::string& v) {
         c.rates = to_list<double>("rates", v, to_f64);
       }},
      {"paper_scale",
       [](RunConfig& c, const std::string& v) {
         c.paper_scale = to_bool("paper_scale", v);
       }},
      {"flops_n", [](RunConfig& c, const std::string& v) { c.flops_n = to_i64("flops_n", v); }},
      {"budget", [](RunConfig& c, const std::string& v) { c.sweep_budget = to_i64("budget", v); }},
      {"sweep_m",
       [](RunConfig& c, const std::string& v) {
         c.sweep_m = to_list<i64>("sweep_m", v, to_i64);
       }},
      {"sweep_t",
       [](RunConfig& c, const std::string& v) {
         c.sweep_t = to_list<i64>("sweep_t", v, to_i64);
       }},
      {"sweep_lambda",
       [](RunConfig& c, const std::string& v) {
         c.sweep_lambda = to_list<float>("sweep_lambda", v, to_f64);
       }},
      {"sweep_dropout",
       [](RunConfig& c, const std::string& v) {
         c.sweep_dropout = to_list<float>("sweep_dropout", v, to_f64);
       }},
      {"dump_users", [](RunConfig& c, const std::string& v) { c.dump_users = to_i64("dump_users", v); }},
  };
  return kFields;
}

void apply(RunConfig& cfg, const std::string& key, const std::string& value,
           Provenance origin) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      f.set(cfg, value);
      cfg.provenance[key] = origin;
      return;
    }
  }
  fail("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::kDefault: return "default";
    case Provenance::kFile: return "file";
    case Provenance::kFlag: return "flag";
  }
  return "default";
}

json config_json(const RunConfig& c) {
  json j;
  j["d"] = c.model.d;
  j["heads"] = c.model.H;
  j["layers"] = c.model.L;
  j["steps"] = c.model.T;
  j["streams"] = c.model.M;
  j["max_len"] = c.model.max_len;
  j["vocab_size"] = c.model.vocab_size;
  j["dropout_rep"] = c.model.dropout_rep;
  j["dropout_attn"] = c.model.dropout_attn;
  j["mors"] = c.model.mors_enabled;
  j["rcl"] = c.model.rcl_enabled;
  j["kl"] = c.model.kl_enabled;
  j["layernorm_ffn"] = c.model.use_layernorm_ffn;
  j["lambda"] = c.loss.lambda_kl;
  j["temperature"] = c.loss.temperature;
  j["kl_sign"] = c.loss.kl_sign;
  j["batch_size"] = c.train_cfg.batch_size;
  j["lr"] = c.train_cfg.learning_rate;
  j["epochs"] = c.train_cfg.max_epochs;
  j["patience"] = c.train_cfg.patience;
  j["seed"] = c.train_cfg.seed;
  j["ks"] = c.train_cfg.eval_ks;
  j["grad_clip"] = c.train_cfg.grad_clip;
  j["train_cap"] = c.train_cfg.train_cap_per_user;
  j["exclude_seen"] = c.train_cfg.exclude_seen;
  j["eval_batch"] = c.train_cfg.eval_batch;
  j["data"] = c.data_path;
  j["out"] = c.out_dir;
  j["checkpoint"] = c.checkpoint;
  j["split"] = c.split;
  j["min_interactions"] = c.min_interactions;
  j["positive_threshold"] = c.positive_threshold;
  j["users"] = c.synth_users;
  j["items"] = c.synth_items;
  j["interests"] = c.synth_interests;
  j["len_min"] = c.synth_len_min;
  j["len_max"] = c.synth_len_max;
  j["persistence"] = c.synth_persistence;
  j["persistence_jitter"] = c.synth_persistence_jitter;
  j["variant"] = c.variant;
  j["rates"] = c.rates;
  j["paper_scale"] = c.paper_scale;
  j["flops_n"] = c.flops_n;
  j["budget"] = c.sweep_budget;
  j["sweep_m"] = c.sweep_m;
  j["sweep_t"] = c.sweep_t;
  j["sweep_lambda"] = c.sweep_lambda;
  j["sweep_dropout"] = c.sweep_dropout;
  j["dump_users"] = c.dump_users;
  json prov;
  for (const auto& [k, p] : c.provenance) prov[k] = provenance_name(p);
  j["provenance"] = prov;
  return j;
}

void write_text(const std::string& path, const std::string& text) {
  std::filesystem::create_directories(
      std::filesystem::path(path).parent_path().empty()
          ? "."
          : std::filesystem::path(path).parent_path().string());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

std::string artifact_path(const RunConfig& cfg, const std::string& name) {
  std::filesystem::create_directories(cfg.out_dir);
  return (std::filesystem::path(cfg.out_dir) / name).string();
}

json metrics_json(const MetricsReport& m) {
  json j;
  j["split"] = m.split;
  j["users"] = m.users;
  for (size_t i = 0; i < m.ks.size(); ++i) {
    j["recall@" + std::to_string(m.ks[i])] = m.recall[i];
    j["ndcg@" + std::to_string(m.ks[i])] = m.ndcg[i];
  }
  if (m.perturb_rate > 0.0) {
    j["perturb_rate"] = m.perturb_rate;
    j["perturb_seed"] = m.perturb_seed;
  }
  j["runtime_seconds"] = m.runtime_seconds;
  return j;
}

json artifact_header(const RunConfig& cfg, const std::string& command) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["command"] = command;
  j["seed"] = cfg.train_cfg.seed;
  j["config"] = config_json(cfg);
  return j;
}

Dataset load_dataset(const RunConfig& cfg) {
  if (cfg.data_path.empty()) fail("config key 'data': a TSV path is required");
  auto records = load_interactions(cfg.data_path, cfg.positive_threshold);
  Dataset ds = chronological_split(
      build_sequences(records, cfg.min_interactions, cfg.model.max_len));
  return ds;
}

// fills vocab_size from the dataset when left at 0
void resolve_vocab(RunConfig& cfg, const Dataset& ds) {
  if (cfg.model.vocab_size == 0) cfg.model.vocab_size = ds.vocab_size();
  if (cfg.model.vocab_size != ds.vocab_size())
    fail("config vocab_size " + std::to_string(cfg.model.vocab_size) +
         " does not match the dataset vocabulary " +
         std::to_string(ds.vocab_size()));
}

int cmd_synth(RunConfig& cfg) {
  SyntheticData s = generate_synthetic(
      cfg.synth_users, cfg.synth_items, cfg.synth_interests, cfg.synth_len_min,
      cfg.synth_len_max, cfg.synth_persistence, cfg.train_cfg.seed,
      cfg.model.max_len, cfg.min_interactions,
      cfg.synth_persistence_jitter);
  write_tsv(s.records, artifact_path(cfg, "data.tsv"));
  json j = artifact_header(cfg, "synth");
  j["stats"] = json::parse(dataset_stats_json(s.dataset));
  write_text(artifact_path(cfg, "stats.json"), j.dump(2) + "\n");
  std::cout << "synth: wrote " << artifact_path(cfg, "data.tsv") << "\n";
  return 0;
}

int cmd_prepare(RunConfig& cfg) {
  Dataset ds = load_dataset(cfg);
  write_tsv(to_records(ds), artifact_path(cfg, "dataset.tsv"));
  json j = artifact_header(cfg, "prepare");
  j["stats"] = json::parse(dataset_stats_json(ds));
  write_text(artifact_path(cfg, "stats.json"), j.dump(2) + "\n");
  std::cout << "prepare: " << ds.users.size() << " users, "
            << ds.vocab_size() << " items\n";
  return 0;
}

int cmd_train(RunConfig& cfg) {
  Dataset ds = load_dataset(cfg);
  resolve_vocab(cfg, ds);
  TrainResult result = train(ds, cfg.model, cfg.loss, cfg.train_cfg);
  save_checkpoint(result.params, cfg.model, artifact_path(cfg, cfg.checkpoint));

  std::ostringstream csv;
  csv << "epoch,train_loss,valid_ndcg@10\n";
  for (const auto& e : result.history)
    csv << e.epoch << "," << e.train_loss << "," << e.valid_ndcg10 << "\n";
  write_text(artifact_path(cfg, "history.csv"), csv.str());

  json j = artifact_header(cfg, "train");
  j["best_epoch"] = result.best_epoch;
  j["epochs_run"] = result.history.size();
  j["aborted_non_finite"] = result.aborted_non_finite;
  j["runtime_seconds"] = result.runtime_seconds;
  write_text(artifact_path(cfg, "train.json"), j.dump(2) + "\n");
  std::cout << "train: best epoch " << result.best_epoch << ", checkpoint "
            << artifact_path(cfg, cfg.checkpoint) << "\n";
  return result.aborted_non_finite ? 1 : 0;
}

std::pair<PLRParams, PLRConfig> load_model(const RunConfig& cfg) {
  const std::string path =
      std::filesystem::exists(cfg.checkpoint)
          ? cfg.checkpoint
          : (std::filesystem::path(cfg.out_dir) / cfg.checkpoint).string();
  if (!std::filesystem::exists(path))
    throw std::runtime_error("checkpoint not found: " + cfg.checkpoint);
  return load_checkpoint(path);
}

SplitLabel split_of(const RunConfig& cfg) {
  return cfg.split == "valid" ? SplitLabel::kValid : SplitLabel::kTest;
}

int cmd_eval(RunConfig& cfg, const std::string& command) {
  auto [params, model_cfg] = load_model(cfg);
  if (command == "ablate") {
    auto [m, l] = ablate(model_cfg, cfg.loss, cfg.variant);
    model_cfg = m;
  }
  RunConfig resolved = cfg;
  resolved.model = model_cfg;
  Dataset ds = load_dataset(resolved);
  if (ds.vocab_size() != model_cfg.vocab_size)
    throw std::runtime_error(
        "eval: dataset vocabulary " + std::to_string(ds.vocab_size()) +
        " does not match checkpoint vocab_size " +
        std::to_string(model_cfg.vocab_size));
  MetricsReport rep =
      evaluate(params, model_cfg, ds, split_of(cfg), cfg.train_cfg.eval_ks,
               cfg.train_cfg.exclude_seen, cfg.train_cfg.eval_batch);
  json j = artifact_header(resolved, command);
  if (command == "ablate") j["variant"] = cfg.variant;
  j["metrics"] = metrics_json(rep);
  write_text(artifact_path(cfg, "metrics.json"), j.dump(2) + "\n");
  std::cout << command << ": recall@10 " << rep.recall_at(10) << ", ndcg@10 "
            << rep.ndcg_at(10) << "\n";
  return 0;
}

int cmd_sweep(RunConfig& cfg) {
  Dataset ds = load_dataset(cfg);
  resolve_vocab(cfg, ds);
  SweepResult res =
      sweep(ds, cfg.model, cfg.loss, cfg.train_cfg, cfg.sweep_m, cfg.sweep_t,
            cfg.sweep_lambda, cfg.sweep_dropout, cfg.sweep_budget);
  json j = artifact_header(cfg, "sweep");
  j["complete"] = res.complete;
  json cells = json::array();
  std::ostringstream txt;
  txt << "M     T     lambda   dropout  recall@10    ndcg@10      split\n";
  for (const auto& c : res.cells) {
    json cj;
    cj["M"] = c.m;
    cj["T"] = c.t;
    cj["lambda"] = c.lambda;
    cj["dropout"] = c.dropout;
    cj["valid"] = metrics_json(c.valid);
    cj["test"] = metrics_json(c.test);
    cj["train_runtime_seconds"] = c.train_runtime;
    cells.push_back(cj);
    char line[160];
    std::snprintf(line, sizeof line, "%-5lld %-5lld %-8.4f %-8.3f %-12.6f %-12.6f test\n",
                  static_cast<long long>(c.m), static_cast<long long>(c.t),
                  c.lambda, c.dropout, c.test.recall_at(10),
                  c.test.ndcg_at(10));
    txt << line;
  }
  j["cells"] = cells;
  write_text(artifact_path(cfg, "sweep.json"), j.dump(2) + "\n");
  write_text(artifact_path(cfg, "sweep.txt"), txt.str());
  std::cout << "sweep: " << res.cells.size() << " cells"
            << (res.complete ? "" : " (budget exhausted, incomplete)") << "\n";
  return 0;
}

int cmd_robustness(RunConfig& cfg) {
  auto [params, model_cfg] = load_model(cfg);
  RunConfig resolved = cfg;
  resolved.model = model_cfg;
  Dataset ds = load_dataset(resolved);
  auto reports = robustness_run(params, model_cfg, ds, cfg.rates,
                                cfg.train_cfg.seed, cfg.train_cfg.eval_ks);
  json j = artifact_header(resolved, "robustness");
  json arr = json::array();
  for (const auto& r : reports) {
    json rj = metrics_json(r);
    rj["rate"] = r.perturb_rate;
    rj["perturb_seed"] = r.perturb_seed;
    arr.push_back(rj);
  }
  j["per_rate"] = arr;
  write_text(artifact_path(cfg, "robustness.json"), j.dump(2) + "\n");
  std::cout << "robustness: " << reports.size() << " rates evaluated\n";
  return 0;
}

int cmd_ceiling(RunConfig& cfg) {
  auto [params, model_cfg] = load_model(cfg);
  RunConfig resolved = cfg;
  resolved.model = model_cfg;
  Dataset ds = load_dataset(resolved);
  CeilingReport rep = oracle_ceiling(params, model_cfg, ds, split_of(cfg),
                                     cfg.train_cfg.eval_ks,
                                     cfg.train_cfg.eval_batch);
  json j = artifact_header(resolved, "ceiling");
  j["current"] = metrics_json(rep.current);
  j["ceiling"] = metrics_json(rep.ceiling);
  json gap;
  for (size_t i = 0; i < rep.current.ks.size(); ++i) {
    gap["recall@" + std::to_string(rep.current.ks[i])] =
        rep.ceiling.recall[i] - rep.current.recall[i];
    gap["ndcg@" + std::to_string(rep.current.ks[i])] =
        rep.ceiling.ndcg[i] - rep.current.ndcg[i];
  }
  j["gap"] = gap;
  write_text(artifact_path(cfg, "ceiling.json"), j.dump(2) + "\n");
  std::cout << "ceiling: ndcg@10 current " << rep.current.ndcg_at(10)
            << " ceiling " << rep.ceiling.ndcg_at(10) << "\n";
  return 0;
}

int cmd_theory(RunConfig& cfg) {
  theory::TheoryReport rep = theory::run_theory_suite(cfg.train_cfg.seed);
  json j = artifact_header(cfg, "theory");
  json verdicts = json::array();
  for (const auto& v : rep.verdicts) {
    json vj;
    vj["name"] = v.name;
    vj["passed"] = v.passed;
    vj["measured"] = v.measured;
    vj["threshold"] = v.threshold;
    vj["detail"] = v.detail;
    verdicts.push_back(vj);
    std::cout << (v.passed ? "PASS " : "FAIL ") << v.name << " (measured "
              << v.measured << ")\n";
  }
  j["verdicts"] = verdicts;
  j["jensen_gap_example"] = rep.jensen_gap_example;
  j["gating_gain_example"] = rep.gating_gain_example;
  j["mi_style_example"] = rep.mi_style_example;
  j["lipschitz_estimate_linear"] = rep.lipschitz_estimate_linear;
  j["gamma_linear"] = rep.gamma_linear;
  j["bound_c"] = rep.bound_c;
  j["bound_delta_e"] = rep.bound_delta_e;
  j["bound_r_max"] = rep.bound_r_max;
  j["bound_diversity"] = rep.bound_diversity;
  j["bound_gap"] = rep.bound_gap;
  j["decay_trace"] = rep.decay_trace;
  j["all_passed"] = rep.all_passed();
  write_text(artifact_path(cfg, "theory.json"), j.dump(2) + "\n");
  return rep.all_passed() ? 0 : 1;
}

int cmd_flops(RunConfig& cfg) {
  FlopsSpec spec = cfg.paper_scale
                       ? FlopsSpec::paper_scale()
                       : FlopsSpec::from_config(cfg.model, cfg.flops_n);
  FlopsReport rep = count_flops(spec);
  json j = artifact_header(cfg, "flops");
  j["n"] = spec.n;
  j["d"] = spec.d;
  j["L"] = spec.L;
  j["H"] = spec.H;
  j["T"] = spec.T;
  j["M"] = spec.M;
  j["ffn_hidden"] = spec.ffn_hidden;
  j["flops_base"] = rep.flops_base;
  j["flops_reasoning"] = rep.flops_reasoning;
  j["flops_total"] = rep.flops_total;
  j["ratio_vs_base"] = rep.ratio_vs_base;
  j["assumptions"] = rep.assumptions;
  write_text(artifact_path(cfg, "flops.json"), j.dump(2) + "\n");
  std::cout << "flops: ratio " << rep.ratio_vs_base << "\n";
  return 0;
}

int cmd_dump_attention(RunConfig& cfg) {
  auto [params, model_cfg] = load_model(cfg);
  RunConfig resolved = cfg;
  resolved.model = model_cfg;
  Dataset ds = load_dataset(resolved);

  json users = json::array();
  RngStream dummy(0);
  i64 done = 0;
  for (const auto& u : ds.users) {
    if (done >= cfg.dump_users) break;
    if (u.items.size() < 2) continue;
    const i64 target_pos = static_cast<i64>(u.items.size()) - 1;
    const i64 first = std::max<i64>(0, target_pos - model_cfg.max_len);
    std::vector<i64> ctx(u.items.begin() + first,
                         u.items.begin() + target_pos);
    AttnCapture cap;
    (void)forward_pass(params, model_cfg, {ctx}, false, dummy, &cap);
    json uj;
    uj["user"] = ds.user_ids[static_cast<size_t>(u.user_index)];
    uj["context_items"] = ctx;
    json recs = json::array();
    for (const auto& r : cap.records) {
      json rj;
      rj["step"] = r.step;
      rj["layer"] = r.layer;
      rj["keys"] = r.keys;
      // probs layout: [streams, heads, keys] for this single-user batch
      json streams = json::array();
      for (i64 m = 0; m < model_cfg.M; ++m) {
        json heads = json::array();
        for (i64 h = 0; h < r.heads; ++h) {
          json row = json::array();
          for (i64 k = 0; k < r.keys; ++k)
            row.push_back(r.probs[static_cast<size_t>(
                (m * r.heads + h) * r.keys + k)]);
          heads.push_back(row);
        }
        streams.push_back(heads);
      }
      rj["attention"] = streams;
      recs.push_back(rj);
    }
    uj["records"] = recs;
    users.push_back(uj);
    ++done;
  }
  json j = artifact_header(resolved, "dump-attention");
  j["users"] = users;
  write_text(artifact_path(cfg, "attention.json"), j.dump(2) + "\n");
  std::cout << "dump-attention: " << done << " users\n";
  return 0;
}

}  // namespace

Provenance RunConfig::origin(const std::string& key) const {
  auto it = provenance.find(key);
  return it == provenance.end() ? Provenance::kDefault : it->second;
}

std::string RunConfig::to_json_string() const {
  return config_json(*this).dump(2);
}

RunConfig parse_config(const std::string& file_path,
                       const std::vector<std::string>& flags) {
  RunConfig cfg;
  if (!file_path.empty()) {
    std::ifstream in(file_path);
    if (!in) fail("cannot open config file " + file_path);
    std::string line;
    i64 line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        fail(file_path + ":" + std::to_string(line_no) +
             ": expected key = value");
      apply(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)),
            Provenance::kFile);
    }
  }
  for (size_t i = 0; i < flags.size(); ++i) {
    std::string key = flags[i];
    if (key.rfind("--", 0) != 0) fail("expected --key, got '" + key + "'");
    key = key.substr(2);
    std::string value;
    const auto eq = key.find('=');
    if (eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= flags.size()) fail("flag --" + key + " needs a value");
      value = flags[++i];
    }
    apply(cfg, key, value, Provenance::kFlag);
  }
  return cfg;
}

int run_command(const std::string& command, RunConfig cfg) {
  if (command == "synth") return cmd_synth(cfg);
  if (command == "prepare") return cmd_prepare(cfg);
  if (command == "train") return cmd_train(cfg);
  if (command == "eval" || command == "ablate") return cmd_eval(cfg, command);
  if (command == "sweep") return cmd_sweep(cfg);
  if (command == "robustness") return cmd_robustness(cfg);
  if (command == "ceiling") return cmd_ceiling(cfg);
  if (command == "theory") return cmd_theory(cfg);
  if (command == "flops") return cmd_flops(cfg);
  if (command == "dump-attention") return cmd_dump_attention(cfg);
  fail("unknown command '" + command +
       "' (expected prepare, synth, train, eval, ablate, sweep, robustness, "
       "ceiling, theory, flops or dump-attention)");
}

int main_entry(int argc, const char* const* argv) {
  try {
    if (argc < 2) {
      std::cerr << "usage: plr <command> [--config file] [--key value ...]\n"
                << "commands: prepare synth train eval ablate sweep "
                   "robustness ceiling theory flops dump-attention\n";
      return 2;
    }
    const std::string command = argv[1];
    std::string config_file;
    std::vector<std::string> flags;
    for (int i = 2; i < argc; ++i) {
      const std::string arg = argv[i];
      if (arg == "--config") {
        if (i + 1 >= argc) fail("--config needs a path");
        config_file = argv[++i];
      } else {
        flags.push_back(arg);
      }
    }
    RunConfig cfg = parse_config(config_file, flags);
    return run_command(command, cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace plr::cli
