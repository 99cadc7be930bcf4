#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "plr/rng.hpp"
#include "plr/tensor.hpp"

namespace plr {

struct InteractionRecord {
  std::string user_id;
  std::string item_id;
  i64 timestamp = 0;
  std::optional<int> rating;
};

enum class SplitLabel : std::uint8_t { kContextOnly, kTrain, kValid, kTest };

struct UserSequence {
  i64 user_index = 0;
  std::vector<i64> items;
  std::vector<i64> timestamps;
  std::vector<SplitLabel> labels;  // filled by chronological_split
};

struct Dataset {
  std::vector<std::string> item_ids;                 // dense index -> id
  std::unordered_map<std::string, i64> item_index;  // id -> dense index
  std::vector<std::string> user_ids;
  std::vector<UserSequence> users;
  i64 max_len = 50;
  i64 min_interactions = 2;
  bool split_done = false;
  i64 eval_excluded_users = 0;  // too short for valid/test after filtering
  i64 perturb_short_users = 0;  // fell below 2 context items when perturbed

  i64 vocab_size() const { return static_cast<i64>(item_ids.size()); }
  i64 interaction_count() const;
  double sparsity() const;
};

// UTF-8 TSV: user<TAB>item<TAB>timestamp[<TAB>rating], one record per line.
// Records with a rating at or below the threshold are dropped.
std::vector<InteractionRecord> load_interactions(const std::string& path,
                                                 int positive_threshold);
std::vector<InteractionRecord> parse_interactions(std::istream& in,
                                                  int positive_threshold,
                                                  const std::string& origin);

Dataset build_sequences(const std::vector<InteractionRecord>& records,
                        i64 min_interactions, i64 max_len);

// Leave-one-out labels: last item test, penultimate valid, the rest train
// targets. Users left with fewer than 3 items keep train-only labels and are
// counted in eval_excluded_users.
Dataset chronological_split(Dataset dataset);

// Canonical record stream of a built dataset (used for idempotence checks and
// for writing normalized TSV files).
std::vector<InteractionRecord> to_records(const Dataset& dataset);
void write_tsv(const std::vector<InteractionRecord>& records,
               const std::string& path);

struct SyntheticData {
  std::vector<InteractionRecord> records;
  Dataset dataset;  // built and split
  // generator latent state: active cluster per original position
  std::vector<std::vector<int>> active_cluster;
  std::unordered_map<std::string, int> cluster_of_item;
  i64 n_interests = 0;
  i64 cluster_size = 0;
  double persistence = 0.0;
};

// Planted multi-interest sequences: items are partitioned into interest
// clusters, each user interleaves 2..n_interests of them under a Markov
// persistence parameter, and every next item is drawn from the currently
// active cluster. persistence_jitter spreads the per-user persistence
// uniformly in [persistence - jitter, persistence + jitter] (clamped), which
// plants heterogeneous switching dynamics while keeping the population mean
// at the configured value.
SyntheticData generate_synthetic(i64 n_users, i64 n_items, i64 n_interests,
                                 i64 len_min, i64 len_max, double persistence,
                                 std::uint64_t seed, i64 max_len,
                                 i64 min_interactions = 3,
                                 double persistence_jitter = 0.0);

// Randomly removes non-target context positions from an evaluation dataset;
// valid/test targets are always preserved and the vocabulary is untouched.
Dataset perturb_missing(const Dataset& dataset, double rate,
                        std::uint64_t seed);

struct TrainSample {
  i64 user = 0;
  i64 target_pos = 0;  // index into the user's item list
};

// Every train-region prefix yields one (context, next-item) sample, most
// recent prefixes first, capped per user.
std::vector<TrainSample> make_train_samples(const Dataset& dataset,
                                            i64 per_user_cap);

std::string dataset_stats_json(const Dataset& dataset);

}  // namespace plr
