#include "plr/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace plr {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

i64 parse_i64(const std::string& s, bool& ok) {
  i64 v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  ok = (ec == std::errc{} && p == s.data() + s.size());
  return v;
}

}  // namespace

i64 Dataset::interaction_count() const {
  i64 n = 0;
  for (const auto& u : users) n += static_cast<i64>(u.items.size());
  return n;
}

double Dataset::sparsity() const {
  if (users.empty() || item_ids.empty()) return 1.0;
  const double cells = static_cast<double>(users.size()) *
                       static_cast<double>(item_ids.size());
  return 1.0 - static_cast<double>(interaction_count()) / cells;
}

std::vector<InteractionRecord> parse_interactions(std::istream& in,
                                                  int positive_threshold,
                                                  const std::string& origin) {
  std::vector<InteractionRecord> out;
  std::string line;
  i64 line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    size_t start = 0;
    while (true) {
      const size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    const auto fail = [&](const std::string& why) {
      throw std::invalid_argument(origin + ":" + std::to_string(line_no) +
                                  ": malformed record (" + why + "): " + line);
    };
    if (fields.size() != 3 && fields.size() != 4)
      fail("expected 3 or 4 tab-separated fields");
    if (fields[0].empty() || fields[1].empty()) fail("empty user or item id");
    bool ok = false;
    const i64 ts = parse_i64(fields[2], ok);
    if (!ok || ts < 0) fail("bad timestamp");
    InteractionRecord rec;
    rec.user_id = fields[0];
    rec.item_id = fields[1];
    rec.timestamp = ts;
    if (fields.size() == 4) {
      const i64 rating = parse_i64(fields[3], ok);
      if (!ok || rating < 1 || rating > 5) fail("bad rating");
      rec.rating = static_cast<int>(rating);
      if (rating <= positive_threshold) continue;  // not a positive signal
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<InteractionRecord> load_interactions(const std::string& path,
                                                 int positive_threshold) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_interactions: cannot open " + path);
  return parse_interactions(in, positive_threshold, path);
}

Dataset build_sequences(const std::vector<InteractionRecord>& records,
                        i64 min_interactions, i64 max_len) {
  require(min_interactions >= 2, "build_sequences: min_interactions must be >= 2");
  require(max_len >= 1, "build_sequences: max_len must be >= 1");

  // group per user in input order, then stable-sort by timestamp
  std::unordered_map<std::string, i64> user_index;
  std::vector<std::string> user_ids;
  std::vector<std::vector<const InteractionRecord*>> grouped;
  for (const auto& r : records) {
    auto [it, inserted] =
        user_index.try_emplace(r.user_id, static_cast<i64>(user_ids.size()));
    if (inserted) {
      user_ids.push_back(r.user_id);
      grouped.emplace_back();
    }
    grouped[static_cast<size_t>(it->second)].push_back(&r);
  }

  Dataset ds;
  ds.max_len = max_len;
  ds.min_interactions = min_interactions;
  for (size_t u = 0; u < grouped.size(); ++u) {
    auto& events = grouped[u];
    if (static_cast<i64>(events.size()) < min_interactions) continue;
    std::stable_sort(events.begin(), events.end(),
                     [](const InteractionRecord* a, const InteractionRecord* b) {
                       return a->timestamp < b->timestamp;
                     });
    if (static_cast<i64>(events.size()) > max_len) {
      events.erase(events.begin(),
                   events.end() - static_cast<std::ptrdiff_t>(max_len));
    }
    UserSequence seq;
    seq.user_index = static_cast<i64>(ds.users.size());
    for (const auto* r : events) {
      auto [it, inserted] = ds.item_index.try_emplace(
          r->item_id, static_cast<i64>(ds.item_ids.size()));
      if (inserted) ds.item_ids.push_back(r->item_id);
      seq.items.push_back(it->second);
      seq.timestamps.push_back(r->timestamp);
    }
    ds.user_ids.push_back(user_ids[u]);
    ds.users.push_back(std::move(seq));
  }
  if (ds.users.empty()) {
    throw std::runtime_error(
        "build_sequences: no users survive the interaction filter");
  }
  return ds;
}

Dataset chronological_split(Dataset dataset) {
  dataset.eval_excluded_users = 0;
  for (auto& u : dataset.users) {
    const i64 k = static_cast<i64>(u.items.size());
    u.labels.assign(static_cast<size_t>(k), SplitLabel::kTrain);
    u.labels[0] = SplitLabel::kContextOnly;
    if (k >= 3) {
      u.labels[static_cast<size_t>(k - 2)] = SplitLabel::kValid;
      u.labels[static_cast<size_t>(k - 1)] = SplitLabel::kTest;
    } else {
      ++dataset.eval_excluded_users;
    }
  }
  dataset.split_done = true;
  return dataset;
}

std::vector<InteractionRecord> to_records(const Dataset& dataset) {
  std::vector<InteractionRecord> out;
  for (const auto& u : dataset.users) {
    for (size_t i = 0; i < u.items.size(); ++i) {
      InteractionRecord r;
      r.user_id = dataset.user_ids[static_cast<size_t>(u.user_index)];
      r.item_id = dataset.item_ids[static_cast<size_t>(u.items[i])];
      r.timestamp = u.timestamps[i];
      out.push_back(std::move(r));
    }
  }
  return out;
}

void write_tsv(const std::vector<InteractionRecord>& records,
               const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_tsv: cannot open " + path);
  for (const auto& r : records) {
    out << r.user_id << '\t' << r.item_id << '\t' << r.timestamp;
    if (r.rating) out << '\t' << *r.rating;
    out << '\n';
  }
}

SyntheticData generate_synthetic(i64 n_users, i64 n_items, i64 n_interests,
                                 i64 len_min, i64 len_max, double persistence,
                                 std::uint64_t seed, i64 max_len,
                                 i64 min_interactions,
                                 double persistence_jitter) {
  require(n_users >= 1 && n_items >= 1, "synthetic: need users and items");
  require(n_interests >= 1, "synthetic: n_interests must be >= 1");
  require(n_items % n_interests == 0,
          "synthetic: n_items must be divisible by n_interests");
  require(len_min >= min_interactions && len_min <= len_max,
          "synthetic: infeasible sequence length range");
  require(persistence >= 0.0 && persistence <= 1.0,
          "synthetic: persistence must be in [0,1]");
  require(persistence_jitter >= 0.0 && persistence_jitter <= 0.5,
          "synthetic: persistence_jitter must be in [0,0.5]");

  SyntheticData out;
  out.n_interests = n_interests;
  out.cluster_size = n_items / n_interests;
  out.persistence = persistence;
  for (i64 v = 0; v < n_items; ++v) {
    out.cluster_of_item["i" + std::to_string(v)] =
        static_cast<int>(v / out.cluster_size);
  }

  RngStream rng(seed);
  out.active_cluster.resize(static_cast<size_t>(n_users));
  for (i64 u = 0; u < n_users; ++u) {
    RngStream ur = rng.child("user", static_cast<std::uint64_t>(u));
    // the user's own interest set: 2..n_interests distinct clusters
    const i64 lo = std::min<i64>(2, n_interests);
    const i64 k_u = lo + static_cast<i64>(ur.next_below(
                             static_cast<std::uint64_t>(n_interests - lo + 1)));
    std::vector<int> clusters(static_cast<size_t>(n_interests));
    std::iota(clusters.begin(), clusters.end(), 0);
    for (i64 i = n_interests - 1; i > 0; --i) {
      const i64 j = static_cast<i64>(ur.next_below(static_cast<std::uint64_t>(i + 1)));
      std::swap(clusters[static_cast<size_t>(i)], clusters[static_cast<size_t>(j)]);
    }
    clusters.resize(static_cast<size_t>(k_u));

    const i64 len = len_min + static_cast<i64>(ur.next_below(
                                  static_cast<std::uint64_t>(len_max - len_min + 1)));
    double user_persistence = persistence;
    if (persistence_jitter > 0.0) {
      user_persistence += persistence_jitter * (2.0 * ur.next_double() - 1.0);
      user_persistence = std::min(0.99, std::max(0.01, user_persistence));
    }
    int active = clusters[ur.next_below(clusters.size())];
    auto& trace = out.active_cluster[static_cast<size_t>(u)];
    for (i64 p = 0; p < len; ++p) {
      if (p > 0 && clusters.size() > 1 &&
          ur.next_double() >= user_persistence) {
        // switch to a different owned cluster, uniformly
        int next = active;
        while (next == active)
          next = clusters[ur.next_below(clusters.size())];
        active = next;
      }
      trace.push_back(active);
      const i64 item = static_cast<i64>(active) * out.cluster_size +
                       static_cast<i64>(ur.next_below(
                           static_cast<std::uint64_t>(out.cluster_size)));
      InteractionRecord rec;
      rec.user_id = "u" + std::to_string(u);
      rec.item_id = "i" + std::to_string(item);
      rec.timestamp = p;
      out.records.push_back(std::move(rec));
    }
  }
  out.dataset = chronological_split(
      build_sequences(out.records, min_interactions, max_len));
  return out;
}

Dataset perturb_missing(const Dataset& dataset, double rate,
                        std::uint64_t seed) {
  require(rate >= 0.0 && rate < 1.0,
          "perturb_missing: rate must be in [0,1)");
  require(dataset.split_done, "perturb_missing: split the dataset first");
  Dataset out = dataset;
  out.perturb_short_users = 0;
  if (rate == 0.0) return out;
  RngStream rng(seed);
  for (auto& u : out.users) {
    RngStream ur = rng.child("perturb", static_cast<std::uint64_t>(u.user_index));
    UserSequence kept;
    kept.user_index = u.user_index;
    for (size_t i = 0; i < u.items.size(); ++i) {
      const bool is_target = u.labels[i] == SplitLabel::kValid ||
                             u.labels[i] == SplitLabel::kTest;
      const bool drop = !is_target && ur.next_double() < rate;
      if (!drop) {
        kept.items.push_back(u.items[i]);
        kept.timestamps.push_back(u.timestamps[i]);
        kept.labels.push_back(u.labels[i]);
      }
    }
    if (static_cast<i64>(kept.items.size()) <
        2 + 2 /* targets + two context items */) {
      ++out.perturb_short_users;
    }
    u = std::move(kept);
  }
  return out;
}

std::vector<TrainSample> make_train_samples(const Dataset& dataset,
                                            i64 per_user_cap) {
  require(dataset.split_done, "make_train_samples: split the dataset first");
  require(per_user_cap >= 1, "make_train_samples: cap must be >= 1");
  std::vector<TrainSample> out;
  for (const auto& u : dataset.users) {
    i64 taken = 0;
    for (i64 pos = static_cast<i64>(u.items.size()) - 1;
         pos >= 1 && taken < per_user_cap; --pos) {
      if (u.labels[static_cast<size_t>(pos)] != SplitLabel::kTrain) continue;
      out.push_back({u.user_index, pos});
      ++taken;
    }
  }
  return out;
}

std::string dataset_stats_json(const Dataset& dataset) {
  nlohmann::json j;
  j["users"] = dataset.users.size();
  j["items"] = dataset.item_ids.size();
  j["interactions"] = dataset.interaction_count();
  j["sparsity"] = dataset.sparsity();
  j["max_len"] = dataset.max_len;
  j["min_interactions"] = dataset.min_interactions;
  j["eval_excluded_users"] = dataset.eval_excluded_users;
  return j.dump(2);
}

}  // namespace plr
