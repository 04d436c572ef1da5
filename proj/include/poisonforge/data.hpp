#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "poisonforge/common.hpp"

namespace poisonforge {

struct Interaction {
  std::string user;
  std::string item;
  std::int64_t timestamp = 0;
};

/// Raw interaction records in input order, deduplicated on (user, item, timestamp).
struct InteractionLog {
  std::vector<Interaction> records;
  std::size_t skipped = 0;     // malformed lines
  std::size_t duplicates = 0;  // exact (user, item, timestamp) repeats dropped
};

enum class LogFormat { kCsv, kJsonl };

LogFormat parse_log_format(std::string_view name);

/// CSV: optional header `user,item,timestamp`. JSONL: objects with `user`, `item`, `ts`.
InteractionLog ingest_interactions(const std::filesystem::path& path, LogFormat format);
InteractionLog parse_interactions(std::istream& in, LogFormat format);

/// Chronological per-user item sequences with a leave-one-out split.
///
/// Users built from a log hold out their last two items (validation, test).
/// Users appended by injection hold out nothing; their whole sequence is training data.
/// Immutable once constructed.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<std::string> user_names, std::vector<std::string> item_names,
          std::vector<std::vector<ItemId>> sequences, std::vector<std::uint8_t> holdout);

  std::size_t num_users() const { return user_names_.size(); }
  std::size_t num_items() const { return item_names_.size(); }

  std::span<const ItemId> sequence(UserId u) const { return sequences_[u]; }
  std::span<const ItemId> train(UserId u) const;
  bool has_holdout(UserId u) const { return holdout_[u] != 0; }
  ItemId validation(UserId u) const;
  ItemId test(UserId u) const;

  /// Membership in u's training items.
  bool in_train(UserId u, ItemId i) const;

  const std::string& user_name(UserId u) const { return user_names_[u]; }
  const std::string& item_name(ItemId i) const { return item_names_[i]; }
  std::optional<ItemId> find_item(std::string_view name) const;

  std::size_t num_train_interactions() const;
  /// Training interaction count per item.
  std::vector<std::size_t> item_popularity() const;

  /// Dataset with extra training-only users appended after the existing ones.
  Dataset with_appended_users(std::vector<std::string> names,
                              std::vector<std::vector<ItemId>> sequences) const;

  /// Inverse of build_dataset on an already-filtered dataset; timestamps are positions.
  InteractionLog to_log() const;

  nlohmann::json to_json() const;
  static Dataset from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Dataset load(const std::filesystem::path& path);

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.user_names_ == b.user_names_ && a.item_names_ == b.item_names_ &&
           a.sequences_ == b.sequences_ && a.holdout_ == b.holdout_;
  }

 private:
  void index();

  std::vector<std::string> user_names_;
  std::vector<std::string> item_names_;
  std::vector<std::vector<ItemId>> sequences_;
  std::vector<std::uint8_t> holdout_;  // number of held-out trailing items: 2 or 0
  std::vector<std::vector<ItemId>> train_sorted_;
  std::unordered_map<std::string, ItemId> item_lookup_;
};

inline constexpr int kDatasetSnapshotVersion = 1;

/// Iterative min-count filtering to a fixpoint, chronological ordering and leave-one-out split.
/// Users with fewer than three surviving actions are always removed.
Dataset build_dataset(const InteractionLog& log, int min_user_acts = 5, int min_item_acts = 5);

struct TargetSpec {
  std::vector<ItemId> items;
  std::vector<UserId> users;

  nlohmann::json to_json() const;
  static TargetSpec from_json(const nlohmann::json& j);
  friend bool operator==(const TargetSpec&, const TargetSpec&) = default;
};

/// Target items are drawn uniformly from outside the top popularity quartile
/// (whole catalog if that stratum is too small). Target users are drawn uniformly
/// from users whose training history contains none of the chosen items.
TargetSpec select_targets(const Dataset& ds, std::size_t n_items, std::size_t n_users,
                          std::uint64_t seed);

/// Planted-structure synthetic logs: topical users, popularity skew inside topics,
/// and deterministic item-to-item successor chains.
struct SyntheticConfig {
  int users = 1000;
  int items = 300;
  int topics = 10;
  int min_length = 7;
  int max_length = 30;
  double chain_prob = 0.5;     // follow the current item's successor
  double topic_focus = 0.85;   // otherwise pick inside one of the user's topics
  double zipf_exponent = 1.0;  // popularity skew inside a topic
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
  static SyntheticConfig from_json(const nlohmann::json& j);
};

InteractionLog synthesize_log(const SyntheticConfig& cfg);

}  // namespace poisonforge
