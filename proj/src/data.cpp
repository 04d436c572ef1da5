#include "poisonforge/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <sstream>
#include <tuple>
#include <unordered_set>

#include <spdlog/spdlog.h>

namespace poisonforge {

using nlohmann::json;

namespace {

std::string_view trim(std::string_view s) {
  const auto* ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

std::optional<std::int64_t> parse_int(std::string_view s) {
  std::int64_t v = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) return std::nullopt;
  return v;
}

std::optional<Interaction> parse_csv_line(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    fields.push_back(trim(line.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (fields.size() != 3 || fields[0].empty() || fields[1].empty()) return std::nullopt;
  auto ts = parse_int(fields[2]);
  if (!ts) return std::nullopt;
  return Interaction{std::string(fields[0]), std::string(fields[1]), *ts};
}

std::optional<std::string> json_id(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  return std::nullopt;
}

std::optional<Interaction> parse_jsonl_line(std::string_view line) {
  json obj = json::parse(line.begin(), line.end(), nullptr, /*allow_exceptions=*/false);
  if (!obj.is_object() || !obj.contains("user") || !obj.contains("item") || !obj.contains("ts")) {
    return std::nullopt;
  }
  auto user = json_id(obj["user"]);
  auto item = json_id(obj["item"]);
  const auto& ts = obj["ts"];
  if (!user || !item || user->empty() || item->empty() || !ts.is_number_integer()) {
    return std::nullopt;
  }
  return Interaction{*user, *item, ts.get<std::int64_t>()};
}

struct RecordKey {
  std::string_view user, item;
  std::int64_t ts;
  bool operator==(const RecordKey&) const = default;
};

struct RecordKeyHash {
  std::size_t operator()(const RecordKey& k) const {
    const std::hash<std::string_view> h;
    return h(k.user) ^ (h(k.item) * 31) ^ mix64(static_cast<std::uint64_t>(k.ts));
  }
};

std::size_t deduplicate(std::vector<Interaction>& records) {
  std::unordered_set<RecordKey, RecordKeyHash> seen;
  seen.reserve(records.size());
  std::vector<Interaction> kept;
  kept.reserve(records.size());
  std::size_t dropped = 0;
  for (auto& r : records) {
    // Keys view into `records`, which is not touched until the loop ends.
    if (seen.insert(RecordKey{r.user, r.item, r.timestamp}).second) {
      kept.push_back(r);
    } else {
      ++dropped;
    }
  }
  records = std::move(kept);
  return dropped;
}

}  // namespace

LogFormat parse_log_format(std::string_view name) {
  if (name == "csv") return LogFormat::kCsv;
  if (name == "jsonl") return LogFormat::kJsonl;
  throw Error(ErrorCode::kInvalidArgument, "unknown log format '" + std::string(name) + "'");
}

InteractionLog parse_interactions(std::istream& in, LogFormat format) {
  InteractionLog log;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    const auto body = trim(line);
    if (body.empty()) continue;
    if (first && format == LogFormat::kCsv && body == "user,item,timestamp") {
      first = false;
      continue;
    }
    first = false;
    auto rec = format == LogFormat::kCsv ? parse_csv_line(body) : parse_jsonl_line(body);
    if (rec) {
      log.records.push_back(std::move(*rec));
    } else {
      ++log.skipped;
    }
  }
  log.duplicates = deduplicate(log.records);
  return log;
}

InteractionLog ingest_interactions(const std::filesystem::path& path, LogFormat format) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read interaction log: " + path.string());
  auto log = parse_interactions(in, format);
  if (log.skipped > 0) {
    spdlog::warn("{}: skipped {} malformed line(s)", path.string(), log.skipped);
  }
  return log;
}

// ---------------------------------------------------------------------------

Dataset::Dataset(std::vector<std::string> user_names, std::vector<std::string> item_names,
                 std::vector<std::vector<ItemId>> sequences, std::vector<std::uint8_t> holdout)
    : user_names_(std::move(user_names)),
      item_names_(std::move(item_names)),
      sequences_(std::move(sequences)),
      holdout_(std::move(holdout)) {
  if (sequences_.size() != user_names_.size() || holdout_.size() != user_names_.size()) {
    throw Error(ErrorCode::kInvalidArgument, "dataset: per-user arrays disagree in length");
  }
  for (std::size_t u = 0; u < sequences_.size(); ++u) {
    if (holdout_[u] != 0 && holdout_[u] != 2) {
      throw Error(ErrorCode::kInvalidArgument, "dataset: holdout must be 0 or 2");
    }
    if (sequences_[u].size() < holdout_[u] + 1u) {
      throw Error(ErrorCode::kInvalidArgument, "dataset: user " + user_names_[u] + " has no training items");
    }
    for (ItemId i : sequences_[u]) {
      if (i < 0 || static_cast<std::size_t>(i) >= item_names_.size()) {
        throw Error(ErrorCode::kInvalidArgument, "dataset: item index out of range");
      }
    }
  }
  index();
}

void Dataset::index() {
  train_sorted_.resize(sequences_.size());
  for (std::size_t u = 0; u < sequences_.size(); ++u) {
    auto t = train(static_cast<UserId>(u));
    auto& s = train_sorted_[u];
    s.assign(t.begin(), t.end());
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
  }
  item_lookup_.clear();
  for (std::size_t i = 0; i < item_names_.size(); ++i) {
    item_lookup_.emplace(item_names_[i], static_cast<ItemId>(i));
  }
}

std::span<const ItemId> Dataset::train(UserId u) const {
  const auto& s = sequences_[u];
  return std::span<const ItemId>(s).first(s.size() - holdout_[u]);
}

ItemId Dataset::validation(UserId u) const {
  if (!has_holdout(u)) throw Error(ErrorCode::kInvalidArgument, "user has no validation item");
  return sequences_[u][sequences_[u].size() - 2];
}

ItemId Dataset::test(UserId u) const {
  if (!has_holdout(u)) throw Error(ErrorCode::kInvalidArgument, "user has no test item");
  return sequences_[u].back();
}

bool Dataset::in_train(UserId u, ItemId i) const {
  const auto& s = train_sorted_[u];
  return std::binary_search(s.begin(), s.end(), i);
}

std::optional<ItemId> Dataset::find_item(std::string_view name) const {
  auto it = item_lookup_.find(std::string(name));
  if (it == item_lookup_.end()) return std::nullopt;
  return it->second;
}

std::size_t Dataset::num_train_interactions() const {
  std::size_t n = 0;
  for (std::size_t u = 0; u < sequences_.size(); ++u) n += train(static_cast<UserId>(u)).size();
  return n;
}

std::vector<std::size_t> Dataset::item_popularity() const {
  std::vector<std::size_t> counts(num_items(), 0);
  for (std::size_t u = 0; u < sequences_.size(); ++u) {
    for (ItemId i : train(static_cast<UserId>(u))) ++counts[i];
  }
  return counts;
}

Dataset Dataset::with_appended_users(std::vector<std::string> names,
                                     std::vector<std::vector<ItemId>> sequences) const {
  if (names.size() != sequences.size()) {
    throw Error(ErrorCode::kInvalidArgument, "append: names and sequences disagree in length");
  }
  auto users = user_names_;
  auto seqs = sequences_;
  auto hold = holdout_;
  for (std::size_t k = 0; k < names.size(); ++k) {
    users.push_back(std::move(names[k]));
    seqs.push_back(std::move(sequences[k]));
    hold.push_back(0);
  }
  return Dataset(std::move(users), item_names_, std::move(seqs), std::move(hold));
}

InteractionLog Dataset::to_log() const {
  InteractionLog log;
  for (std::size_t u = 0; u < sequences_.size(); ++u) {
    for (std::size_t p = 0; p < sequences_[u].size(); ++p) {
      log.records.push_back({user_names_[u], item_names_[sequences_[u][p]], static_cast<std::int64_t>(p)});
    }
  }
  return log;
}

json Dataset::to_json() const {
  return json{{"version", kDatasetSnapshotVersion},
              {"users", user_names_},
              {"items", item_names_},
              {"sequences", sequences_},
              {"holdout", holdout_}};
}

Dataset Dataset::from_json(const json& j) {
  if (j.value("version", 0) != kDatasetSnapshotVersion) {
    throw Error(ErrorCode::kParse, "dataset snapshot: unsupported version");
  }
  return Dataset(j.at("users").get<std::vector<std::string>>(),
                 j.at("items").get<std::vector<std::string>>(),
                 j.at("sequences").get<std::vector<std::vector<ItemId>>>(),
                 j.at("holdout").get<std::vector<std::uint8_t>>());
}

void Dataset::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << to_json().dump() << '\n';
}

Dataset Dataset::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

Dataset build_dataset(const InteractionLog& input, int min_user_acts, int min_item_acts) {
  if (input.records.empty()) throw Error(ErrorCode::kEmpty, "empty dataset: no interactions");

  auto records = input.records;
  deduplicate(records);

  // Intern raw ids in input order.
  std::unordered_map<std::string, int> user_ix, item_ix;
  std::vector<std::string> user_raw, item_raw;
  struct Act {
    int user, item;
    std::int64_t ts;
    std::size_t order;
  };
  std::vector<Act> acts;
  acts.reserve(records.size());
  for (std::size_t k = 0; k < records.size(); ++k) {
    const auto& r = records[k];
    auto [ui, unew] = user_ix.try_emplace(r.user, static_cast<int>(user_raw.size()));
    if (unew) user_raw.push_back(r.user);
    auto [ii, inew] = item_ix.try_emplace(r.item, static_cast<int>(item_raw.size()));
    if (inew) item_raw.push_back(r.item);
    acts.push_back({ui->second, ii->second, r.timestamp, k});
  }

  const int user_floor = std::max(min_user_acts, 3);
  std::vector<char> user_alive(user_raw.size(), 1), item_alive(item_raw.size(), 1);
  for (bool changed = true; changed;) {
    changed = false;
    std::vector<int> ucount(user_raw.size(), 0), icount(item_raw.size(), 0);
    for (const auto& a : acts) {
      if (user_alive[a.user] && item_alive[a.item]) {
        ++ucount[a.user];
        ++icount[a.item];
      }
    }
    for (std::size_t u = 0; u < user_alive.size(); ++u) {
      if (user_alive[u] && ucount[u] < user_floor) user_alive[u] = 0, changed = true;
    }
    for (std::size_t i = 0; i < item_alive.size(); ++i) {
      if (item_alive[i] && icount[i] < min_item_acts) item_alive[i] = 0, changed = true;
    }
  }

  std::vector<std::vector<Act>> per_user(user_raw.size());
  for (const auto& a : acts) {
    if (user_alive[a.user] && item_alive[a.item]) per_user[a.user].push_back(a);
  }

  std::vector<std::string> user_names, item_names;
  std::vector<std::vector<ItemId>> sequences;
  std::vector<int> item_dense(item_raw.size(), -1);
  for (std::size_t u = 0; u < per_user.size(); ++u) {
    auto& seq = per_user[u];
    if (seq.empty()) continue;
    std::stable_sort(seq.begin(), seq.end(),
                     [](const Act& a, const Act& b) { return a.ts < b.ts; });
    std::vector<ItemId> items;
    items.reserve(seq.size());
    for (const auto& a : seq) {
      if (item_dense[a.item] < 0) {
        item_dense[a.item] = static_cast<int>(item_names.size());
        item_names.push_back(item_raw[a.item]);
      }
      items.push_back(item_dense[a.item]);
    }
    user_names.push_back(user_raw[u]);
    sequences.push_back(std::move(items));
  }
  if (user_names.empty()) {
    throw Error(ErrorCode::kEmpty, "empty dataset: every user was filtered out");
  }
  std::vector<std::uint8_t> holdout(user_names.size(), 2);
  return Dataset(std::move(user_names), std::move(item_names), std::move(sequences),
                 std::move(holdout));
}

// ---------------------------------------------------------------------------

json TargetSpec::to_json() const { return json{{"items", items}, {"users", users}}; }

TargetSpec TargetSpec::from_json(const json& j) {
  return TargetSpec{j.at("items").get<std::vector<ItemId>>(),
                    j.at("users").get<std::vector<UserId>>()};
}

TargetSpec select_targets(const Dataset& ds, std::size_t n_items, std::size_t n_users,
                          std::uint64_t seed) {
  if (n_items > ds.num_items() || n_users > ds.num_users()) {
    throw Error(ErrorCode::kInvalidArgument, "select_targets: requested more targets than exist");
  }
  Rng rng(derive_seed(seed, "select_targets"));

  const auto pop = ds.item_popularity();
  std::vector<ItemId> order(ds.num_items());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](ItemId a, ItemId b) { return pop[a] > pop[b]; });
  const std::size_t top_quartile = (order.size() + 3) / 4;
  std::vector<ItemId> eligible(order.begin() + static_cast<std::ptrdiff_t>(top_quartile), order.end());
  if (eligible.size() < n_items) {
    spdlog::info("select_targets: lower quartiles hold {} items < {}; using whole catalog",
                 eligible.size(), n_items);
    eligible = order;
  }
  std::sort(eligible.begin(), eligible.end());
  std::shuffle(eligible.begin(), eligible.end(), rng);
  TargetSpec spec;
  spec.items.assign(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(n_items));
  std::sort(spec.items.begin(), spec.items.end());

  if (n_users == 0) return spec;
  std::vector<UserId> users;
  for (std::size_t u = 0; u < ds.num_users(); ++u) {
    const auto uid = static_cast<UserId>(u);
    if (!ds.has_holdout(uid)) continue;
    bool clean = std::none_of(spec.items.begin(), spec.items.end(),
                              [&](ItemId i) { return ds.in_train(uid, i); });
    if (clean) users.push_back(uid);
  }
  if (users.empty()) throw Error(ErrorCode::kEmpty, "select_targets: no eligible target users");
  if (users.size() < n_users) {
    throw Error(ErrorCode::kInvalidArgument,
                "select_targets: only " + std::to_string(users.size()) + " eligible target users");
  }
  std::shuffle(users.begin(), users.end(), rng);
  spec.users.assign(users.begin(), users.begin() + static_cast<std::ptrdiff_t>(n_users));
  std::sort(spec.users.begin(), spec.users.end());
  return spec;
}

}  // namespace poisonforge
