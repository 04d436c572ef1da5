#include "poisonforge/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace poisonforge {

using nlohmann::json;

std::string_view to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::kNone: return "none";
    case AttackKind::kRandom: return "random";
    case AttackKind::kPopular: return "popular";
    case AttackKind::kLoki: return "loki";
  }
  return "none";
}

AttackKind parse_attack_kind(std::string_view name) {
  if (name == "none") return AttackKind::kNone;
  if (name == "random") return AttackKind::kRandom;
  if (name == "popular") return AttackKind::kPopular;
  if (name == "loki") return AttackKind::kLoki;
  throw Error(ErrorCode::kInvalidArgument, "unknown attack '" + std::string(name) + "'");
}

std::vector<std::string> InjectedSequences::user_names() const {
  std::vector<std::string> names;
  for (std::size_t k = 0; k < sequences.size(); ++k) {
    names.push_back("controlled-" + std::string(to_string(provenance)) + "-" + std::to_string(k));
  }
  return names;
}

void InjectedSequences::save_jsonl(const std::filesystem::path& path, const Dataset& ds) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  const auto names = user_names();
  for (std::size_t k = 0; k < sequences.size(); ++k) {
    std::vector<std::string> items;
    for (ItemId i : sequences[k]) items.push_back(ds.item_name(i));
    out << json{{"user", names[k]}, {"items", items}, {"provenance", to_string(provenance)}}.dump() << '\n';
  }
}

InjectedSequences InjectedSequences::load_jsonl(const std::filesystem::path& path, const Dataset& ds) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  InjectedSequences out;
  out.provenance = AttackKind::kNone;
  std::string line;
  std::size_t line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      const auto kind = parse_attack_kind(j.at("provenance").get<std::string>());
      if (first) out.provenance = kind;
      first = false;
      std::vector<ItemId> seq;
      for (const auto& name : j.at("items")) {
        const auto id = ds.find_item(name.get<std::string>());
        if (!id) throw Error(ErrorCode::kParse, "unknown item '" + name.get<std::string>() + "'");
        seq.push_back(*id);
      }
      out.sequences.push_back(std::move(seq));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kParse, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(e.code(), path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::size_t controlled_user_count(std::size_t users, double fraction) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "controlled-user fraction must be in [0, 1]");
  }
  return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(users)));
}

namespace {

void check_budget(const TargetSpec& targets, int m_actions) {
  if (m_actions < 1) throw Error(ErrorCode::kInvalidArgument, "m_actions must be >= 1");
  if (targets.items.empty()) throw Error(ErrorCode::kEmpty, "attack: no target items");
}

}  // namespace

InjectedSequences random_attack(const Dataset& ds, const TargetSpec& targets, std::size_t n_users,
                                int m_actions, std::size_t repo_size, std::uint64_t seed) {
  check_budget(targets, m_actions);
  if (repo_size < static_cast<std::size_t>(m_actions)) {
    throw Error(ErrorCode::kInvalidArgument, "random attack: repo_size must be >= m_actions");
  }
  if (repo_size > ds.num_items()) {
    throw Error(ErrorCode::kInvalidArgument, "random attack: repo_size exceeds the catalog");
  }
  std::vector<bool> is_target(ds.num_items(), false);
  for (ItemId i : targets.items) is_target.at(i) = true;
  std::vector<ItemId> fillers;
  for (std::size_t i = 0; i < ds.num_items(); ++i) {
    if (!is_target[i]) fillers.push_back(static_cast<ItemId>(i));
  }

  InjectedSequences out;
  out.provenance = AttackKind::kRandom;
  for (std::size_t k = 0; k < n_users; ++k) {
    Rng rng(derive_seed(seed, "random-attack/" + std::to_string(k)));
    std::vector<ItemId> repo = targets.items;
    std::sort(repo.begin(), repo.end());
    repo.erase(std::unique(repo.begin(), repo.end()), repo.end());
    if (repo.size() > repo_size) {
      std::shuffle(repo.begin(), repo.end(), rng);
      repo.resize(repo_size);
    }
    std::vector<ItemId> pool = fillers;
    std::shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t f = 0; repo.size() < repo_size && f < pool.size(); ++f) repo.push_back(pool[f]);
    std::shuffle(repo.begin(), repo.end(), rng);
    repo.resize(static_cast<std::size_t>(m_actions));
    out.sequences.push_back(std::move(repo));
  }
  return out;
}

InjectedSequences popular_attack(const Dataset& ds, const TargetSpec& targets, std::size_t n_users,
                                 int m_actions) {
  check_budget(targets, m_actions);
  std::vector<ItemId> uniq = targets.items;
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  std::vector<bool> is_target(ds.num_items(), false);
  for (ItemId i : uniq) is_target.at(i) = true;

  const auto pop = ds.item_popularity();
  std::vector<ItemId> popular;
  for (std::size_t i = 0; i < ds.num_items(); ++i) {
    if (!is_target[i]) popular.push_back(static_cast<ItemId>(i));
  }
  std::stable_sort(popular.begin(), popular.end(), [&](ItemId a, ItemId b) { return pop[a] > pop[b]; });

  InjectedSequences out;
  out.provenance = AttackKind::kPopular;
  const std::size_t m = static_cast<std::size_t>(m_actions);
  for (std::size_t k = 0; k < n_users; ++k) {
    std::vector<ItemId> seq;
    std::size_t next_popular = 0;
    std::size_t targets_used = 0;
    const std::size_t offset = k % uniq.size();
    while (seq.size() < m) {
      const bool target_slot = seq.size() % 2 == 1 && targets_used < uniq.size();
      if (target_slot) {
        seq.push_back(uniq[(offset + targets_used++) % uniq.size()]);
      } else if (next_popular < popular.size()) {
        seq.push_back(popular[next_popular++]);
      } else if (targets_used < uniq.size()) {
        seq.push_back(uniq[(offset + targets_used++) % uniq.size()]);
      } else {
        break;
      }
    }
    out.sequences.push_back(std::move(seq));
  }
  return out;
}

InjectedSequences loki_attack(const QNetwork& net, const ItemGroups& groups, std::size_t n_users,
                              int m_actions, std::uint64_t seed) {
  if (groups.size() == 0 || groups.kind(0) != GroupKind::kTarget) {
    throw Error(ErrorCode::kEmpty, "loki attack: action space has no target group");
  }
  auto gen = generate_poison_sequences(net, groups, n_users, m_actions, seed, /*greedy=*/true);
  InjectedSequences out;
  out.provenance = AttackKind::kLoki;
  out.sequences = std::move(gen.items);
  return out;
}

}  // namespace poisonforge
