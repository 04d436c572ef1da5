#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "poisonforge/actionspace.hpp"
#include "poisonforge/agent.hpp"
#include "poisonforge/data.hpp"

namespace poisonforge {

enum class AttackKind { kNone, kRandom, kPopular, kLoki };

std::string_view to_string(AttackKind kind);
AttackKind parse_attack_kind(std::string_view name);

/// Controlled users' behavior sequences, one per injected user.
struct InjectedSequences {
  AttackKind provenance = AttackKind::kNone;
  std::vector<std::vector<ItemId>> sequences;

  std::vector<std::string> user_names() const;
  /// One JSON object per line: {"user", "items" (external item names), "provenance"}.
  void save_jsonl(const std::filesystem::path& path, const Dataset& ds) const;
  static InjectedSequences load_jsonl(const std::filesystem::path& path, const Dataset& ds);
};

/// round(fraction * users).
std::size_t controlled_user_count(std::size_t users, double fraction);

/// Per user: a repository of the targets plus uniformly drawn fillers up to repo_size, from which
/// m_actions distinct items are drawn in random order.
InjectedSequences random_attack(const Dataset& ds, const TargetSpec& targets, std::size_t n_users,
                                int m_actions, std::size_t repo_size, std::uint64_t seed);

/// Alternates the most popular non-target items with the targets (round-robin, starting at a
/// per-user offset), beginning with a popular item. Exhausted targets are replaced by the next
/// popular item.
InjectedSequences popular_attack(const Dataset& ds, const TargetSpec& targets, std::size_t n_users,
                                 int m_actions);

/// Greedy rollouts of the trained agent.
InjectedSequences loki_attack(const QNetwork& net, const ItemGroups& groups, std::size_t n_users,
                              int m_actions, std::uint64_t seed);

}  // namespace poisonforge
