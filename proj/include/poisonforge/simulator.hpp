#pragma once

#include <memory>
#include <span>
#include <vector>

#include "poisonforge/recmodels.hpp"

namespace poisonforge {

/// Attacker-side recommender simulator: locally trained models combined by weighted rank voting.
struct Ensemble {
  std::vector<std::shared_ptr<const Recommender>> members;
  std::vector<double> weights;

  /// Throws unless there is at least one member, weights match members, are >= 0 and not all zero.
  void validate() const;
  double total_weight() const;
};

struct RankedItem {
  ItemId item = kNoItem;
  double score = 0.0;
};

/// score(i) = -(1/M) sum_m w_m * rank_m(i), where rank_m is the 1-based position of i in member
/// m's descending-score order over `pool` (ties by ascending item index). Output is sorted by
/// descending score, ties by ascending item index.
std::vector<RankedItem> aggregate_ranks(const Ensemble& ens, UserId u, std::span<const ItemId> history,
                                        std::span<const ItemId> pool);

/// Same, with the default pool: the full catalog minus `history`.
std::vector<RankedItem> aggregate_ranks(const Ensemble& ens, UserId u, std::span<const ItemId> history);

/// Core of aggregate_ranks on precomputed member scores: member_scores[m][k] scores pool[k].
std::vector<RankedItem> aggregate_rank_scores(const std::vector<std::vector<double>>& member_scores,
                                              std::span<const double> weights,
                                              std::span<const ItemId> pool);

}  // namespace poisonforge
