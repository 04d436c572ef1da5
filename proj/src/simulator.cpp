#include "poisonforge/simulator.hpp"

#include <algorithm>
#include <numeric>

namespace poisonforge {

void Ensemble::validate() const {
  if (members.empty()) throw Error(ErrorCode::kInvalidArgument, "ensemble has no members");
  if (weights.size() != members.size()) {
    throw Error(ErrorCode::kInvalidArgument, "ensemble weights do not match members");
  }
  for (const auto& m : members) {
    if (!m) throw Error(ErrorCode::kInvalidArgument, "ensemble member is null");
  }
  if (std::any_of(weights.begin(), weights.end(), [](double w) { return !(w >= 0.0); })) {
    throw Error(ErrorCode::kInvalidArgument, "ensemble weights must be non-negative");
  }
  if (total_weight() <= 0.0) throw Error(ErrorCode::kInvalidArgument, "ensemble weights are all zero");
}

double Ensemble::total_weight() const { return std::accumulate(weights.begin(), weights.end(), 0.0); }

std::vector<RankedItem> aggregate_rank_scores(const std::vector<std::vector<double>>& member_scores,
                                              std::span<const double> weights,
                                              std::span<const ItemId> pool) {
  if (pool.empty()) throw Error(ErrorCode::kInvalidArgument, "aggregate_ranks: empty candidate pool");
  const std::size_t n = pool.size();
  std::vector<double> total(n, 0.0);
  std::vector<std::size_t> order(n);
  for (std::size_t m = 0; m < member_scores.size(); ++m) {
    const auto& s = member_scores[m];
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return s[a] > s[b] || (s[a] == s[b] && pool[a] < pool[b]);
    });
    for (std::size_t r = 0; r < n; ++r) total[order[r]] += weights[m] * static_cast<double>(r + 1);
  }
  const double inv_m = 1.0 / static_cast<double>(member_scores.size());
  std::vector<RankedItem> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = {pool[k], -inv_m * total[k]};
  std::sort(out.begin(), out.end(), [](const RankedItem& a, const RankedItem& b) {
    return a.score > b.score || (a.score == b.score && a.item < b.item);
  });
  return out;
}

std::vector<RankedItem> aggregate_ranks(const Ensemble& ens, UserId u, std::span<const ItemId> history,
                                        std::span<const ItemId> pool) {
  ens.validate();
  std::vector<std::vector<double>> scores;
  std::vector<double> all;
  for (const auto& m : ens.members) {
    all.resize(m->num_items());
    m->score_all(u, history, all);
    std::vector<double> s(pool.size());
    for (std::size_t k = 0; k < pool.size(); ++k) s[k] = all.at(static_cast<std::size_t>(pool[k]));
    scores.push_back(std::move(s));
  }
  return aggregate_rank_scores(scores, ens.weights, pool);
}

std::vector<RankedItem> aggregate_ranks(const Ensemble& ens, UserId u, std::span<const ItemId> history) {
  ens.validate();
  std::vector<char> seen(ens.members.front()->num_items(), 0);
  for (ItemId i : history) seen.at(static_cast<std::size_t>(i)) = 1;
  std::vector<ItemId> pool;
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) pool.push_back(static_cast<ItemId>(i));
  }
  return aggregate_ranks(ens, u, history, pool);
}

}  // namespace poisonforge
