#include <doctest.h>

#include "poisonforge/simulator.hpp"
#include "support.hpp"

using namespace poisonforge;

namespace {

std::vector<ItemId> items_of(const std::vector<RankedItem>& ranked) {
  std::vector<ItemId> out;
  for (const auto& r : ranked) out.push_back(r.item);
  return out;
}

Ensemble random_ensemble(std::size_t members, std::size_t items, Rng& rng) {
  Ensemble ens;
  ModelHyper h;
  h.dim = 3;
  std::uniform_real_distribution<double> w(0.1, 3.0);
  for (std::size_t m = 0; m < members; ++m) {
    const auto kind = m % 2 ? ModelKind::kFpmc : ModelKind::kBprmf;
    ens.members.push_back(make_model(kind, 4, items, h, rng()));
    ens.weights.push_back(w(rng));
  }
  return ens;
}

}  // namespace

TEST_CASE("opposite orders with equal weights tie") {
  // Member 0 prefers item 0, member 1 prefers item 1.
  std::vector<std::vector<double>> s{{2.0, 1.0}, {1.0, 2.0}};
  std::vector<double> w{1.0, 1.0};
  std::vector<ItemId> pool{0, 1};
  auto out = aggregate_rank_scores(s, w, pool);
  CHECK(out[0].score == doctest::Approx(-1.5));
  CHECK(out[1].score == doctest::Approx(-1.5));
  CHECK(items_of(out) == std::vector<ItemId>{0, 1});
}

TEST_CASE("heavier member wins") {
  std::vector<std::vector<double>> s{{2.0, 1.0}, {1.0, 2.0}};
  std::vector<double> w{2.0, 1.0};
  std::vector<ItemId> pool{0, 1};
  auto out = aggregate_rank_scores(s, w, pool);
  CHECK(items_of(out) == std::vector<ItemId>{0, 1});
  CHECK(out[0].score == doctest::Approx(-2.0));
  CHECK(out[1].score == doctest::Approx(-2.5));
}

TEST_CASE("empty pool is rejected") {
  std::vector<std::vector<double>> s{{}};
  std::vector<double> w{1.0};
  CHECK_THROWS_AS(aggregate_rank_scores(s, w, {}), Error);
}

TEST_CASE("ensemble validation") {
  Ensemble ens;
  CHECK_THROWS_AS(ens.validate(), Error);
  Rng rng(1);
  ens = random_ensemble(2, 5, rng);
  ens.weights = {0.0, 0.0};
  CHECK_THROWS_AS(ens.validate(), Error);
  ens.weights = {1.0, -1.0};
  CHECK_THROWS_AS(ens.validate(), Error);
  ens.weights = {1.0};
  CHECK_THROWS_AS(ens.validate(), Error);
}

TEST_CASE("a single member reproduces its own top-k") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    auto ens = random_ensemble(1, 30, rng);
    std::vector<ItemId> hist{static_cast<ItemId>(trial % 30), 3};
    auto ranked = items_of(aggregate_ranks(ens, 1, hist));
    auto direct = top_k(*ens.members[0], 1, hist, 10, true).items;
    ranked.resize(10);
    CHECK(ranked == direct);
  }
}

TEST_CASE("rescaling all weights keeps the order") {
  Rng rng(8);
  std::uniform_real_distribution<double> lambda(0.01, 100.0);
  for (int trial = 0; trial < 100; ++trial) {
    auto ens = random_ensemble(3, 25, rng);
    std::vector<ItemId> hist{1, 2};
    auto before = items_of(aggregate_ranks(ens, 0, hist));
    const double l = lambda(rng);
    for (auto& w : ens.weights) w *= l;
    CHECK(items_of(aggregate_ranks(ens, 0, hist)) == before);
  }
}

TEST_CASE("permuting members with their weights keeps the output") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    auto ens = random_ensemble(3, 20, rng);
    auto before = aggregate_ranks(ens, 2, {});
    std::swap(ens.members[0], ens.members[2]);
    std::swap(ens.weights[0], ens.weights[2]);
    auto after = aggregate_ranks(ens, 2, {});
    CHECK(items_of(after) == items_of(before));
    for (std::size_t k = 0; k < after.size(); ++k) CHECK(after[k].score == doctest::Approx(before[k].score));
  }
}

TEST_CASE("worse member rank never raises the aggregate score") {
  Rng rng(10);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<double>> s(2, std::vector<double>(8));
    for (auto& row : s) {
      for (auto& x : row) x = u(rng);
    }
    std::vector<double> w{1.0, 0.5};
    std::vector<ItemId> pool{0, 1, 2, 3, 4, 5, 6, 7};
    auto score_of = [&](const std::vector<RankedItem>& r, ItemId i) {
      for (const auto& x : r) {
        if (x.item == i) return x.score;
      }
      return 0.0;
    };
    auto base = aggregate_rank_scores(s, w, pool);
    // Demote item 3 in member 0 to the bottom.
    auto demoted = s;
    demoted[0][3] = -1.0;
    CHECK(score_of(aggregate_rank_scores(demoted, w, pool), 3) <= score_of(base, 3));
  }
}

TEST_CASE("default pool skips the history") {
  Rng rng(2);
  auto ens = random_ensemble(2, 10, rng);
  std::vector<ItemId> hist{4, 7};
  auto out = aggregate_ranks(ens, 0, hist);
  CHECK(out.size() == 8);
  for (const auto& r : out) CHECK((r.item != 4 && r.item != 7));
}
