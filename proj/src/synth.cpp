#include <algorithm>
#include <cmath>
#include <numeric>

#include "poisonforge/data.hpp"

namespace poisonforge {

using nlohmann::json;

json SyntheticConfig::to_json() const {
  return json{{"users", users},           {"items", items},
              {"topics", topics},         {"min_length", min_length},
              {"max_length", max_length}, {"chain_prob", chain_prob},
              {"topic_focus", topic_focus}, {"zipf_exponent", zipf_exponent},
              {"seed", seed}};
}

SyntheticConfig SyntheticConfig::from_json(const json& j) {
  SyntheticConfig c;
  c.users = j.value("users", c.users);
  c.items = j.value("items", c.items);
  c.topics = j.value("topics", c.topics);
  c.min_length = j.value("min_length", c.min_length);
  c.max_length = j.value("max_length", c.max_length);
  c.chain_prob = j.value("chain_prob", c.chain_prob);
  c.topic_focus = j.value("topic_focus", c.topic_focus);
  c.zipf_exponent = j.value("zipf_exponent", c.zipf_exponent);
  c.seed = j.value("seed", c.seed);
  return c;
}

InteractionLog synthesize_log(const SyntheticConfig& cfg) {
  if (cfg.users < 1 || cfg.items < cfg.topics || cfg.topics < 1 || cfg.min_length < 1 ||
      cfg.max_length < cfg.min_length) {
    throw Error(ErrorCode::kInvalidArgument, "synthetic config out of range");
  }
  Rng rng(derive_seed(cfg.seed, "synthetic"));

  // Topic k owns a contiguous block of a shuffled catalog.
  std::vector<int> perm(cfg.items);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<int>> topic_items(cfg.topics);
  for (int k = 0; k < cfg.items; ++k) topic_items[k % cfg.topics].push_back(perm[k]);

  std::vector<int> successor(cfg.items);
  std::vector<std::discrete_distribution<int>> topic_pick;
  for (auto& members : topic_items) {
    auto cycle = members;
    std::shuffle(cycle.begin(), cycle.end(), rng);
    for (std::size_t k = 0; k < cycle.size(); ++k) successor[cycle[k]] = cycle[(k + 1) % cycle.size()];
    std::vector<double> w(members.size());
    for (std::size_t r = 0; r < w.size(); ++r) w[r] = 1.0 / std::pow(r + 1.0, cfg.zipf_exponent);
    topic_pick.emplace_back(w.begin(), w.end());
  }

  std::uniform_int_distribution<int> any_topic(0, cfg.topics - 1);
  std::uniform_int_distribution<int> any_item(0, cfg.items - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::geometric_distribution<int> extra_length(1.0 / 6.0);

  InteractionLog log;
  for (int u = 0; u < cfg.users; ++u) {
    std::vector<int> topics{any_topic(rng)};
    if (unit(rng) < 0.3) topics.push_back(any_topic(rng));
    const int length = std::min(cfg.max_length, cfg.min_length + extra_length(rng));

    auto draw_topical = [&] {
      const auto& members = topic_items[topics[rng() % topics.size()]];
      auto& pick = topic_pick[&members - topic_items.data()];
      return members[pick(rng)];
    };

    std::vector<int> seq;
    int current = draw_topical();
    seq.push_back(current);
    for (int tries = 0; static_cast<int>(seq.size()) < length && tries < 50 * length; ++tries) {
      const double p = unit(rng);
      int next = p < cfg.chain_prob                       ? successor[current]
                 : p < cfg.chain_prob + (1 - cfg.chain_prob) * cfg.topic_focus ? draw_topical()
                                                          : any_item(rng);
      if (std::find(seq.begin(), seq.end(), next) != seq.end()) {
        // Chain hit a repeat: restart from a fresh topical item.
        current = draw_topical();
        continue;
      }
      seq.push_back(next);
      current = next;
    }
    const std::int64_t base = 1'600'000'000 + static_cast<std::int64_t>(u) * 1000;
    for (std::size_t p = 0; p < seq.size(); ++p) {
      log.records.push_back({"u" + std::to_string(u), "i" + std::to_string(seq[p]),
                             base + static_cast<std::int64_t>(p) * 60});
    }
  }
  return log;
}

}  // namespace poisonforge
