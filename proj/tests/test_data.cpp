#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>
#include <sstream>

#include "poisonforge/data.hpp"
#include "support.hpp"

using namespace poisonforge;

namespace {

InteractionLog parse_csv(const std::string& text) {
  std::istringstream in(text);
  return parse_interactions(in, LogFormat::kCsv);
}

InteractionLog log_from(const std::vector<std::pair<std::string, std::vector<std::string>>>& users) {
  InteractionLog log;
  std::int64_t ts = 0;
  for (const auto& [u, items] : users) {
    for (const auto& i : items) log.records.push_back({u, i, ts++});
  }
  return log;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kRuntime;
}

}  // namespace

TEST_CASE("csv parsing skips malformed lines") {
  auto log = parse_csv("user,item,timestamp\nu1,a,10\nu1,b\nu2,a,11\n");
  CHECK(log.records.size() == 2);
  CHECK(log.skipped == 1);
  CHECK(log.records[1].user == "u2");
  CHECK(log.records[1].timestamp == 11);
}

TEST_CASE("empty input gives an empty log") {
  auto log = parse_csv("");
  CHECK(log.records.empty());
  CHECK(log.skipped == 0);
}

TEST_CASE("csv rejects non-integer timestamps and extra fields") {
  auto log = parse_csv("u1,a,1.5\nu1,a,2,3\nu1,a,x\n,a,1\nu1,a,7\n");
  CHECK(log.records.size() == 1);
  CHECK(log.skipped == 4);
}

TEST_CASE("jsonl parsing accepts string and integer ids") {
  std::istringstream in(R"({"user": "u1", "item": 7, "ts": 3}
{"user": 5, "item": "x", "ts": 4}
{"user": "u1", "item": "y"}
not json
{"user": "u1", "item": "z", "ts": "soon"}
)");
  auto log = parse_interactions(in, LogFormat::kJsonl);
  REQUIRE(log.records.size() == 2);
  CHECK(log.skipped == 3);
  CHECK(log.records[0].item == "7");
  CHECK(log.records[1].user == "5");
}

TEST_CASE("exact duplicates are dropped, repeats at other timestamps kept") {
  auto log = parse_csv("u,a,1\nu,a,1\nu,a,2\n");
  CHECK(log.records.size() == 2);
  CHECK(log.duplicates == 1);
}

TEST_CASE("unknown log format is rejected") {
  CHECK(code_of([] { parse_log_format("xml"); }) == ErrorCode::kInvalidArgument);
  CHECK(parse_log_format("jsonl") == LogFormat::kJsonl);
}

TEST_CASE("missing log file is an io error") {
  CHECK(code_of([] { ingest_interactions("/nonexistent/log.csv", LogFormat::kCsv); }) == ErrorCode::kIo);
}

TEST_CASE("short users are filtered while items stay supported") {
  std::vector<std::string> six{"i1", "i2", "i3", "i4", "i5", "i6"};
  auto log = log_from({{"A", six}, {"B", {"i1", "i2"}}, {"C", six}, {"D", six}, {"E", six}, {"F", six}});
  auto ds = build_dataset(log);
  CHECK(ds.num_users() == 5);
  for (std::size_t u = 0; u < ds.num_users(); ++u) CHECK(ds.user_name(static_cast<UserId>(u)) != "B");
  CHECK(ds.user_name(0) == "A");
  CHECK(ds.num_items() == 6);
}

TEST_CASE("a user with exactly five actions survives with three training items") {
  std::vector<std::string> five{"a", "b", "c", "d", "e"};
  auto ds = build_dataset(log_from({{"u1", five}, {"u2", five}, {"u3", five}, {"u4", five}, {"u5", five}}));
  REQUIRE(ds.num_users() == 5);
  CHECK(ds.train(0).size() == 3);
  CHECK(ds.validation(0) == *ds.find_item("d"));
  CHECK(ds.test(0) == *ds.find_item("e"));
}

TEST_CASE("filtering everything away is an empty-dataset error") {
  CHECK(code_of([] { build_dataset(InteractionLog{}); }) == ErrorCode::kEmpty);
  CHECK(code_of([] { build_dataset(log_from({{"u", {"a", "b"}}})); }) == ErrorCode::kEmpty);
}

TEST_CASE("sequences are chronological with ties in input order") {
  InteractionLog log;
  for (int u = 0; u < 5; ++u) {
    const std::string name = "u" + std::to_string(u);
    log.records.push_back({name, "c", 30});
    log.records.push_back({name, "a", 10});
    log.records.push_back({name, "b", 20});
    log.records.push_back({name, "e", 20});
    log.records.push_back({name, "d", 5});
  }
  auto ds = build_dataset(log);
  std::vector<std::string> seq;
  for (ItemId i : ds.sequence(0)) seq.push_back(ds.item_name(i));
  CHECK(seq == std::vector<std::string>{"d", "a", "b", "e", "c"});
}

TEST_CASE("dense ids follow first appearance in chronological user order") {
  std::vector<std::string> five{"q", "p", "r", "s", "t"};
  auto ds = build_dataset(log_from({{"z", five}, {"y", five}, {"x", five}, {"w", five}, {"v", five}}));
  CHECK(ds.user_name(0) == "z");
  CHECK(ds.item_name(0) == "q");
  CHECK(ds.item_name(1) == "p");
}

TEST_CASE("filter matches a brute-force fixpoint oracle") {
  // Skewed random log where removals cascade over several rounds.
  Rng rng(99);
  InteractionLog log;
  std::int64_t ts = 0;
  std::vector<double> weights;
  for (int i = 0; i < 300; ++i) weights.push_back(1.0 / (1.0 + i * 0.2));
  std::discrete_distribution<int> item_dist(weights.begin(), weights.end());
  std::uniform_int_distribution<int> len(1, 12);
  for (int u = 0; u < 500; ++u) {
    std::set<int> chosen;
    const int n = len(rng);
    while (static_cast<int>(chosen.size()) < n) chosen.insert(item_dist(rng));
    for (int i : chosen) log.records.push_back({"u" + std::to_string(u), "i" + std::to_string(i), ts++});
  }

  // Oracle: drop under-threshold users and items until nothing changes.
  std::set<std::string> users, items;
  for (const auto& r : log.records) users.insert(r.user), items.insert(r.item);
  int rounds = 0;
  for (bool changed = true; changed; ++rounds) {
    changed = false;
    std::map<std::string, int> uc, ic;
    for (const auto& r : log.records) {
      if (users.count(r.user) && items.count(r.item)) ++uc[r.user], ++ic[r.item];
    }
    for (auto it = users.begin(); it != users.end();) {
      if (uc[*it] < 5) it = users.erase(it), changed = true;
      else ++it;
    }
    for (auto it = items.begin(); it != items.end();) {
      if (ic[*it] < 5) it = items.erase(it), changed = true;
      else ++it;
    }
  }
  CHECK(rounds > 2);

  auto ds = build_dataset(log);
  std::set<std::string> got_users, got_items;
  for (std::size_t u = 0; u < ds.num_users(); ++u) got_users.insert(ds.user_name(static_cast<UserId>(u)));
  for (std::size_t i = 0; i < ds.num_items(); ++i) got_items.insert(ds.item_name(static_cast<ItemId>(i)));
  CHECK(got_users == users);
  CHECK(got_items == items);
  for (std::size_t u = 0; u < ds.num_users(); ++u) {
    std::vector<std::string> expected;
    for (const auto& r : log.records) {
      if (r.user == ds.user_name(static_cast<UserId>(u)) && items.count(r.item)) expected.push_back(r.item);
    }
    std::vector<std::string> got;
    for (ItemId i : ds.sequence(static_cast<UserId>(u))) got.push_back(ds.item_name(i));
    CHECK(got == expected);
  }
}

TEST_CASE("rebuilding a built dataset is the identity") {
  SyntheticConfig sc;
  sc.users = 300;
  sc.items = 120;
  sc.seed = 4;
  auto ds = build_dataset(synthesize_log(sc));
  CHECK(build_dataset(ds.to_log()) == ds);
}

TEST_CASE("train, validation and test partition every sequence") {
  SyntheticConfig sc;
  sc.users = 200;
  sc.items = 80;
  auto ds = build_dataset(synthesize_log(sc));
  for (std::size_t u = 0; u < ds.num_users(); ++u) {
    const auto uid = static_cast<UserId>(u);
    std::vector<ItemId> joined(ds.train(uid).begin(), ds.train(uid).end());
    joined.push_back(ds.validation(uid));
    joined.push_back(ds.test(uid));
    CHECK(joined == std::vector<ItemId>(ds.sequence(uid).begin(), ds.sequence(uid).end()));
    CHECK(ds.sequence(uid).size() >= 5);
  }
  for (auto c : ds.item_popularity()) CHECK(c >= 1);
}

TEST_CASE("snapshot round trip") {
  SyntheticConfig sc;
  sc.users = 60;
  sc.items = 30;
  auto ds = build_dataset(synthesize_log(sc));
  auto path = std::filesystem::temp_directory_path() / "pf_test_snapshot.json";
  ds.save(path);
  CHECK(Dataset::load(path) == ds);
  std::filesystem::remove(path);
}

TEST_CASE("appended users are training-only") {
  auto ds = pftest::make_dataset({{0, 1, 2, 3, 4}}, 5, true);
  auto more = ds.with_appended_users({"c0"}, {{4, 3}});
  CHECK(more.num_users() == 2);
  CHECK_FALSE(more.has_holdout(1));
  CHECK(more.train(1).size() == 2);
  CHECK(more.train(0).size() == 3);
}

TEST_CASE("synthetic generator is deterministic") {
  SyntheticConfig sc;
  sc.users = 50;
  sc.items = 40;
  sc.seed = 12;
  auto a = synthesize_log(sc);
  auto b = synthesize_log(sc);
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t k = 0; k < a.records.size(); ++k) {
    CHECK(a.records[k].item == b.records[k].item);
  }
}

TEST_CASE("target selection") {
  SyntheticConfig sc;
  sc.users = 400;
  sc.items = 150;
  auto ds = build_dataset(synthesize_log(sc));

  SUBCASE("sizes, determinism and disjointness") {
    auto t = select_targets(ds, 20, 20, 5);
    CHECK(t.items.size() == 20);
    CHECK(t.users.size() == 20);
    CHECK(select_targets(ds, 20, 20, 5) == t);
    for (UserId u : t.users) {
      for (ItemId i : t.items) CHECK_FALSE(ds.in_train(u, i));
    }
  }

  SUBCASE("targets come from outside the top popularity quartile") {
    auto pop = ds.item_popularity();
    auto sorted = pop;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    const auto top_cut = sorted[(sorted.size() + 3) / 4 - 1];
    for (int seed = 0; seed < 10; ++seed) {
      auto t = select_targets(ds, 20, 5, static_cast<std::uint64_t>(seed));
      for (ItemId i : t.items) CHECK(pop[i] <= top_cut);
    }
  }

  SUBCASE("requesting too much is rejected") {
    CHECK(code_of([&] { select_targets(ds, ds.num_items() + 1, 1, 1); }) == ErrorCode::kInvalidArgument);
  }
}

TEST_CASE("whole-catalog targets under uniform popularity") {
  // Every user consumes every item except one, so popularity is flat.
  std::vector<std::vector<ItemId>> seqs;
  for (int u = 0; u < 8; ++u) {
    std::vector<ItemId> s;
    for (int i = 0; i < 8; ++i) {
      if (i != u) s.push_back(i);
    }
    seqs.push_back(s);
  }
  auto ds = pftest::make_dataset(seqs, 8, true);
  auto t = select_targets(ds, 8, 0, 3);
  CHECK(t.items.size() == 8);
  CHECK(t.users.empty());
}
