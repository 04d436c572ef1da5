#include <doctest.h>

#include <filesystem>
#include <set>

#include "poisonforge/agent.hpp"
#include "support.hpp"

using namespace poisonforge;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Straightforward GRU forward pass written against the documented parameter layout.
VectorXd reference_forward(const QNetwork& net, const std::vector<int>& state) {
  const int a = net.num_actions(), de = net.embed_dim(), dh = net.hidden_dim();
  const VectorXd& p = net.parameters();
  auto mat = [&](std::size_t off, int rows, int cols) {
    MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) m(r, c) = p[static_cast<Eigen::Index>(off) + r * cols + c];
    }
    return m;
  };
  auto vec = [&](std::size_t off, int n) { return VectorXd(p.segment(static_cast<Eigen::Index>(off), n)); };
  auto sig = [](const VectorXd& x) { return VectorXd((1.0 / (1.0 + (-x.array()).exp())).matrix()); };
  const MatrixXd e = mat(net.embed_offset(), a, de);
  VectorXd h = VectorXd::Zero(dh);
  for (int act : state) {
    const VectorXd x = e.row(act).transpose();
    const VectorXd z = sig(mat(net.wz_offset(), dh, de) * x + mat(net.uz_offset(), dh, dh) * h + vec(net.bz_offset(), dh));
    const VectorXd r = sig(mat(net.wr_offset(), dh, de) * x + mat(net.ur_offset(), dh, dh) * h + vec(net.br_offset(), dh));
    const VectorXd n = (mat(net.wn_offset(), dh, de) * x + mat(net.un_offset(), dh, dh) * r.cwiseProduct(h) +
                        vec(net.bn_offset(), dh)).array().tanh().matrix();
    h = (VectorXd::Ones(dh) - z).cwiseProduct(n) + z.cwiseProduct(h);
  }
  return mat(net.wo_offset(), a, dh) * h + vec(net.bo_offset(), a);
}

// Reward 1 whenever the item came from group `good`.
class GroupReward final : public RewardModel {
 public:
  explicit GroupReward(int good) : good_(good) {}
  double step_reward(std::size_t, std::span<const ItemId>, std::span<const int> groups) override {
    return groups.back() == good_ ? 1.0 : 0.0;
  }

 private:
  int good_;
};

ItemGroups many_items(int groups, int per_group) {
  std::vector<std::vector<ItemId>> g(static_cast<std::size_t>(groups));
  std::vector<GroupKind> kinds;
  ItemId next = 0;
  for (int k = 0; k < groups; ++k) {
    for (int j = 0; j < per_group; ++j) g[static_cast<std::size_t>(k)].push_back(next++);
    kinds.push_back(k == 0 ? GroupKind::kTarget : GroupKind::kCluster);
  }
  return ItemGroups(g, kinds);
}

DqnConfig small_dqn() {
  DqnConfig cfg;
  cfg.gamma = 0.0;
  cfg.epochs = 40;
  cfg.episodes_per_epoch = 10;
  cfg.updates_per_epoch = 30;
  cfg.horizon = 6;
  cfg.embed_dim = 4;
  cfg.hidden_dim = 6;
  cfg.learning_rate = 0.05;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("zero network returns the output bias") {
  QNetwork net(4, 3, 5);
  auto& p = net.mutable_parameters();
  p.setZero();
  for (int a = 0; a < 4; ++a) p[static_cast<Eigen::Index>(net.bo_offset()) + a] = 0.5 * a;
  std::vector<int> s{1, 3, 0};
  const VectorXd q = net.forward(s);
  for (int a = 0; a < 4; ++a) CHECK(q[a] == doctest::Approx(0.5 * a));
  CHECK(net.encode(std::vector<int>{}).norm() == 0.0);
}

TEST_CASE("forward matches a reference GRU") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto net = QNetwork::random(5, 3, 4, seed);
    Rng rng(seed);
    std::uniform_int_distribution<int> act(0, 4);
    std::vector<int> s(1 + seed % 6);
    for (auto& a : s) a = act(rng);
    CHECK(pftest::rel_error(net.forward(s), reference_forward(net, s)) <= 1e-12);
  }
}

TEST_CASE("td gradient matches central differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto net = QNetwork::random(4, 3, 3, seed);
    Rng rng(seed + 100);
    std::uniform_int_distribution<int> act(0, 3);
    std::vector<int> s(seed % 5);
    for (auto& a : s) a = act(rng);
    const int action = act(rng);
    const double target = 0.7;
    auto loss = [&](const VectorXd& theta) {
      QNetwork copy = net;
      copy.mutable_parameters() = theta;
      const double q = copy.forward(s)[action];
      return (target - q) * (target - q);
    };
    const VectorXd numeric = pftest::fd_gradient(loss, net.parameters());
    CHECK(pftest::rel_error(net.td_grad(s, action, target), numeric) <= 1e-4);
  }
}

TEST_CASE("td gradient is zero when the target equals Q") {
  auto net = QNetwork::random(3, 2, 2, 1);
  std::vector<int> s{0, 2};
  const double q = net.forward(s)[1];
  CHECK(net.td_grad(s, 1, q).norm() <= 1e-14);
}

TEST_CASE("td gradient of the empty state touches only the head bias") {
  auto net = QNetwork::random(3, 2, 2, 1);
  const VectorXd g = net.td_grad(std::vector<int>{}, 2, 5.0);
  for (Eigen::Index k = 0; k < g.size(); ++k) {
    if (k == static_cast<Eigen::Index>(net.bo_offset()) + 2) CHECK(g[k] != 0.0);
    else CHECK(g[k] == 0.0);
  }
}

TEST_CASE("invalid states are rejected") {
  auto net = QNetwork::random(3, 2, 2, 1);
  CHECK_THROWS_AS(net.forward(std::vector<int>{3}), Error);
  CHECK_THROWS_AS(net.forward(std::vector<int>{-1}), Error);
}

TEST_CASE("network json round trip") {
  auto net = QNetwork::random(3, 2, 4, 8);
  CHECK(QNetwork::from_json(net.to_json()) == net);
}

TEST_CASE("argmax ties go to the lowest index") {
  VectorXd v(4);
  v << 1, 3, 3, 2;
  CHECK(argmax_action(v) == 1);
}

TEST_CASE("select_action greedy and uniform") {
  QNetwork net(3, 2, 2);
  net.mutable_parameters().setZero();
  net.mutable_parameters()[static_cast<Eigen::Index>(net.bo_offset()) + 2] = 1.0;
  Rng rng(1);
  for (int k = 0; k < 20; ++k) CHECK(select_action(net, std::vector<int>{}, 0.0, rng) == 2);

  std::vector<std::size_t> counts(3, 0);
  for (int k = 0; k < 9000; ++k) ++counts[static_cast<std::size_t>(select_action(net, std::vector<int>{}, 1.0, rng))];
  // 2 degrees of freedom, p = 0.001 critical value 13.82
  CHECK(pftest::chi_square_uniform(counts) < 13.82);
  CHECK_THROWS_AS(select_action(net, std::vector<int>{}, 1.5, rng), Error);
}

TEST_CASE("replay buffer evicts oldest first") {
  ReplayBuffer buf(3);
  for (int k = 0; k < 5; ++k) {
    Transition t;
    t.action = k;
    buf.push(t);
  }
  CHECK(buf.size() == 3);
  CHECK(buf.at(0).action == 2);
  CHECK(buf.at(2).action == 4);
  CHECK_THROWS_AS(ReplayBuffer(0), Error);
}

TEST_CASE("balanced replay favors high rewards") {
  ReplayBuffer buf(100);
  for (int k = 0; k < 100; ++k) {
    Transition t;
    t.reward = k;
    buf.push(t);
  }
  Rng rng(2);
  std::size_t top = 0, total = 0;
  for (int rep = 0; rep < 200; ++rep) {
    for (const Transition* t : buf.sample_balanced(20, rng)) {
      top += t->reward >= 75 ? 1 : 0;
      ++total;
    }
  }
  // Expected share 1/2 + 1/2 * 1/4.
  const double share = static_cast<double>(top) / static_cast<double>(total);
  CHECK(share == doctest::Approx(0.625).epsilon(0.05));
  CHECK(buf.sample_balanced(20, rng).size() == 20);
}

TEST_CASE("epsilon schedule endpoints") {
  auto groups = many_items(3, 4);
  GroupReward reward(0);
  DqnConfig cfg = small_dqn();
  cfg.epsilon_start = 0.9;
  cfg.epsilon_end = 0.1;
  DqnTrainer trainer(groups, reward, cfg);
  CHECK(trainer.epsilon(0) == doctest::Approx(0.9));
  CHECK(trainer.epsilon(cfg.epochs - 1) == doctest::Approx(0.1));
  CHECK(trainer.epsilon(cfg.epochs / 2) < 0.9);

  cfg.epsilon_end = 0.95;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("target network syncs on the configured period") {
  auto groups = many_items(3, 4);
  GroupReward reward(1);
  DqnConfig cfg = small_dqn();
  cfg.sync_period = 3;
  DqnTrainer trainer(groups, reward, cfg);
  const QNetwork initial = trainer.target();
  trainer.run_epoch();
  trainer.run_epoch();
  CHECK(trainer.target() == initial);
  CHECK_FALSE(trainer.policy() == initial);
  trainer.run_epoch();
  CHECK(trainer.target() == trainer.policy());
  CHECK(trainer.buffer().size() == 3u * cfg.episodes_per_epoch * cfg.horizon);
}

TEST_CASE("agent learns a single rewarding group") {
  auto groups = many_items(5, 30);
  GroupReward reward(3);
  auto agent = train_dqn(groups, reward, small_dqn());
  auto gen = generate_poison_sequences(agent.net, groups, 20, 6, 1, true);
  std::size_t good = 0, total = 0;
  for (const auto& actions : gen.actions) {
    for (int a : actions) {
      good += a == 3 ? 1 : 0;
      ++total;
    }
  }
  CHECK(static_cast<double>(good) / static_cast<double>(total) >= 0.95);
  CHECK(agent.log.back().mean_reward > agent.log.front().mean_reward);
}

TEST_CASE("with gamma zero Q converges to the immediate reward") {
  auto groups = many_items(2, 50);
  GroupReward reward(0);
  DqnConfig cfg = small_dqn();
  cfg.epochs = 80;
  cfg.learning_rate = 0.1;
  auto agent = train_dqn(groups, reward, cfg);
  const VectorXd q = agent.net.forward(std::vector<int>{});
  CHECK(q[0] == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("update lowers the TD loss on a frozen batch") {
  auto groups = many_items(3, 10);
  GroupReward reward(2);
  DqnConfig cfg = small_dqn();
  cfg.learning_rate = 0.01;
  DqnTrainer trainer(groups, reward, cfg);
  trainer.run_epoch();
  std::vector<const Transition*> batch;
  for (std::size_t k = 0; k < 16; ++k) batch.push_back(&trainer.buffer().at(k));
  const double before = trainer.update(batch);
  const double after = trainer.update(batch);
  CHECK(after < before);
}

TEST_CASE("generation falls back when the chosen group runs out") {
  ItemGroups groups({{0}, {1, 2, 3, 4}}, {GroupKind::kTarget, GroupKind::kCluster});
  QNetwork net(2, 2, 2);
  net.mutable_parameters().setZero();
  net.mutable_parameters()[static_cast<Eigen::Index>(net.bo_offset())] = 1.0;
  auto gen = generate_poison_sequences(net, groups, 2, 4, 5, true);
  REQUIRE(gen.items.size() == 2);
  for (std::size_t u = 0; u < 2; ++u) {
    CHECK(gen.items[u][0] == 0);
    CHECK(gen.actions[u] == std::vector<int>{0, 0, 0, 0});
    CHECK(gen.groups[u] == std::vector<int>{0, 1, 1, 1});
    std::set<ItemId> distinct(gen.items[u].begin(), gen.items[u].end());
    CHECK(distinct.size() == 4);
  }
  CHECK(gen.fallbacks == 6);
}

TEST_CASE("generation and training are deterministic") {
  auto groups = many_items(4, 10);
  GroupReward r1(1), r2(1);
  DqnConfig cfg = small_dqn();
  cfg.epochs = 5;
  auto a = train_dqn(groups, r1, cfg);
  auto b = train_dqn(groups, r2, cfg);
  CHECK(a.net == b.net);
  auto g1 = generate_poison_sequences(a.net, groups, 5, 6, 9, false, 0.3);
  auto g2 = generate_poison_sequences(a.net, groups, 5, 6, 9, false, 0.3);
  CHECK(g1.items == g2.items);
}

TEST_CASE("trained agent save and load") {
  auto groups = many_items(3, 5);
  GroupReward reward(0);
  DqnConfig cfg = small_dqn();
  cfg.epochs = 2;
  auto agent = train_dqn(groups, reward, cfg);
  auto path = std::filesystem::temp_directory_path() / "pf_test_agent.json";
  agent.save(path);
  auto back = TrainedAgent::load(path);
  CHECK(back.net == agent.net);
  CHECK(back.log.size() == 2);
  CHECK(back.config.horizon == cfg.horizon);
  std::filesystem::remove(path);
}
