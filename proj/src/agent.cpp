#include "poisonforge/agent.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <spdlog/spdlog.h>

namespace poisonforge {

using Eigen::VectorXd;
using nlohmann::json;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMat = Eigen::Map<const RowMat>;
using Mat = Eigen::Map<RowMat>;
using ConstVec = Eigen::Map<const VectorXd>;
using Vec = Eigen::Map<VectorXd>;

VectorXd sigmoid(const VectorXd& x) { return (1.0 + (-x.array()).exp()).inverse().matrix(); }

struct StepCache {
  VectorXd x, h_prev, z, r, n;
};

}  // namespace

QNetwork::QNetwork(int actions, int embed_dim, int hidden_dim)
    : actions_(actions), de_(embed_dim), dh_(hidden_dim) {
  if (actions < 1 || embed_dim < 1 || hidden_dim < 1) {
    throw Error(ErrorCode::kInvalidArgument, "q-network dimensions must be positive");
  }
  params_ = VectorXd::Zero(static_cast<Eigen::Index>(bo_offset() + actions_));
}

QNetwork QNetwork::random(int actions, int embed_dim, int hidden_dim, std::uint64_t seed) {
  QNetwork net(actions, embed_dim, hidden_dim);
  Rng rng(derive_seed(seed, "qnet-init"));
  auto fill = [&](std::size_t offset, std::size_t count, double fan_in) {
    std::uniform_real_distribution<double> u(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
    for (std::size_t k = 0; k < count; ++k) net.params_[offset + k] = u(rng);
  };
  const std::size_t de = embed_dim, dh = hidden_dim, a = actions;
  fill(net.embed_offset(), a * de, 1.0);
  for (std::size_t off : {net.wz_offset(), net.wr_offset(), net.wn_offset()}) {
    fill(off, dh * de, de);
    fill(off + dh * de, dh * dh, dh);
    fill(off + dh * de + dh * dh, dh, dh);
  }
  fill(net.wo_offset(), a * dh, dh);
  fill(net.bo_offset(), a, dh);
  return net;
}

void QNetwork::check_state(std::span<const int> state) const {
  for (int a : state) {
    if (a < 0 || a >= actions_) throw Error(ErrorCode::kInvalidArgument, "q-network: action id out of range");
  }
}

VectorXd QNetwork::encode(std::span<const int> state) const {
  check_state(state);
  const double* p = params_.data();
  ConstMat E(p + embed_offset(), actions_, de_);
  ConstMat Wz(p + wz_offset(), dh_, de_), Uz(p + uz_offset(), dh_, dh_);
  ConstMat Wr(p + wr_offset(), dh_, de_), Ur(p + ur_offset(), dh_, dh_);
  ConstMat Wn(p + wn_offset(), dh_, de_), Un(p + un_offset(), dh_, dh_);
  ConstVec bz(p + bz_offset(), dh_), br(p + br_offset(), dh_), bn(p + bn_offset(), dh_);
  VectorXd h = VectorXd::Zero(dh_);
  for (int a : state) {
    const VectorXd x = E.row(a).transpose();
    const VectorXd z = sigmoid(Wz * x + Uz * h + bz);
    const VectorXd r = sigmoid(Wr * x + Ur * h + br);
    const VectorXd n = (Wn * x + Un * r.cwiseProduct(h) + bn).array().tanh().matrix();
    h = (1.0 - z.array()).matrix().cwiseProduct(n) + z.cwiseProduct(h);
  }
  return h;
}

VectorXd QNetwork::forward(std::span<const int> state) const {
  const VectorXd h = encode(state);
  const double* p = params_.data();
  return ConstMat(p + wo_offset(), actions_, dh_) * h + ConstVec(p + bo_offset(), actions_);
}

double QNetwork::add_td_grad(std::span<const int> state, int action, double target, double w,
                             VectorXd& out) const {
  check_state(state);
  if (action < 0 || action >= actions_) throw Error(ErrorCode::kInvalidArgument, "q-network: action out of range");
  const double* p = params_.data();
  ConstMat E(p + embed_offset(), actions_, de_);
  ConstMat Wz(p + wz_offset(), dh_, de_), Uz(p + uz_offset(), dh_, dh_);
  ConstMat Wr(p + wr_offset(), dh_, de_), Ur(p + ur_offset(), dh_, dh_);
  ConstMat Wn(p + wn_offset(), dh_, de_), Un(p + un_offset(), dh_, dh_);
  ConstVec bz(p + bz_offset(), dh_), br(p + br_offset(), dh_), bn(p + bn_offset(), dh_);
  ConstMat Wo(p + wo_offset(), actions_, dh_);

  std::vector<StepCache> steps;
  steps.reserve(state.size());
  VectorXd h = VectorXd::Zero(dh_);
  for (int a : state) {
    StepCache c;
    c.x = E.row(a).transpose();
    c.h_prev = h;
    c.z = sigmoid(Wz * c.x + Uz * h + bz);
    c.r = sigmoid(Wr * c.x + Ur * h + br);
    c.n = (Wn * c.x + Un * c.r.cwiseProduct(h) + bn).array().tanh().matrix();
    h = (1.0 - c.z.array()).matrix().cwiseProduct(c.n) + c.z.cwiseProduct(h);
    steps.push_back(std::move(c));
  }
  const double q = Wo.row(action).dot(h) + params_[bo_offset() + action];
  const double g = -2.0 * (target - q) * w;
  if (g == 0.0) return q;

  double* o = out.data();
  Mat gE(o + embed_offset(), actions_, de_);
  Mat gWz(o + wz_offset(), dh_, de_), gUz(o + uz_offset(), dh_, dh_);
  Mat gWr(o + wr_offset(), dh_, de_), gUr(o + ur_offset(), dh_, dh_);
  Mat gWn(o + wn_offset(), dh_, de_), gUn(o + un_offset(), dh_, dh_);
  Vec gbz(o + bz_offset(), dh_), gbr(o + br_offset(), dh_), gbn(o + bn_offset(), dh_);
  Mat gWo(o + wo_offset(), actions_, dh_);

  gWo.row(action) += g * h.transpose();
  out[bo_offset() + action] += g;
  VectorXd dh = g * Wo.row(action).transpose();
  for (std::size_t t = steps.size(); t-- > 0;) {
    const auto& c = steps[t];
    const VectorXd dz = dh.cwiseProduct(c.h_prev - c.n);
    const VectorXd dn = dh.cwiseProduct((1.0 - c.z.array()).matrix());
    VectorXd dh_prev = dh.cwiseProduct(c.z);

    const VectorXd dan = dn.cwiseProduct((1.0 - c.n.array().square()).matrix());
    const VectorXd rh = c.r.cwiseProduct(c.h_prev);
    gWn += dan * c.x.transpose();
    gUn += dan * rh.transpose();
    gbn += dan;
    const VectorXd drh = Un.transpose() * dan;
    const VectorXd dr = drh.cwiseProduct(c.h_prev);
    dh_prev += drh.cwiseProduct(c.r);

    const VectorXd daz = dz.cwiseProduct(c.z.cwiseProduct((1.0 - c.z.array()).matrix()));
    gWz += daz * c.x.transpose();
    gUz += daz * c.h_prev.transpose();
    gbz += daz;
    dh_prev += Uz.transpose() * daz;

    const VectorXd dar = dr.cwiseProduct(c.r.cwiseProduct((1.0 - c.r.array()).matrix()));
    gWr += dar * c.x.transpose();
    gUr += dar * c.h_prev.transpose();
    gbr += dar;
    dh_prev += Ur.transpose() * dar;

    gE.row(state[t]) += (Wz.transpose() * daz + Wr.transpose() * dar + Wn.transpose() * dan).transpose();
    dh = std::move(dh_prev);
  }
  return q;
}

VectorXd QNetwork::td_grad(std::span<const int> state, int action, double target) const {
  VectorXd g = VectorXd::Zero(params_.size());
  add_td_grad(state, action, target, 1.0, g);
  return g;
}

json QNetwork::to_json() const {
  return json{{"actions", actions_},
              {"embed_dim", de_},
              {"hidden_dim", dh_},
              {"params", std::vector<double>(params_.data(), params_.data() + params_.size())}};
}

QNetwork QNetwork::from_json(const json& j) {
  QNetwork net(j.at("actions").get<int>(), j.at("embed_dim").get<int>(), j.at("hidden_dim").get<int>());
  const auto p = j.at("params").get<std::vector<double>>();
  if (p.size() != net.param_dim()) throw Error(ErrorCode::kParse, "q-network: parameter count mismatch");
  net.params_ = Eigen::Map<const VectorXd>(p.data(), static_cast<Eigen::Index>(p.size()));
  return net;
}

int argmax_action(const VectorXd& values) {
  int best = 0;
  for (int a = 1; a < values.size(); ++a) {
    if (values[a] > values[best]) best = a;
  }
  return best;
}

int select_action(const QNetwork& net, std::span<const int> state, double epsilon, Rng& rng) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw Error(ErrorCode::kInvalidArgument, "epsilon must be in [0, 1]");
  if (epsilon > 0.0 && std::uniform_real_distribution<double>(0.0, 1.0)(rng) < epsilon) {
    return std::uniform_int_distribution<int>(0, net.num_actions() - 1)(rng);
  }
  return argmax_action(net.forward(state));
}

// ---------------------------------------------------------------------------

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw Error(ErrorCode::kInvalidArgument, "replay capacity must be positive");
}

void ReplayBuffer::push(Transition t) {
  if (items_.size() == capacity_) items_.pop_front();
  items_.push_back(std::move(t));
}

std::vector<const Transition*> ReplayBuffer::sample_balanced(std::size_t batch, Rng& rng) const {
  std::vector<const Transition*> out;
  if (items_.empty()) return out;
  std::vector<double> rewards;
  rewards.reserve(items_.size());
  for (const auto& t : items_) rewards.push_back(t.reward);
  const std::size_t q = (3 * rewards.size()) / 4;
  std::nth_element(rewards.begin(), rewards.begin() + static_cast<std::ptrdiff_t>(q), rewards.end());
  const double threshold = rewards[q];
  std::vector<std::size_t> top;
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (items_[i].reward >= threshold) top.push_back(i);
  }
  std::uniform_int_distribution<std::size_t> any(0, items_.size() - 1);
  std::uniform_int_distribution<std::size_t> any_top(0, top.size() - 1);
  const std::size_t half = batch / 2;
  for (std::size_t k = 0; k < batch; ++k) {
    out.push_back(&items_[k < half ? top[any_top(rng)] : any(rng)]);
  }
  return out;
}

// ---------------------------------------------------------------------------

double InfluenceReward::step_reward(std::size_t slot, std::span<const ItemId> items, std::span<const int>) {
  return estimator_.step_influence(slot, items) / scale_;
}

double InfluenceReward::calibrate(const ItemGroups& groups, int horizon, int rollouts, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "reward-calibration"));
  std::uniform_int_distribution<int> any(0, static_cast<int>(groups.size()) - 1);
  double total = 0.0;
  std::size_t count = 0;
  for (int k = 0; k < rollouts; ++k) {
    std::vector<ItemId> items;
    for (int t = 0; t < horizon; ++t) {
      items.push_back(groups.sample_item(any(rng), items, rng).item);
      total += std::abs(estimator_.step_influence(static_cast<std::size_t>(k), items));
      ++count;
    }
  }
  const double mean = count ? total / static_cast<double>(count) : 0.0;
  scale_ = mean > 0.0 && std::isfinite(mean) ? mean : 1.0;
  spdlog::info("reward scale calibrated to {:.4g} over {} random steps", scale_, count);
  return scale_;
}

// ---------------------------------------------------------------------------

void DqnConfig::validate() const {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw Error(ErrorCode::kInvalidArgument, "dqn: gamma must be in [0, 1]");
  if (!(epsilon_end <= epsilon_start) || epsilon_end < 0.0 || epsilon_start > 1.0) {
    throw Error(ErrorCode::kInvalidArgument, "dqn: require 0 <= epsilon_end <= epsilon_start <= 1");
  }
  if (sync_period < 1) throw Error(ErrorCode::kInvalidArgument, "dqn: sync_period must be >= 1");
  if (replay_capacity < 1 || batch_size < 1 || epochs < 1 || episodes_per_epoch < 0 ||
      updates_per_epoch < 0 || horizon < 1 || embed_dim < 1 || hidden_dim < 1) {
    throw Error(ErrorCode::kInvalidArgument, "dqn: sizes out of range");
  }
  if (!(learning_rate > 0.0) || !(grad_clip > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "dqn: learning_rate and grad_clip must be positive");
  }
}

json DqnConfig::to_json() const {
  return json{{"gamma", gamma},
              {"epsilon_start", epsilon_start},
              {"epsilon_end", epsilon_end},
              {"sync_period", sync_period},
              {"replay_capacity", replay_capacity},
              {"batch_size", batch_size},
              {"learning_rate", learning_rate},
              {"grad_clip", grad_clip},
              {"epochs", epochs},
              {"episodes_per_epoch", episodes_per_epoch},
              {"updates_per_epoch", updates_per_epoch},
              {"horizon", horizon},
              {"embed_dim", embed_dim},
              {"hidden_dim", hidden_dim},
              {"seed", seed}};
}

DqnConfig DqnConfig::from_json(const json& j) { return from_json(j, DqnConfig{}); }

DqnConfig DqnConfig::from_json(const json& j, DqnConfig c) {
  c.gamma = j.value("gamma", c.gamma);
  c.epsilon_start = j.value("epsilon_start", c.epsilon_start);
  c.epsilon_end = j.value("epsilon_end", c.epsilon_end);
  c.sync_period = j.value("sync_period", c.sync_period);
  c.replay_capacity = j.value("replay_capacity", c.replay_capacity);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.epochs = j.value("epochs", c.epochs);
  c.episodes_per_epoch = j.value("episodes_per_epoch", c.episodes_per_epoch);
  c.updates_per_epoch = j.value("updates_per_epoch", c.updates_per_epoch);
  c.horizon = j.value("horizon", c.horizon);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.seed = j.value("seed", c.seed);
  return c;
}

// ---------------------------------------------------------------------------

GeneratedSequences generate_poison_sequences(const QNetwork& net, const ItemGroups& groups,
                                             std::size_t n_users, int m_actions, std::uint64_t seed,
                                             bool greedy, double epsilon, RewardModel* reward) {
  if (m_actions < 1) throw Error(ErrorCode::kInvalidArgument, "m_actions must be >= 1");
  if (static_cast<std::size_t>(net.num_actions()) != groups.size()) {
    throw Error(ErrorCode::kInvalidArgument, "q-network action count does not match the item groups");
  }
  GeneratedSequences out;
  for (std::size_t k = 0; k < n_users; ++k) {
    Rng rng(derive_seed(seed, "controlled-user/" + std::to_string(k)));
    std::vector<ItemId> items;
    std::vector<int> actions, drawn;
    std::vector<double> rewards;
    for (int t = 0; t < m_actions; ++t) {
      const int a = select_action(net, actions, greedy ? 0.0 : epsilon, rng);
      const auto s = groups.sample_item(a, items, rng);
      out.fallbacks += s.fallback ? 1 : 0;
      actions.push_back(a);
      items.push_back(s.item);
      drawn.push_back(s.group);
      if (reward) rewards.push_back(reward->step_reward(k, items, drawn));
    }
    out.items.push_back(std::move(items));
    out.actions.push_back(std::move(actions));
    out.groups.push_back(std::move(drawn));
    out.rewards.push_back(std::move(rewards));
  }
  return out;
}

// ---------------------------------------------------------------------------

DqnTrainer::DqnTrainer(const ItemGroups& groups, RewardModel& reward, DqnConfig cfg)
    : groups_(groups),
      reward_(reward),
      cfg_(cfg),
      buffer_((cfg.validate(), cfg.replay_capacity)),
      rng_(derive_seed(cfg.seed, "dqn")) {
  if (groups.size() == 0) throw Error(ErrorCode::kEmpty, "dqn: empty action space");
  policy_ = QNetwork::random(static_cast<int>(groups.size()), cfg_.embed_dim, cfg_.hidden_dim, cfg_.seed);
  target_ = policy_;
}

double DqnTrainer::epsilon(int epoch) const {
  if (cfg_.epochs <= 1) return cfg_.epsilon_start;
  const double frac = std::clamp(static_cast<double>(epoch) / (cfg_.epochs - 1), 0.0, 1.0);
  return cfg_.epsilon_start + (cfg_.epsilon_end - cfg_.epsilon_start) * frac;
}

double DqnTrainer::update(std::span<const Transition* const> batch) {
  if (batch.empty()) return 0.0;
  VectorXd grad = VectorXd::Zero(static_cast<Eigen::Index>(policy_.param_dim()));
  const double w = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (const Transition* t : batch) {
    double y = t->reward;
    if (!t->terminal && cfg_.gamma > 0.0) y += cfg_.gamma * target_.forward(t->next_state).maxCoeff();
    const double q = policy_.add_td_grad(t->state, t->action, y, w, grad);
    loss += w * (y - q) * (y - q);
  }
  if (!std::isfinite(loss) || !grad.allFinite()) {
    throw Error(ErrorCode::kNumeric, "dqn: non-finite TD loss at epoch " + std::to_string(epoch_));
  }
  const double norm = grad.norm();
  if (norm > cfg_.grad_clip) grad *= cfg_.grad_clip / norm;
  policy_.mutable_parameters() -= cfg_.learning_rate * grad;
  return loss;
}

void DqnTrainer::run_epoch() {
  DqnEpochLog entry;
  entry.epoch = epoch_;
  entry.epsilon = epsilon(epoch_);

  double reward_sum = 0.0;
  std::size_t steps = 0;
  for (int e = 0; e < cfg_.episodes_per_epoch; ++e) {
    std::vector<ItemId> items;
    std::vector<int> actions, drawn;
    for (int t = 0; t < cfg_.horizon; ++t) {
      const int a = select_action(policy_, actions, entry.epsilon, rng_);
      const auto s = groups_.sample_item(a, items, rng_);
      entry.fallbacks += s.fallback ? 1 : 0;
      items.push_back(s.item);
      drawn.push_back(s.group);
      const double r = reward_.step_reward(static_cast<std::size_t>(e), items, drawn);
      Transition tr;
      tr.state = actions;
      tr.action = a;
      tr.reward = r;
      actions.push_back(a);
      tr.next_state = actions;
      tr.terminal = t + 1 == cfg_.horizon;
      buffer_.push(std::move(tr));
      reward_sum += r;
      ++steps;
    }
  }
  entry.mean_reward = steps ? reward_sum / static_cast<double>(steps) : 0.0;

  double loss_sum = 0.0;
  for (int k = 0; k < cfg_.updates_per_epoch; ++k) {
    const auto batch = buffer_.sample_balanced(cfg_.batch_size, rng_);
    loss_sum += update(batch);
  }
  entry.td_loss = cfg_.updates_per_epoch > 0 ? loss_sum / cfg_.updates_per_epoch : 0.0;

  if ((epoch_ + 1) % cfg_.sync_period == 0) target_ = policy_;
  spdlog::debug("dqn epoch {}: eps {:.3f} reward {:.4g} td {:.4g}", entry.epoch, entry.epsilon,
                entry.mean_reward, entry.td_loss);
  log_.push_back(entry);
  ++epoch_;
}

void DqnTrainer::train() {
  while (epoch_ < cfg_.epochs) run_epoch();
}

// ---------------------------------------------------------------------------

json TrainedAgent::to_json() const {
  json log_j = json::array();
  for (const auto& e : log) {
    log_j.push_back({{"epoch", e.epoch},
                     {"epsilon", e.epsilon},
                     {"mean_reward", e.mean_reward},
                     {"td_loss", e.td_loss},
                     {"fallbacks", e.fallbacks}});
  }
  return json{{"version", 1}, {"config", config.to_json()}, {"network", net.to_json()}, {"log", log_j}};
}

TrainedAgent TrainedAgent::from_json(const json& j) {
  try {
    if (j.at("version").get<int>() != 1) throw Error(ErrorCode::kParse, "unsupported agent checkpoint version");
    TrainedAgent a;
    a.config = DqnConfig::from_json(j.at("config"));
    a.net = QNetwork::from_json(j.at("network"));
    for (const auto& e : j.value("log", json::array())) {
      a.log.push_back({e.at("epoch").get<int>(), e.at("epsilon").get<double>(), e.at("mean_reward").get<double>(),
                       e.at("td_loss").get<double>(), e.at("fallbacks").get<std::size_t>()});
    }
    return a;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("malformed agent checkpoint: ") + e.what());
  }
}

void TrainedAgent::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << to_json().dump() << '\n';
}

TrainedAgent TrainedAgent::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
  }
}

void TrainedAgent::write_log_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << "epoch,epsilon,mean_reward,td_loss,fallbacks\n";
  out.precision(10);
  for (const auto& e : log) {
    out << e.epoch << ',' << e.epsilon << ',' << e.mean_reward << ',' << e.td_loss << ',' << e.fallbacks << '\n';
  }
}

TrainedAgent train_dqn(const ItemGroups& groups, RewardModel& reward, const DqnConfig& cfg) {
  DqnTrainer trainer(groups, reward, cfg);
  trainer.train();
  return TrainedAgent{trainer.policy(), cfg, trainer.log()};
}

}  // namespace poisonforge
