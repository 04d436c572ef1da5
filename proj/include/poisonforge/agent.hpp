#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "poisonforge/actionspace.hpp"
#include "poisonforge/influence.hpp"

namespace poisonforge {

/// Action-value network: action embeddings, a GRU over the action sequence, linear head.
///
/// Layout of the flat parameter vector (all matrices row-major):
///   E (A x de), W_z (dh x de), U_z (dh x dh), b_z, W_r, U_r, b_r, W_n, U_n, b_n, W_o (A x dh), b_o (A)
/// with z = sig(W_z x + U_z h + b_z), r = sig(W_r x + U_r h + b_r),
/// n = tanh(W_n x + U_n (r * h) + b_n), h' = (1 - z) * n + z * h, Q = W_o h_T + b_o.
class QNetwork {
 public:
  QNetwork() = default;
  QNetwork(int actions, int embed_dim, int hidden_dim);

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
  static QNetwork random(int actions, int embed_dim, int hidden_dim, std::uint64_t seed);

  int num_actions() const { return actions_; }
  int embed_dim() const { return de_; }
  int hidden_dim() const { return dh_; }
  std::size_t param_dim() const { return static_cast<std::size_t>(params_.size()); }
  const Eigen::VectorXd& parameters() const { return params_; }
  Eigen::VectorXd& mutable_parameters() { return params_; }

  std::size_t embed_offset() const { return 0; }
  std::size_t wz_offset() const { return embed_offset() + actions_ * de_; }
  std::size_t uz_offset() const { return wz_offset() + dh_ * de_; }
  std::size_t bz_offset() const { return uz_offset() + dh_ * dh_; }
  std::size_t wr_offset() const { return bz_offset() + dh_; }
  std::size_t ur_offset() const { return wr_offset() + dh_ * de_; }
  std::size_t br_offset() const { return ur_offset() + dh_ * dh_; }
  std::size_t wn_offset() const { return br_offset() + dh_; }
  std::size_t un_offset() const { return wn_offset() + dh_ * de_; }
  std::size_t bn_offset() const { return un_offset() + dh_ * dh_; }
  std::size_t wo_offset() const { return bn_offset() + dh_; }
  std::size_t bo_offset() const { return wo_offset() + actions_ * dh_; }

  /// Final hidden state for an action sequence (zero for an empty one).
  Eigen::VectorXd encode(std::span<const int> state) const;
  /// Action values, one per group.
  Eigen::VectorXd forward(std::span<const int> state) const;

  /// out += w * d/dtheta (target - Q(s, a))^2 by backpropagation through time. Returns Q(s, a).
  double add_td_grad(std::span<const int> state, int action, double target, double w,
                     Eigen::VectorXd& out) const;
  Eigen::VectorXd td_grad(std::span<const int> state, int action, double target) const;

  nlohmann::json to_json() const;
  static QNetwork from_json(const nlohmann::json& j);

  friend bool operator==(const QNetwork& a, const QNetwork& b) {
    return a.actions_ == b.actions_ && a.de_ == b.de_ && a.dh_ == b.dh_ && a.params_ == b.params_;
  }

 private:
  void check_state(std::span<const int> state) const;

  int actions_ = 0;
  int de_ = 0;
  int dh_ = 0;
  Eigen::VectorXd params_;
};

/// Argmax with ties to the lowest index.
int argmax_action(const Eigen::VectorXd& values);

/// Epsilon-greedy action for state s.
int select_action(const QNetwork& net, std::span<const int> state, double epsilon, Rng& rng);

struct Transition {
  std::vector<int> state;
  int action = 0;
  double reward = 0.0;
  std::vector<int> next_state;
  bool terminal = false;
};

/// Fixed-capacity replay memory with oldest-first eviction.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  void push(Transition t);
  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  /// i-th transition, oldest first.
  const Transition& at(std::size_t i) const { return items_.at(i); }

  /// Half of the batch drawn uniformly from the top reward quartile, the rest uniformly from all.
  std::vector<const Transition*> sample_balanced(std::size_t batch, Rng& rng) const;

 private:
  std::size_t capacity_;
  std::deque<Transition> items_;
};

/// Per-step reward for appending items.back() (drawn from group groups.back()) to controlled user `slot`.
class RewardModel {
 public:
  virtual ~RewardModel() = default;
  virtual double step_reward(std::size_t slot, std::span<const ItemId> items, std::span<const int> groups) = 0;
};

/// Influence-estimated per-step reward, divided by a fixed scale.
class InfluenceReward final : public RewardModel {
 public:
  explicit InfluenceReward(const InfluenceEstimator& estimator, double scale = 1.0)
      : estimator_(estimator), scale_(scale) {}

  double step_reward(std::size_t slot, std::span<const ItemId> items, std::span<const int> groups) override;

  double scale() const { return scale_; }
  /// Sets the scale to the mean |reward| of uniformly random rollouts (1 if that is zero).
  double calibrate(const ItemGroups& groups, int horizon, int rollouts, std::uint64_t seed);

 private:
  const InfluenceEstimator& estimator_;
  double scale_;
};

struct DqnConfig {
  double gamma = 0.9;
  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  int sync_period = 5;
  std::size_t replay_capacity = 20000;
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  double grad_clip = 5.0;
  int epochs = 60;
  int episodes_per_epoch = 30;
  int updates_per_epoch = 30;
  int horizon = 15;
  int embed_dim = 16;
  int hidden_dim = 32;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static DqnConfig from_json(const nlohmann::json& j);
  static DqnConfig from_json(const nlohmann::json& j, DqnConfig defaults);
};

struct DqnEpochLog {
  int epoch = 0;
  double epsilon = 0.0;
  double mean_reward = 0.0;  // per step
  double td_loss = 0.0;      // mean over the epoch's updates
  std::size_t fallbacks = 0;
};

struct GeneratedSequences {
  std::vector<std::vector<ItemId>> items;
  std::vector<std::vector<int>> actions;      // groups chosen by the policy
  std::vector<std::vector<int>> groups;       // groups the items were drawn from
  std::vector<std::vector<double>> rewards;   // filled only when a reward model is supplied
  std::size_t fallbacks = 0;
};

/// Rolls out m_actions group actions per controlled user and samples one item per step, never
/// repeating an item within a user. Each user has its own RNG stream derived from `seed`.
GeneratedSequences generate_poison_sequences(const QNetwork& net, const ItemGroups& groups,
                                             std::size_t n_users, int m_actions, std::uint64_t seed,
                                             bool greedy, double epsilon = 0.0,
                                             RewardModel* reward = nullptr);

/// Replay-generation / update loop with a periodically synchronized target network.
class DqnTrainer {
 public:
  DqnTrainer(const ItemGroups& groups, RewardModel& reward, DqnConfig cfg);

  double epsilon(int epoch) const;
  /// One generation stage followed by one update stage.
  void run_epoch();
  void train();
  /// One SGD step on the batch; returns the mean TD loss before the step.
  double update(std::span<const Transition* const> batch);

  int epoch() const { return epoch_; }
  const QNetwork& policy() const { return policy_; }
  const QNetwork& target() const { return target_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  const std::vector<DqnEpochLog>& log() const { return log_; }
  const DqnConfig& config() const { return cfg_; }

 private:
  const ItemGroups& groups_;
  RewardModel& reward_;
  DqnConfig cfg_;
  QNetwork policy_;
  QNetwork target_;
  ReplayBuffer buffer_;
  Rng rng_;
  int epoch_ = 0;
  std::vector<DqnEpochLog> log_;
};

struct TrainedAgent {
  QNetwork net;
  DqnConfig config;
  std::vector<DqnEpochLog> log;

  nlohmann::json to_json() const;
  static TrainedAgent from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static TrainedAgent load(const std::filesystem::path& path);
  void write_log_csv(const std::filesystem::path& path) const;
};

TrainedAgent train_dqn(const ItemGroups& groups, RewardModel& reward, const DqnConfig& cfg);

}  // namespace poisonforge
