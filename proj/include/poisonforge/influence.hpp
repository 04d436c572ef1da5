#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "poisonforge/data.hpp"
#include "poisonforge/recmodels.hpp"
#include "poisonforge/simulator.hpp"

namespace poisonforge {

/// Stochastic LiSSA recursion settings.
struct LissaConfig {
  int depth = 1000;
  double scale = 10.0;  // must dominate the spectral radius of the damped batch Hessian
  int repeats = 4;
  double damping = 0.01;
  int batch = 16;  // a batch >= N uses the exact Hessian at every step
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static LissaConfig from_json(const nlohmann::json& j);
  static LissaConfig from_json(const nlohmann::json& j, LissaConfig defaults);
};

/// A (target user, target item) pair scored against the user's training history.
struct TargetSample {
  UserId user = 0;
  ItemId item = 0;
  std::vector<ItemId> history;
};

/// Cross product of target users and target items.
std::vector<TargetSample> target_samples(const Dataset& ds, const TargetSpec& targets);

/// Approximates (H + damping I)^{-1} v with LiSSA:
/// r <- v + (I - (H_batch + damping I) / scale) r, averaged over repeats and divided by scale.
/// Throws ErrorCode::kNumeric if an iterate exceeds 1e6 * |v|.
Eigen::VectorXd inverse_hvp(const Objective& objective, const Eigen::VectorXd& v,
                            const LissaConfig& cfg);

/// -test_grad^T (H + damping I)^{-1} sample_grad. The solve is applied to test_grad, which
/// equals the textbook ordering because the damped Hessian is symmetric.
double score_influence(const Objective& objective, const Eigen::VectorXd& test_grad,
                       const Eigen::VectorXd& sample_grad, const LissaConfig& cfg);

/// Influence (per unit upweighting) of z_delta on f_test = model.score(t.user, t.history, t.item).
double score_influence(const Recommender& model, const Objective& training,
                       const TrainingSample& z_delta, const TargetSample& t, const LissaConfig& cfg);

/// Samples a controlled user's sequence contributes to `model`, restricted to those created at
/// positions >= from_position. Negatives are a deterministic function of (neg_seed, slot,
/// position) that avoids the items chosen so far; every sample carries the fold-in user vector
/// of the samples created up to its own position.
std::vector<TrainingSample> controlled_samples(const Recommender& model, std::span<const ItemId> seq,
                                               std::uint64_t neg_seed, std::size_t slot,
                                               std::size_t from_position = 0);

struct TargetInfluence {
  std::size_t member = 0;
  UserId user = 0;
  ItemId item = 0;
  double influence = 0.0;
};

/// Outcome estimator over an ensemble with per-member caches.
///
/// For member m the solve s_m = (H_m + damping I)^{-1} mean_t grad f_test(t) is computed once,
/// after which every injected sample costs one sparse dot product: -s_m . grad L(z).
class InfluenceEstimator {
 public:
  InfluenceEstimator(const Ensemble& ens, const Dataset& ds, std::vector<TargetSample> targets,
                     const LissaConfig& cfg, std::uint64_t neg_seed = 0);

  std::size_t num_members() const { return members_.size(); }
  const Ensemble& ensemble() const { return ens_; }
  const std::vector<TargetSample>& targets() const { return targets_; }
  const Eigen::VectorXd& target_direction(std::size_t member) const { return members_[member].solve; }
  std::uint64_t negative_seed() const { return neg_seed_; }

  /// Target-averaged influence of one sample on member m.
  double sample_influence(std::size_t member, const TrainingSample& z) const;

  /// Summed influence of `samples` on member m.
  double member_influence(std::size_t member, std::span<const TrainingSample> samples) const;

  /// Weighted average over members of the summed influence of every decomposed sample.
  double sequence_influence(std::span<const std::vector<ItemId>> seqs) const;

  /// Influence of the samples created by appending seq.back() to controlled user `slot`.
  double step_influence(std::size_t slot, std::span<const ItemId> seq) const;

  /// Per-member, per-target influence of the injected sequences (one solve per target).
  std::vector<TargetInfluence> per_target(std::span<const std::vector<ItemId>> seqs) const;
  void write_diagnostics_csv(const std::filesystem::path& path,
                             std::span<const std::vector<ItemId>> seqs) const;

 private:
  struct Member {
    std::unique_ptr<RecommenderObjective> objective;
    Eigen::VectorXd solve;
    double solve_dot_params = 0.0;
  };

  const Ensemble& ens_;
  std::vector<TargetSample> targets_;
  LissaConfig cfg_;
  std::uint64_t neg_seed_;
  std::vector<Member> members_;
};

/// One-shot form of InfluenceEstimator::sequence_influence.
double sequence_influence(const Ensemble& ens, const Dataset& ds,
                          std::span<const std::vector<ItemId>> seqs,
                          std::span<const TargetSample> targets, const LissaConfig& cfg,
                          std::uint64_t neg_seed = 0);

}  // namespace poisonforge
