#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "poisonforge/common.hpp"
#include "poisonforge/data.hpp"

namespace poisonforge {

enum class ModelKind { kBprmf, kFpmc };

std::string_view to_string(ModelKind kind);
ModelKind parse_model_kind(std::string_view name);

/// One decomposed training example.
///
/// Pair samples (BPRMF) carry (user, positive, negative). Sequence samples (FPMC)
/// additionally carry the last item of the prefix; the models only read the last
/// prefix item, so the rest of the prefix is not stored.
struct TrainingSample {
  enum class Kind : std::uint8_t { kPair, kSeq };

  Kind kind = Kind::kPair;
  UserId user = 0;
  ItemId prev = kNoItem;
  ItemId pos = 0;
  ItemId neg = 0;
  // Stand-in embedding for a controlled user (user == kControlledUser). Not a model parameter.
  std::optional<Eigen::VectorXd> user_vector;

  static TrainingSample pair(UserId u, ItemId pos, ItemId neg) {
    return TrainingSample{Kind::kPair, u, kNoItem, pos, neg, std::nullopt};
  }
  static TrainingSample seq(UserId u, ItemId prev, ItemId next, ItemId neg) {
    return TrainingSample{Kind::kSeq, u, prev, next, neg, std::nullopt};
  }
};

struct ModelHyper {
  int dim = 16;
  double learning_rate = 0.05;
  double l2_reg = 1.0;  // weight on 1/2 ||theta||^2 in the summed training objective
  int epochs = 40;
  int neg_samples = 1;
  int eval_users = 500;  // users sampled for per-epoch validation hit rate; 0 disables

  nlohmann::json to_json() const;
  static ModelHyper from_json(const nlohmann::json& j);
  static ModelHyper from_json(const nlohmann::json& j, ModelHyper defaults);
};

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double val_hit_rate = 0.0;  // HR@10 on validation items
};

/// Picks a negative item for `pos` at position `position` of a user's sequence.
using NegativeSampler = std::function<ItemId(std::size_t position, ItemId pos)>;

/// Differentiable recommender with all parameters in one flat vector.
///
/// Layout: the user block first, then item blocks, each row-major in index order.
/// Per-sample loss is -ln sigma(margin) + l2_reg / (2N) * ||theta||^2, where N is the
/// number of decomposed training samples, so the sum over samples is the training objective.
class Recommender {
 public:
  virtual ~Recommender() = default;

  ModelKind kind() const { return kind_; }
  const ModelHyper& hyper() const { return hyper_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t num_users() const { return users_; }
  std::size_t num_items() const { return items_; }
  std::size_t param_dim() const { return static_cast<std::size_t>(params_.size()); }
  int dim() const { return hyper_.dim; }

  const Eigen::VectorXd& parameters() const { return params_; }
  Eigen::VectorXd& mutable_parameters() { return params_; }

  std::size_t sample_count() const { return sample_count_; }
  void set_sample_count(std::size_t n) { sample_count_ = n; }
  double l2_per_sample() const;

  virtual double score(UserId u, std::span<const ItemId> history, ItemId i) const = 0;
  /// Scores for every item; `out.size()` must equal num_items().
  virtual void score_all(UserId u, std::span<const ItemId> history, std::span<double> out) const = 0;
  /// out += w * d score(u, history, i) / d theta
  virtual void add_score_grad(UserId u, std::span<const ItemId> history, ItemId i, double w,
                              Eigen::VectorXd& out) const = 0;

  /// Margin x = score(pos) - score(neg) for the sample's context.
  virtual double margin(const TrainingSample& z) const = 0;
  /// out += w * dx/dtheta
  virtual void add_margin_grad(const TrainingSample& z, double w, Eigen::VectorXd& out) const = 0;
  /// out += w * (d^2 x / dtheta^2) v
  virtual void add_margin_hvp(const TrainingSample& z, const Eigen::VectorXd& v, double w,
                              Eigen::VectorXd& out) const = 0;
  /// (dx/dtheta) . v
  virtual double margin_dot(const TrainingSample& z, const Eigen::VectorXd& v) const = 0;
  /// dx / d(user vector) for the sample's context.
  virtual Eigen::VectorXd margin_user_grad(const TrainingSample& z) const = 0;

  /// Samples contributed by one user's training sequence.
  virtual std::vector<TrainingSample> decompose(UserId u, std::span<const ItemId> seq,
                                                const NegativeSampler& negative) const = 0;

  double sample_loss(const TrainingSample& z) const;
  /// Derivatives of the -ln sigma(margin) part alone (sparse).
  void add_ranking_grad(const TrainingSample& z, double w, Eigen::VectorXd& out) const;
  void add_ranking_hvp(const TrainingSample& z, const Eigen::VectorXd& v, double w,
                       Eigen::VectorXd& out) const;
  /// Full per-sample derivatives including the l2 share.
  void add_loss_grad(const TrainingSample& z, double w, Eigen::VectorXd& out) const;
  Eigen::VectorXd loss_grad(const TrainingSample& z) const;
  void add_loss_hvp(const TrainingSample& z, const Eigen::VectorXd& v, double w,
                    Eigen::VectorXd& out) const;
  Eigen::VectorXd score_grad(UserId u, std::span<const ItemId> history, ItemId i) const;

  /// Mean L2 norm of the trained user rows.
  double mean_user_norm() const;
  /// Embedding for a controlled user that has produced `samples`: the minimizer of their own
  /// loss plus l2_reg/2 ||p||^2 with every other parameter held fixed (Newton iterations).
  Eigen::VectorXd fold_in_user(std::span<const TrainingSample> samples) const;

  const std::vector<EpochLog>& training_log() const { return log_; }

  nlohmann::json to_json() const;
  static std::unique_ptr<Recommender> from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static std::unique_ptr<Recommender> load(const std::filesystem::path& path);

  virtual std::unique_ptr<Recommender> clone() const = 0;

 protected:
  Recommender(ModelKind kind, std::size_t users, std::size_t items, ModelHyper hyper,
              std::uint64_t seed, std::size_t param_dim);

  /// Plain SGD ascent on ln sigma(margin) for one sample, using pre-update values.
  virtual void sgd_step(const TrainingSample& z, double lr) = 0;

  Eigen::VectorXd user_vector(const TrainingSample& z, std::size_t user_offset) const;

  friend void fit(Recommender& model, const Dataset& ds);

  ModelKind kind_;
  std::size_t users_;
  std::size_t items_;
  ModelHyper hyper_;
  std::uint64_t seed_;
  std::size_t sample_count_ = 1;
  Eigen::VectorXd params_;
  std::vector<EpochLog> log_;
};

inline constexpr int kCheckpointVersion = 1;

/// BPR matrix factorization: score(u, i) = <P_u, Q_i> + b_i. History is ignored.
class BprmfModel final : public Recommender {
 public:
  BprmfModel(std::size_t users, std::size_t items, ModelHyper hyper, std::uint64_t seed);

  double score(UserId u, std::span<const ItemId> history, ItemId i) const override;
  void score_all(UserId u, std::span<const ItemId> history, std::span<double> out) const override;
  void add_score_grad(UserId u, std::span<const ItemId> history, ItemId i, double w,
                      Eigen::VectorXd& out) const override;
  double margin(const TrainingSample& z) const override;
  void add_margin_grad(const TrainingSample& z, double w, Eigen::VectorXd& out) const override;
  void add_margin_hvp(const TrainingSample& z, const Eigen::VectorXd& v, double w,
                      Eigen::VectorXd& out) const override;
  double margin_dot(const TrainingSample& z, const Eigen::VectorXd& v) const override;
  Eigen::VectorXd margin_user_grad(const TrainingSample& z) const override;
  std::vector<TrainingSample> decompose(UserId u, std::span<const ItemId> seq,
                                        const NegativeSampler& negative) const override;
  std::unique_ptr<Recommender> clone() const override;

  std::size_t user_offset(UserId u) const { return static_cast<std::size_t>(u) * dim(); }
  std::size_t item_offset(ItemId i) const { return (users_ + i) * dim(); }
  std::size_t bias_offset(ItemId i) const { return (users_ + items_) * dim() + i; }

 protected:
  void sgd_step(const TrainingSample& z, double lr) override;

 private:
  void check(const TrainingSample& z) const;
};

/// Factorized personalized Markov chain:
/// score(u, h, i) = <VUI_u, VIU_i> + <VIL_i, VLI_last(h)>; an empty history drops the second term.
class FpmcModel final : public Recommender {
 public:
  FpmcModel(std::size_t users, std::size_t items, ModelHyper hyper, std::uint64_t seed);

  double score(UserId u, std::span<const ItemId> history, ItemId i) const override;
  void score_all(UserId u, std::span<const ItemId> history, std::span<double> out) const override;
  void add_score_grad(UserId u, std::span<const ItemId> history, ItemId i, double w,
                      Eigen::VectorXd& out) const override;
  double margin(const TrainingSample& z) const override;
  void add_margin_grad(const TrainingSample& z, double w, Eigen::VectorXd& out) const override;
  void add_margin_hvp(const TrainingSample& z, const Eigen::VectorXd& v, double w,
                      Eigen::VectorXd& out) const override;
  double margin_dot(const TrainingSample& z, const Eigen::VectorXd& v) const override;
  Eigen::VectorXd margin_user_grad(const TrainingSample& z) const override;
  std::vector<TrainingSample> decompose(UserId u, std::span<const ItemId> seq,
                                        const NegativeSampler& negative) const override;
  std::unique_ptr<Recommender> clone() const override;

  std::size_t vui_offset(UserId u) const { return static_cast<std::size_t>(u) * dim(); }
  std::size_t viu_offset(ItemId i) const { return (users_ + i) * dim(); }
  std::size_t vil_offset(ItemId i) const { return (users_ + items_ + i) * dim(); }
  std::size_t vli_offset(ItemId i) const { return (users_ + 2 * items_ + i) * dim(); }

 protected:
  void sgd_step(const TrainingSample& z, double lr) override;

 private:
  void check(const TrainingSample& z) const;
};

/// Untrained model with seeded uniform(-0.1/sqrt(d), 0.1/sqrt(d)) parameters.
std::unique_ptr<Recommender> make_model(ModelKind kind, std::size_t users, std::size_t items,
                                        const ModelHyper& hyper, std::uint64_t seed);

/// Seeded SGD on the BPR objective. Throws ErrorCode::kNumeric on a non-finite epoch loss.
std::unique_ptr<Recommender> train_model(ModelKind kind, const Dataset& ds, const ModelHyper& hyper,
                                         std::uint64_t seed);
std::unique_ptr<Recommender> train_bprmf(const Dataset& ds, const ModelHyper& hyper, std::uint64_t seed);
std::unique_ptr<Recommender> train_fpmc(const Dataset& ds, const ModelHyper& hyper, std::uint64_t seed);

/// Trains `model` in place on ds (parameters are not re-initialized).
void fit(Recommender& model, const Dataset& ds);

/// Decomposes every user's training sequence with negatives drawn uniformly from
/// items outside that user's training set.
std::vector<TrainingSample> training_samples(const Recommender& model, const Dataset& ds,
                                             std::uint64_t neg_seed);

/// Validation HR@k over the first `max_users` users that have a holdout (0 = all).
double validation_hit_rate(const Recommender& model, const Dataset& ds, std::size_t k,
                           std::size_t max_users = 0);

struct TopK {
  std::vector<ItemId> items;
  bool truncated = false;  // fewer than k eligible items
};

/// Descending score, ties by ascending item index, skipping `excluded`.
TopK top_k_from_scores(std::span<const double> scores, std::size_t k,
                       std::span<const ItemId> excluded = {});
TopK top_k(const Recommender& model, UserId u, std::span<const ItemId> history, std::size_t k,
           bool exclude_history);

// ---------------------------------------------------------------------------

/// Empirical risk (1/N) sum_i L(z_i; theta) seen through its per-sample derivatives.
///
/// Every L(z_i) may share a term (c/2)||theta||^2; the add_sample_* hooks cover only the
/// sample-specific part and the shared term is reported separately so that it is applied
/// once per product instead of once per sample.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual std::size_t param_dim() const = 0;
  virtual std::size_t sample_count() const = 0;
  /// out += w * grad of the sample-specific part of L(z_i)
  virtual void add_sample_grad(std::size_t i, double w, Eigen::VectorXd& out) const = 0;
  /// out += w * hess of the sample-specific part of L(z_i) times v
  virtual void add_sample_hvp(std::size_t i, const Eigen::VectorXd& v, double w,
                              Eigen::VectorXd& out) const = 0;
  /// c in the shared (c/2)||theta||^2 term.
  virtual double shared_curvature() const { return 0.0; }
  /// out += w * c * theta
  virtual void add_shared_grad(double /*w*/, Eigen::VectorXd& /*out*/) const {}
};

class RecommenderObjective final : public Objective {
 public:
  RecommenderObjective(const Recommender& model, std::vector<TrainingSample> samples);

  std::size_t param_dim() const override { return model_.param_dim(); }
  std::size_t sample_count() const override { return samples_.size(); }
  void add_sample_grad(std::size_t i, double w, Eigen::VectorXd& out) const override;
  void add_sample_hvp(std::size_t i, const Eigen::VectorXd& v, double w,
                      Eigen::VectorXd& out) const override;
  double shared_curvature() const override { return model_.l2_per_sample(); }
  void add_shared_grad(double w, Eigen::VectorXd& out) const override;

  const Recommender& model() const { return model_; }
  const std::vector<TrainingSample>& samples() const { return samples_; }

 private:
  const Recommender& model_;
  std::vector<TrainingSample> samples_;
};

/// (H + damping I) v with H = (1/N) sum_i hess L(z_i), without materializing H.
Eigen::VectorXd hvp(const Objective& objective, const Eigen::VectorXd& v, double damping);
/// Same, over the model's decomposed training samples of ds.
Eigen::VectorXd hvp(const Recommender& model, const Dataset& ds, const Eigen::VectorXd& v,
                    double damping, std::uint64_t neg_seed = 0);
/// (1/N) sum_i grad L(z_i)
Eigen::VectorXd full_gradient(const Objective& objective);

}  // namespace poisonforge
