#include "poisonforge/influence.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <spdlog/spdlog.h>

namespace poisonforge {

using Eigen::VectorXd;
using nlohmann::json;

void LissaConfig::validate() const {
  if (depth < 1 || !(scale > 0) || repeats < 1 || !(damping >= 0) || batch < 1) {
    throw Error(ErrorCode::kInvalidArgument,
                "lissa config requires depth >= 1, scale > 0, repeats >= 1, damping >= 0, batch >= 1");
  }
}

json LissaConfig::to_json() const {
  return json{{"depth", depth},     {"scale", scale}, {"repeats", repeats},
              {"damping", damping}, {"batch", batch}, {"seed", seed}};
}

LissaConfig LissaConfig::from_json(const json& j) { return from_json(j, LissaConfig{}); }

LissaConfig LissaConfig::from_json(const json& j, LissaConfig d) {
  d.depth = j.value("depth", d.depth);
  d.scale = j.value("scale", d.scale);
  d.repeats = j.value("repeats", d.repeats);
  d.damping = j.value("damping", d.damping);
  d.batch = j.value("batch", d.batch);
  d.seed = j.value("seed", d.seed);
  return d;
}

std::vector<TargetSample> target_samples(const Dataset& ds, const TargetSpec& targets) {
  std::vector<TargetSample> out;
  out.reserve(targets.users.size() * targets.items.size());
  for (UserId u : targets.users) {
    const auto hist = ds.train(u);
    for (ItemId i : targets.items) out.push_back({u, i, std::vector<ItemId>(hist.begin(), hist.end())});
  }
  return out;
}

VectorXd inverse_hvp(const Objective& objective, const VectorXd& v, const LissaConfig& cfg) {
  cfg.validate();
  if (static_cast<std::size_t>(v.size()) != objective.param_dim()) {
    throw Error(ErrorCode::kInvalidArgument, "inverse_hvp: vector size does not match parameter count");
  }
  const double v_norm = v.norm();
  if (v_norm == 0.0) return VectorXd::Zero(v.size());

  const std::size_t n = objective.sample_count();
  const bool exact = static_cast<std::size_t>(cfg.batch) >= n;
  const std::size_t batch = exact ? n : static_cast<std::size_t>(cfg.batch);
  const double diag = cfg.damping + objective.shared_curvature();
  const double limit = 1e6 * v_norm;

  VectorXd total = VectorXd::Zero(v.size());
  VectorXd hr(v.size());
  for (int rep = 0; rep < cfg.repeats; ++rep) {
    Rng rng(derive_seed(cfg.seed, "lissa/" + std::to_string(rep)));
    std::uniform_int_distribution<std::size_t> pick(0, n == 0 ? 0 : n - 1);
    VectorXd r = v;
    for (int t = 0; t < cfg.depth; ++t) {
      hr = diag * r;
      const double w = 1.0 / static_cast<double>(std::max<std::size_t>(batch, 1));
      for (std::size_t b = 0; b < batch; ++b) {
        objective.add_sample_hvp(exact ? b : pick(rng), r, w, hr);
      }
      r = v + r - hr / cfg.scale;
      const double norm = r.norm();
      if (!std::isfinite(norm) || norm > limit) {
        throw Error(ErrorCode::kNumeric, "LiSSA diverged at step " + std::to_string(t) +
                                             "; increase scale/damping");
      }
    }
    total += r;
  }
  return total / (cfg.scale * cfg.repeats);
}

double score_influence(const Objective& objective, const VectorXd& test_grad,
                       const VectorXd& sample_grad, const LissaConfig& cfg) {
  return -inverse_hvp(objective, test_grad, cfg).dot(sample_grad);
}

double score_influence(const Recommender& model, const Objective& training,
                       const TrainingSample& z_delta, const TargetSample& t, const LissaConfig& cfg) {
  return score_influence(training, model.score_grad(t.user, t.history, t.item),
                         model.loss_grad(z_delta), cfg);
}

namespace {

ItemId controlled_negative(std::uint64_t neg_seed, std::size_t slot, std::size_t position,
                           std::span<const ItemId> chosen, std::size_t n_items) {
  const std::uint64_t base = mix64(neg_seed ^ mix64(0x51ed270b27ULL + slot)) ^ mix64(position + 1);
  for (std::uint64_t k = 0; k < 64; ++k) {
    const auto i = static_cast<ItemId>(mix64(base + k) % n_items);
    if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) return i;
  }
  for (std::size_t i = 0; i < n_items; ++i) {
    if (std::find(chosen.begin(), chosen.end(), static_cast<ItemId>(i)) == chosen.end()) {
      return static_cast<ItemId>(i);
    }
  }
  throw Error(ErrorCode::kInvalidArgument, "controlled user consumed every item");
}

}  // namespace

std::vector<TrainingSample> controlled_samples(const Recommender& model, std::span<const ItemId> seq,
                                               std::uint64_t neg_seed, std::size_t slot,
                                               std::size_t from_position) {
  auto samples = model.decompose(kControlledUser, seq, [&](std::size_t position, ItemId) {
    return controlled_negative(neg_seed, slot, position, seq.first(position + 1), model.num_items());
  });
  // FPMC starts emitting at position 1, BPRMF at 0.
  const std::size_t first_position = seq.size() - samples.size();
  std::vector<TrainingSample> out;
  for (std::size_t j = 0; j < samples.size(); ++j) {
    if (first_position + j < from_position) continue;
    TrainingSample z = samples[j];
    z.user_vector = model.fold_in_user(std::span<const TrainingSample>(samples).first(j + 1));
    out.push_back(std::move(z));
  }
  return out;
}

// ---------------------------------------------------------------------------

InfluenceEstimator::InfluenceEstimator(const Ensemble& ens, const Dataset& ds,
                                       std::vector<TargetSample> targets, const LissaConfig& cfg,
                                       std::uint64_t neg_seed)
    : ens_(ens), targets_(std::move(targets)), cfg_(cfg), neg_seed_(neg_seed) {
  ens_.validate();
  cfg_.validate();
  if (targets_.empty()) throw Error(ErrorCode::kEmpty, "influence: empty target set");
  for (std::size_t m = 0; m < ens_.members.size(); ++m) {
    const auto& model = *ens_.members[m];
    Member member;
    member.objective = std::make_unique<RecommenderObjective>(model, training_samples(model, ds, neg_seed));
    VectorXd mean_grad = VectorXd::Zero(static_cast<Eigen::Index>(model.param_dim()));
    const double w = 1.0 / static_cast<double>(targets_.size());
    for (const auto& t : targets_) model.add_score_grad(t.user, t.history, t.item, w, mean_grad);
    LissaConfig member_cfg = cfg_;
    member_cfg.seed = derive_seed(cfg_.seed, "member/" + std::to_string(m));
    member.solve = inverse_hvp(*member.objective, mean_grad, member_cfg);
    member.solve_dot_params = member.solve.dot(model.parameters());
    spdlog::debug("influence cache: member {} ({}) |s| = {:.4g}", m, to_string(model.kind()),
                  member.solve.norm());
    members_.push_back(std::move(member));
  }
}

double InfluenceEstimator::sample_influence(std::size_t m, const TrainingSample& z) const {
  const auto& model = *ens_.members[m];
  const auto& mem = members_[m];
  // grad L = -sigma(-x) grad x + (l2/N) theta
  const double x = model.margin(z);
  const double s_neg = 1.0 / (1.0 + std::exp(x));
  return s_neg * model.margin_dot(z, mem.solve) - model.l2_per_sample() * mem.solve_dot_params;
}

double InfluenceEstimator::member_influence(std::size_t m, std::span<const TrainingSample> samples) const {
  double total = 0.0;
  for (const auto& z : samples) total += sample_influence(m, z);
  return total;
}

double InfluenceEstimator::sequence_influence(std::span<const std::vector<ItemId>> seqs) const {
  double weighted = 0.0;
  for (std::size_t m = 0; m < members_.size(); ++m) {
    if (ens_.weights[m] == 0.0) continue;
    double sum = 0.0;
    for (std::size_t slot = 0; slot < seqs.size(); ++slot) {
      sum += member_influence(m, controlled_samples(*ens_.members[m], seqs[slot], neg_seed_, slot));
    }
    weighted += ens_.weights[m] * sum;
  }
  return weighted / ens_.total_weight();
}

double InfluenceEstimator::step_influence(std::size_t slot, std::span<const ItemId> seq) const {
  if (seq.empty()) return 0.0;
  double weighted = 0.0;
  for (std::size_t m = 0; m < members_.size(); ++m) {
    if (ens_.weights[m] == 0.0) continue;
    weighted += ens_.weights[m] *
                member_influence(m, controlled_samples(*ens_.members[m], seq, neg_seed_, slot, seq.size() - 1));
  }
  return weighted / ens_.total_weight();
}

std::vector<TargetInfluence> InfluenceEstimator::per_target(std::span<const std::vector<ItemId>> seqs) const {
  std::vector<TargetInfluence> out;
  for (std::size_t m = 0; m < members_.size(); ++m) {
    const auto& model = *ens_.members[m];
    VectorXd sample_grad = VectorXd::Zero(static_cast<Eigen::Index>(model.param_dim()));
    for (std::size_t slot = 0; slot < seqs.size(); ++slot) {
      for (const auto& z : controlled_samples(model, seqs[slot], neg_seed_, slot)) {
        model.add_loss_grad(z, 1.0, sample_grad);
      }
    }
    for (std::size_t k = 0; k < targets_.size(); ++k) {
      const auto& t = targets_[k];
      LissaConfig cfg = cfg_;
      cfg.seed = derive_seed(cfg_.seed, "target/" + std::to_string(m) + "/" + std::to_string(k));
      const double infl = score_influence(*members_[m].objective,
                                          model.score_grad(t.user, t.history, t.item), sample_grad, cfg);
      out.push_back({m, t.user, t.item, infl});
    }
  }
  return out;
}

void InfluenceEstimator::write_diagnostics_csv(const std::filesystem::path& path,
                                               std::span<const std::vector<ItemId>> seqs) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << "member,kind,weight,user,item,influence\n";
  out.precision(10);
  for (const auto& r : per_target(seqs)) {
    out << r.member << ',' << to_string(ens_.members[r.member]->kind()) << ','
        << ens_.weights[r.member] << ',' << r.user << ',' << r.item << ',' << r.influence << '\n';
  }
}

double sequence_influence(const Ensemble& ens, const Dataset& ds,
                          std::span<const std::vector<ItemId>> seqs,
                          std::span<const TargetSample> targets, const LissaConfig& cfg,
                          std::uint64_t neg_seed) {
  InfluenceEstimator est(ens, ds, std::vector<TargetSample>(targets.begin(), targets.end()), cfg, neg_seed);
  return est.sequence_influence(seqs);
}

}  // namespace poisonforge
