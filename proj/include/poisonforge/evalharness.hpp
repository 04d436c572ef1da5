#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "poisonforge/actionspace.hpp"
#include "poisonforge/agent.hpp"
#include "poisonforge/attacks.hpp"
#include "poisonforge/data.hpp"
#include "poisonforge/influence.hpp"
#include "poisonforge/recmodels.hpp"
#include "poisonforge/simulator.hpp"

namespace poisonforge {

/// Dataset plus one training-only user per injected sequence.
Dataset inject(const Dataset& ds, const InjectedSequences& seqs);

/// Fraction of target users whose top-k list (training history excluded) contains a target item.
double display_rate(const Recommender& model, const Dataset& ds, const TargetSpec& targets, std::size_t k);

/// Full-sequence length histograms with unit bins 0..max_length.
struct LengthReport {
  std::vector<std::size_t> before;
  std::vector<std::size_t> after;
  std::vector<std::size_t> injected;  // users present only in `after`
  double total_variation = 0.0;       // between normalized before/after histograms

  nlohmann::json to_json() const;
  void write_csv(const std::filesystem::path& path) const;
};

/// `after` must extend `before` with appended users.
LengthReport length_distribution_report(const Dataset& before, const Dataset& after);

struct BudgetPoint {
  double user_fraction = 0.03;
  int m_actions = 15;

  friend bool operator==(const BudgetPoint&, const BudgetPoint&) = default;
};

struct CampaignConfig {
  // Data source: an interaction log, a dataset snapshot, or a synthetic generator.
  std::optional<std::filesystem::path> dataset_path;
  std::string dataset_format = "csv";  // csv | jsonl | snapshot
  std::optional<SyntheticConfig> synthetic;
  int min_user_acts = 5;
  int min_item_acts = 5;

  std::size_t target_items = 20;
  std::size_t target_users = 20;

  std::vector<ModelKind> simulator_members{ModelKind::kBprmf, ModelKind::kFpmc};
  std::vector<double> simulator_weights{1.0, 1.0};
  bool include_target_family = true;
  std::vector<ModelKind> target_models{ModelKind::kBprmf, ModelKind::kFpmc};
  ModelHyper bprmf;
  ModelHyper fpmc;

  std::vector<AttackKind> attacks{AttackKind::kNone, AttackKind::kRandom, AttackKind::kPopular,
                                  AttackKind::kLoki};
  BudgetPoint budget;
  std::size_t k = 10;
  std::size_t repo_size = 0;  // 0 = 2 * m_actions

  GroupConfig groups;
  LissaConfig lissa;
  DqnConfig dqn;
  int reward_calibration_rollouts = 20;

  int retrain_seeds = 3;
  std::uint64_t seed = 1;

  std::vector<double> sweep_user_fractions{0.01, 0.02, 0.03};
  std::vector<int> sweep_m_actions{5, 10, 15};

  const ModelHyper& hyper(ModelKind kind) const { return kind == ModelKind::kBprmf ? bprmf : fpmc; }
  /// Simulator members after applying include_target_family.
  std::vector<std::pair<ModelKind, double>> simulator_plan() const;

  void validate() const;
  nlohmann::json to_json() const;
  /// Relative dataset paths are resolved against base_dir.
  static CampaignConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  static CampaignConfig load(const std::filesystem::path& path);
};

struct DisplayRateResult {
  AttackKind attack = AttackKind::kNone;
  ModelKind target_model = ModelKind::kBprmf;
  BudgetPoint budget;
  std::size_t controlled_users = 0;
  std::vector<double> per_seed;
  double display_rate = 0.0;  // mean over retrain seeds
};

struct LengthEntry {
  AttackKind attack = AttackKind::kNone;
  BudgetPoint budget;
  LengthReport report;
};

struct CampaignReport {
  nlohmann::json config;
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t train_interactions = 0;
  TargetSpec targets;
  std::vector<DisplayRateResult> results;
  std::vector<LengthEntry> lengths;
  std::vector<DqnEpochLog> agent_log;
  std::vector<std::pair<std::string, double>> timings;  // seconds per stage; not part of to_json

  /// Display rate for (attack, target model) at the first matching budget point.
  double display_rate(AttackKind attack, ModelKind target) const;

  /// Deterministic part of the report (no timings).
  nlohmann::json to_json() const;
  nlohmann::json timings_json() const;
  /// report.json, display_rates.csv, lengths_<attack>.csv, agent_log.csv, timings.json
  void write(const std::filesystem::path& dir) const;
};

// Individual pipeline stages, shared by run_campaign and the command-line stages.

Dataset campaign_dataset(const CampaignConfig& cfg);
TargetSpec campaign_targets(const CampaignConfig& cfg, const Dataset& ds);
std::unique_ptr<Recommender> train_simulator_member(const CampaignConfig& cfg, const Dataset& ds,
                                                    ModelKind kind, std::size_t index);
Ensemble train_simulator(const CampaignConfig& cfg, const Dataset& ds);
ItemGroups campaign_groups(const CampaignConfig& cfg, const Dataset& ds, const TargetSpec& targets);
TrainedAgent train_campaign_agent(const CampaignConfig& cfg, const Dataset& ds, const TargetSpec& targets,
                                  const Ensemble& ens, const ItemGroups& groups, int m_actions);
/// `agent` and `groups` are required for loki only.
InjectedSequences generate_attack(const CampaignConfig& cfg, AttackKind attack, const Dataset& ds,
                                  const TargetSpec& targets, const BudgetPoint& budget,
                                  const ItemGroups* groups = nullptr, const QNetwork* agent = nullptr);
/// Retrains `target` from scratch on the poisoned data for every retrain seed.
DisplayRateResult evaluate_injection(const CampaignConfig& cfg, const Dataset& ds, const TargetSpec& targets,
                                     const InjectedSequences& seqs, ModelKind target,
                                     const BudgetPoint& budget);

/// Full pipeline at cfg.budget.
CampaignReport run_campaign(const CampaignConfig& cfg);

/// run_campaign at every (user fraction, m_actions) grid point, up to `jobs` points in parallel.
/// Results are ordered by grid point regardless of scheduling.
CampaignReport run_sweep(const CampaignConfig& cfg, int jobs = 1);

}  // namespace poisonforge
