#include "poisonforge/evalharness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <thread>

#include <spdlog/spdlog.h>

namespace poisonforge {

using nlohmann::json;
namespace fs = std::filesystem;

Dataset inject(const Dataset& ds, const InjectedSequences& seqs) {
  for (const auto& seq : seqs.sequences) {
    for (ItemId i : seq) {
      if (i < 0 || static_cast<std::size_t>(i) >= ds.num_items()) {
        throw Error(ErrorCode::kInvalidArgument, "inject: item id " + std::to_string(i) + " out of range");
      }
    }
  }
  if (seqs.sequences.empty()) return ds;
  return ds.with_appended_users(seqs.user_names(), seqs.sequences);
}

double display_rate(const Recommender& model, const Dataset& ds, const TargetSpec& targets, std::size_t k) {
  if (targets.users.empty()) throw Error(ErrorCode::kEmpty, "display_rate: no target users");
  std::size_t hits = 0;
  for (UserId u : targets.users) {
    const auto top = top_k(model, u, ds.train(u), k, /*exclude_history=*/true);
    const bool hit = std::any_of(top.items.begin(), top.items.end(), [&](ItemId i) {
      return std::find(targets.items.begin(), targets.items.end(), i) != targets.items.end();
    });
    hits += hit ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(targets.users.size());
}

// ---------------------------------------------------------------------------

json LengthReport::to_json() const {
  return json{{"before", before}, {"after", after}, {"injected", injected}, {"total_variation", total_variation}};
}

void LengthReport::write_csv(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << "length,before,after,injected\n";
  for (std::size_t len = 0; len < before.size(); ++len) {
    out << len << ',' << before[len] << ',' << after[len] << ',' << injected[len] << '\n';
  }
}

LengthReport length_distribution_report(const Dataset& before, const Dataset& after) {
  if (after.num_users() < before.num_users()) {
    throw Error(ErrorCode::kInvalidArgument, "length report: poisoned dataset has fewer users");
  }
  std::size_t max_len = 0;
  for (std::size_t u = 0; u < after.num_users(); ++u) {
    max_len = std::max(max_len, after.sequence(static_cast<UserId>(u)).size());
  }
  for (std::size_t u = 0; u < before.num_users(); ++u) {
    max_len = std::max(max_len, before.sequence(static_cast<UserId>(u)).size());
  }
  LengthReport r;
  r.before.assign(max_len + 1, 0);
  r.after.assign(max_len + 1, 0);
  r.injected.assign(max_len + 1, 0);
  for (std::size_t u = 0; u < before.num_users(); ++u) ++r.before[before.sequence(static_cast<UserId>(u)).size()];
  for (std::size_t u = 0; u < after.num_users(); ++u) {
    const auto len = after.sequence(static_cast<UserId>(u)).size();
    ++r.after[len];
    if (u >= before.num_users()) ++r.injected[len];
  }
  const double nb = static_cast<double>(std::max<std::size_t>(before.num_users(), 1));
  const double na = static_cast<double>(std::max<std::size_t>(after.num_users(), 1));
  double tv = 0.0;
  for (std::size_t len = 0; len <= max_len; ++len) tv += std::abs(r.before[len] / nb - r.after[len] / na);
  r.total_variation = 0.5 * tv;
  return r;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<ModelKind> parse_kinds(const json& j) {
  std::vector<ModelKind> out;
  for (const auto& s : j) out.push_back(parse_model_kind(s.get<std::string>()));
  return out;
}

json kinds_json(const std::vector<ModelKind>& kinds) {
  json out = json::array();
  for (auto k : kinds) out.push_back(to_string(k));
  return out;
}

}  // namespace

std::vector<std::pair<ModelKind, double>> CampaignConfig::simulator_plan() const {
  std::vector<std::pair<ModelKind, double>> plan;
  for (std::size_t m = 0; m < simulator_members.size(); ++m) {
    const ModelKind kind = simulator_members[m];
    if (!include_target_family &&
        std::find(target_models.begin(), target_models.end(), kind) != target_models.end()) {
      continue;
    }
    plan.emplace_back(kind, m < simulator_weights.size() ? simulator_weights[m] : 1.0);
  }
  return plan;
}

void CampaignConfig::validate() const {
  if (!dataset_path && !synthetic) throw Error(ErrorCode::kInvalidArgument, "config: no dataset path or synthetic block");
  if (dataset_format != "csv" && dataset_format != "jsonl" && dataset_format != "snapshot") {
    throw Error(ErrorCode::kInvalidArgument, "config: dataset format must be csv, jsonl or snapshot");
  }
  if (simulator_weights.size() != simulator_members.size()) {
    throw Error(ErrorCode::kInvalidArgument, "config: simulator weights do not match members");
  }
  if (simulator_plan().empty()) {
    throw Error(ErrorCode::kInvalidArgument, "config: simulator has no members after excluding target families");
  }
  if (target_models.empty()) throw Error(ErrorCode::kInvalidArgument, "config: no target models");
  if (k < 1) throw Error(ErrorCode::kInvalidArgument, "config: k must be >= 1");
  if (retrain_seeds < 1) throw Error(ErrorCode::kInvalidArgument, "config: retrain_seeds must be >= 1");
  if (target_items < 1 || target_users < 1) throw Error(ErrorCode::kInvalidArgument, "config: empty target counts");
  auto check_budget = [&](double fraction, int m) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) {
      throw Error(ErrorCode::kInvalidArgument, "config: user fraction must be in [0, 1]");
    }
    // Injected users skip re-filtering, so they must already satisfy the activity floor.
    if (m < std::max(min_user_acts, 1)) {
      throw Error(ErrorCode::kInvalidArgument, "config: m_actions " + std::to_string(m) +
                                                   " is below min_user_acts " + std::to_string(min_user_acts));
    }
  };
  check_budget(budget.user_fraction, budget.m_actions);
  for (double f : sweep_user_fractions) check_budget(f, budget.m_actions);
  for (int m : sweep_m_actions) check_budget(budget.user_fraction, m);
  lissa.validate();
  dqn.validate();
}

json CampaignConfig::to_json() const {
  json data{{"format", dataset_format}, {"min_user_acts", min_user_acts}, {"min_item_acts", min_item_acts}};
  if (dataset_path) data["path"] = dataset_path->string();
  if (synthetic) data["synthetic"] = synthetic->to_json();
  json attacks_j = json::array();
  for (auto a : attacks) attacks_j.push_back(to_string(a));
  return json{{"dataset", data},
              {"targets", {{"items", target_items}, {"users", target_users}}},
              {"simulator",
               {{"members", kinds_json(simulator_members)},
                {"weights", simulator_weights},
                {"include_target_family", include_target_family}}},
              {"target_models", kinds_json(target_models)},
              {"models", {{"bprmf", bprmf.to_json()}, {"fpmc", fpmc.to_json()}}},
              {"attacks", attacks_j},
              {"budget", {{"user_fraction", budget.user_fraction}, {"m_actions", budget.m_actions}}},
              {"k", k},
              {"repo_size", repo_size},
              {"groups", groups.to_json()},
              {"lissa", lissa.to_json()},
              {"dqn", dqn.to_json()},
              {"reward_calibration_rollouts", reward_calibration_rollouts},
              {"retrain_seeds", retrain_seeds},
              {"seed", seed},
              {"sweep", {{"user_fractions", sweep_user_fractions}, {"m_actions", sweep_m_actions}}}};
}

CampaignConfig CampaignConfig::from_json(const json& j, const fs::path& base_dir) {
  CampaignConfig c;
  try {
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      if (d.contains("path")) {
        fs::path p = d.at("path").get<std::string>();
        if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
        c.dataset_path = p;
      }
      c.dataset_format = d.value("format", c.dataset_format);
      if (d.contains("synthetic")) c.synthetic = SyntheticConfig::from_json(d.at("synthetic"));
      c.min_user_acts = d.value("min_user_acts", c.min_user_acts);
      c.min_item_acts = d.value("min_item_acts", c.min_item_acts);
    }
    if (j.contains("targets")) {
      c.target_items = j.at("targets").value("items", c.target_items);
      c.target_users = j.at("targets").value("users", c.target_users);
    }
    if (j.contains("simulator")) {
      const auto& s = j.at("simulator");
      if (s.contains("members")) {
        c.simulator_members = parse_kinds(s.at("members"));
        c.simulator_weights.assign(c.simulator_members.size(), 1.0);
      }
      if (s.contains("weights")) c.simulator_weights = s.at("weights").get<std::vector<double>>();
      c.include_target_family = s.value("include_target_family", c.include_target_family);
    }
    if (j.contains("target_models")) c.target_models = parse_kinds(j.at("target_models"));
    if (j.contains("target_model")) c.target_models = {parse_model_kind(j.at("target_model").get<std::string>())};
    if (j.contains("models")) {
      const auto& m = j.at("models");
      if (m.contains("bprmf")) c.bprmf = ModelHyper::from_json(m.at("bprmf"), c.bprmf);
      if (m.contains("fpmc")) c.fpmc = ModelHyper::from_json(m.at("fpmc"), c.fpmc);
    }
    if (j.contains("attacks")) {
      c.attacks.clear();
      for (const auto& a : j.at("attacks")) c.attacks.push_back(parse_attack_kind(a.get<std::string>()));
    }
    if (j.contains("budget")) {
      c.budget.user_fraction = j.at("budget").value("user_fraction", c.budget.user_fraction);
      c.budget.m_actions = j.at("budget").value("m_actions", c.budget.m_actions);
    }
    c.k = j.value("k", c.k);
    c.repo_size = j.value("repo_size", c.repo_size);
    if (j.contains("groups")) c.groups = GroupConfig::from_json(j.at("groups"));
    if (j.contains("lissa")) c.lissa = LissaConfig::from_json(j.at("lissa"));
    if (j.contains("dqn")) c.dqn = DqnConfig::from_json(j.at("dqn"));
    c.reward_calibration_rollouts = j.value("reward_calibration_rollouts", c.reward_calibration_rollouts);
    c.retrain_seeds = j.value("retrain_seeds", c.retrain_seeds);
    c.seed = j.value("seed", c.seed);
    if (j.contains("sweep")) {
      const auto& s = j.at("sweep");
      c.sweep_user_fractions = s.value("user_fractions", c.sweep_user_fractions);
      c.sweep_m_actions = s.value("m_actions", c.sweep_m_actions);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("malformed campaign config: ") + e.what());
  }
  return c;
}

CampaignConfig CampaignConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

// ---------------------------------------------------------------------------

double CampaignReport::display_rate(AttackKind attack, ModelKind target) const {
  for (const auto& r : results) {
    if (r.attack == attack && r.target_model == target) return r.display_rate;
  }
  throw Error(ErrorCode::kInvalidArgument, "report has no result for " + std::string(to_string(attack)) + "/" +
                                               std::string(to_string(target)));
}

json CampaignReport::to_json() const {
  json results_j = json::array();
  for (const auto& r : results) {
    results_j.push_back({{"attack", to_string(r.attack)},
                         {"target_model", to_string(r.target_model)},
                         {"user_fraction", r.budget.user_fraction},
                         {"m_actions", r.budget.m_actions},
                         {"controlled_users", r.controlled_users},
                         {"display_rate", r.display_rate},
                         {"per_seed", r.per_seed}});
  }
  json lengths_j = json::array();
  for (const auto& l : lengths) {
    json e = l.report.to_json();
    e["attack"] = to_string(l.attack);
    e["user_fraction"] = l.budget.user_fraction;
    e["m_actions"] = l.budget.m_actions;
    lengths_j.push_back(std::move(e));
  }
  json agent_j = json::array();
  for (const auto& e : agent_log) {
    agent_j.push_back({{"epoch", e.epoch}, {"epsilon", e.epsilon}, {"mean_reward", e.mean_reward},
                       {"td_loss", e.td_loss}, {"fallbacks", e.fallbacks}});
  }
  return json{{"version", 1},
              {"config", config},
              {"dataset", {{"users", users}, {"items", items}, {"train_interactions", train_interactions}}},
              {"targets", targets.to_json()},
              {"results", results_j},
              {"lengths", lengths_j},
              {"agent_log", agent_j}};
}

json CampaignReport::timings_json() const {
  json t = json::object();
  for (const auto& [stage, seconds] : timings) t[stage] = seconds;
  return t;
}

void CampaignReport::write(const fs::path& dir) const {
  fs::create_directories(dir);
  auto open = [&](const std::string& name) {
    std::ofstream out(dir / name);
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + (dir / name).string());
    return out;
  };
  open("report.json") << to_json().dump(2) << '\n';
  open("timings.json") << timings_json().dump(2) << '\n';
  {
    auto out = open("display_rates.csv");
    out.precision(10);
    out << "attack,target_model,user_fraction,m_actions,controlled_users,seed_index,display_rate\n";
    for (const auto& r : results) {
      for (std::size_t s = 0; s < r.per_seed.size(); ++s) {
        out << to_string(r.attack) << ',' << to_string(r.target_model) << ',' << r.budget.user_fraction << ','
            << r.budget.m_actions << ',' << r.controlled_users << ',' << s << ',' << r.per_seed[s] << '\n';
      }
      out << to_string(r.attack) << ',' << to_string(r.target_model) << ',' << r.budget.user_fraction << ','
          << r.budget.m_actions << ',' << r.controlled_users << ",mean," << r.display_rate << '\n';
    }
  }
  for (const auto& l : lengths) {
    std::string name = "lengths_" + std::string(to_string(l.attack));
    if (lengths.size() > 4) {
      name += "_f" + std::to_string(static_cast<int>(std::lround(l.budget.user_fraction * 1000))) + "_m" +
              std::to_string(l.budget.m_actions);
    }
    l.report.write_csv(dir / (name + ".csv"));
  }
  if (!agent_log.empty()) {
    TrainedAgent a;
    a.log = agent_log;
    a.write_log_csv(dir / "agent_log.csv");
  }
}

// ---------------------------------------------------------------------------

namespace {

class StageTimer {
 public:
  StageTimer(std::vector<std::pair<std::string, double>>& sink, std::string name)
      : sink_(sink), name_(std::move(name)), start_(std::chrono::steady_clock::now()) {}
  ~StageTimer() {
    sink_.emplace_back(name_, std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count());
  }

 private:
  std::vector<std::pair<std::string, double>>& sink_;
  std::string name_;
  std::chrono::steady_clock::time_point start_;
};

template <typename F>
auto stage(const std::string& name, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    throw Error(e.code(), "stage '" + name + "': " + e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorCode::kRuntime, "stage '" + name + "': " + e.what());
  }
}

}  // namespace

Dataset campaign_dataset(const CampaignConfig& cfg) {
  if (cfg.dataset_path) {
    if (cfg.dataset_format == "snapshot") return Dataset::load(*cfg.dataset_path);
    const auto log = ingest_interactions(*cfg.dataset_path, parse_log_format(cfg.dataset_format));
    return build_dataset(log, cfg.min_user_acts, cfg.min_item_acts);
  }
  if (cfg.synthetic) return build_dataset(synthesize_log(*cfg.synthetic), cfg.min_user_acts, cfg.min_item_acts);
  throw Error(ErrorCode::kInvalidArgument, "config: no dataset source");
}

TargetSpec campaign_targets(const CampaignConfig& cfg, const Dataset& ds) {
  return select_targets(ds, cfg.target_items, cfg.target_users, derive_seed(cfg.seed, "targets"));
}

std::unique_ptr<Recommender> train_simulator_member(const CampaignConfig& cfg, const Dataset& ds, ModelKind kind,
                                                    std::size_t index) {
  return train_model(kind, ds, cfg.hyper(kind),
                     derive_seed(cfg.seed, "simulator/" + std::string(to_string(kind)) + "/" + std::to_string(index)));
}

Ensemble train_simulator(const CampaignConfig& cfg, const Dataset& ds) {
  Ensemble ens;
  const auto plan = cfg.simulator_plan();
  for (std::size_t m = 0; m < plan.size(); ++m) {
    ens.members.push_back(train_simulator_member(cfg, ds, plan[m].first, m));
    ens.weights.push_back(plan[m].second);
  }
  ens.validate();
  return ens;
}

ItemGroups campaign_groups(const CampaignConfig& cfg, const Dataset& ds, const TargetSpec& targets) {
  return build_action_space(ds, targets, cfg.groups, derive_seed(cfg.seed, "groups"));
}

TrainedAgent train_campaign_agent(const CampaignConfig& cfg, const Dataset& ds, const TargetSpec& targets,
                                  const Ensemble& ens, const ItemGroups& groups, int m_actions) {
  LissaConfig lissa = cfg.lissa;
  lissa.seed = derive_seed(cfg.seed, "lissa");
  const InfluenceEstimator estimator(ens, ds, target_samples(ds, targets), lissa,
                                     derive_seed(cfg.seed, "influence-negatives"));
  InfluenceReward reward(estimator);
  reward.calibrate(groups, m_actions, cfg.reward_calibration_rollouts, derive_seed(cfg.seed, "calibration"));
  DqnConfig dqn = cfg.dqn;
  dqn.horizon = m_actions;
  dqn.seed = derive_seed(cfg.seed, "dqn");
  return train_dqn(groups, reward, dqn);
}

InjectedSequences generate_attack(const CampaignConfig& cfg, AttackKind attack, const Dataset& ds,
                                  const TargetSpec& targets, const BudgetPoint& budget, const ItemGroups* groups,
                                  const QNetwork* agent) {
  const std::size_t n_users = controlled_user_count(ds.num_users(), budget.user_fraction);
  const std::uint64_t seed = derive_seed(cfg.seed, "attack/" + std::string(to_string(attack)));
  switch (attack) {
    case AttackKind::kNone: return InjectedSequences{AttackKind::kNone, {}};
    case AttackKind::kRandom: {
      const std::size_t repo = cfg.repo_size ? cfg.repo_size : 2 * static_cast<std::size_t>(budget.m_actions);
      return random_attack(ds, targets, n_users, budget.m_actions, std::min(repo, ds.num_items()), seed);
    }
    case AttackKind::kPopular: return popular_attack(ds, targets, n_users, budget.m_actions);
    case AttackKind::kLoki:
      if (!groups || !agent) throw Error(ErrorCode::kInvalidArgument, "loki attack needs item groups and a trained agent");
      return loki_attack(*agent, *groups, n_users, budget.m_actions, seed);
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown attack");
}

DisplayRateResult evaluate_injection(const CampaignConfig& cfg, const Dataset& ds, const TargetSpec& targets,
                                     const InjectedSequences& seqs, ModelKind target, const BudgetPoint& budget) {
  const Dataset poisoned = inject(ds, seqs);
  DisplayRateResult r;
  r.attack = seqs.provenance;
  r.target_model = target;
  r.budget = budget;
  r.controlled_users = seqs.sequences.size();
  double sum = 0.0;
  for (int s = 0; s < cfg.retrain_seeds; ++s) {
    // Same retrain seeds for every attack, so attacks are compared on identical initializations.
    const auto model = train_model(target, poisoned, cfg.hyper(target),
                                   derive_seed(cfg.seed, "target/" + std::string(to_string(target)) + "/" +
                                                             std::to_string(s)));
    r.per_seed.push_back(display_rate(*model, poisoned, targets, cfg.k));
    sum += r.per_seed.back();
  }
  r.display_rate = sum / cfg.retrain_seeds;
  spdlog::info("{} vs {}: display rate {:.4f}", to_string(r.attack), to_string(target), r.display_rate);
  return r;
}

namespace {

struct Prepared {
  Dataset ds;
  TargetSpec targets;
};

Prepared prepare(const CampaignConfig& cfg, CampaignReport& report) {
  Prepared p;
  {
    StageTimer t(report.timings, "dataset");
    p.ds = stage("dataset", [&] { return campaign_dataset(cfg); });
  }
  {
    StageTimer t(report.timings, "targets");
    p.targets = stage("targets", [&] { return campaign_targets(cfg, p.ds); });
  }
  report.config = cfg.to_json();
  report.users = p.ds.num_users();
  report.items = p.ds.num_items();
  report.train_interactions = p.ds.num_train_interactions();
  report.targets = p.targets;
  return p;
}

struct AgentContext {
  Ensemble ens;
  ItemGroups groups;
};

bool needs_agent(const CampaignConfig& cfg) {
  return std::find(cfg.attacks.begin(), cfg.attacks.end(), AttackKind::kLoki) != cfg.attacks.end();
}

AgentContext prepare_agent_context(const CampaignConfig& cfg, const Prepared& p, CampaignReport& report) {
  AgentContext c;
  {
    StageTimer t(report.timings, "simulator");
    c.ens = stage("simulator", [&] { return train_simulator(cfg, p.ds); });
  }
  {
    StageTimer t(report.timings, "groups");
    c.groups = stage("groups", [&] { return campaign_groups(cfg, p.ds, p.targets); });
  }
  return c;
}

TrainedAgent agent_stage(const CampaignConfig& cfg, const Prepared& p, const AgentContext& c, int m_actions,
                         std::vector<std::pair<std::string, double>>& timings) {
  StageTimer t(timings, "agent");
  return stage("agent", [&] { return train_campaign_agent(cfg, p.ds, p.targets, c.ens, c.groups, m_actions); });
}

void run_point(const CampaignConfig& cfg, const Prepared& p, const BudgetPoint& budget, const ItemGroups* groups,
               const TrainedAgent* agent, CampaignReport& report) {
  for (AttackKind attack : cfg.attacks) {
    const std::string name = std::string(to_string(attack));
    InjectedSequences seqs;
    {
      StageTimer t(report.timings, "attack:" + name);
      seqs = stage("attack:" + name, [&] {
        return generate_attack(cfg, attack, p.ds, p.targets, budget, groups, agent ? &agent->net : nullptr);
      });
    }
    report.lengths.push_back({attack, budget, length_distribution_report(p.ds, inject(p.ds, seqs))});
    for (ModelKind target : cfg.target_models) {
      const std::string label = "evaluate:" + name + ":" + std::string(to_string(target));
      StageTimer t(report.timings, label);
      report.results.push_back(
          stage(label, [&] { return evaluate_injection(cfg, p.ds, p.targets, seqs, target, budget); }));
    }
  }
}

/// Runs f(0..n-1) on up to `jobs` threads; rethrows the first failure by index.
template <typename F>
void parallel_for(std::size_t n, int jobs, F&& f) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k; (k = next.fetch_add(1)) < n;) {
      try {
        f(k);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const int n_threads = std::clamp(jobs, 1, static_cast<int>(std::max<std::size_t>(n, 1)));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

CampaignReport run_campaign(const CampaignConfig& cfg) {
  cfg.validate();
  CampaignReport report;
  const Prepared p = prepare(cfg, report);
  std::optional<AgentContext> ctx;
  std::optional<TrainedAgent> agent;
  if (needs_agent(cfg)) {
    ctx = prepare_agent_context(cfg, p, report);
    agent = agent_stage(cfg, p, *ctx, cfg.budget.m_actions, report.timings);
    report.agent_log = agent->log;
  }
  run_point(cfg, p, cfg.budget, ctx ? &ctx->groups : nullptr, agent ? &*agent : nullptr, report);
  return report;
}

CampaignReport run_sweep(const CampaignConfig& cfg, int jobs) {
  cfg.validate();
  CampaignReport report;
  const Prepared p = prepare(cfg, report);

  std::vector<int> horizons = cfg.sweep_m_actions;
  std::sort(horizons.begin(), horizons.end());
  horizons.erase(std::unique(horizons.begin(), horizons.end()), horizons.end());

  std::optional<AgentContext> ctx;
  std::vector<TrainedAgent> agents(horizons.size());
  std::vector<std::vector<std::pair<std::string, double>>> agent_timings(horizons.size());
  if (needs_agent(cfg)) {
    ctx = prepare_agent_context(cfg, p, report);
    parallel_for(horizons.size(), jobs,
                 [&](std::size_t k) { agents[k] = agent_stage(cfg, p, *ctx, horizons[k], agent_timings[k]); });
    for (std::size_t k = 0; k < horizons.size(); ++k) {
      for (auto& [name, seconds] : agent_timings[k]) {
        report.timings.emplace_back(name + "@m" + std::to_string(horizons[k]), seconds);
      }
    }
    auto it = std::find(horizons.begin(), horizons.end(), cfg.budget.m_actions);
    report.agent_log = agents[it != horizons.end() ? it - horizons.begin() : horizons.size() - 1].log;
  }

  std::vector<BudgetPoint> points;
  for (int m : cfg.sweep_m_actions) {
    for (double f : cfg.sweep_user_fractions) points.push_back({f, m});
  }
  std::vector<CampaignReport> partial(points.size());
  parallel_for(points.size(), jobs, [&](std::size_t k) {
    const TrainedAgent* agent = nullptr;
    if (ctx) {
      const auto h = std::find(horizons.begin(), horizons.end(), points[k].m_actions) - horizons.begin();
      agent = &agents[static_cast<std::size_t>(h)];
    }
    run_point(cfg, p, points[k], ctx ? &ctx->groups : nullptr, agent, partial[k]);
  });
  for (std::size_t k = 0; k < points.size(); ++k) {
    auto& part = partial[k];
    report.results.insert(report.results.end(), part.results.begin(), part.results.end());
    report.lengths.insert(report.lengths.end(), part.lengths.begin(), part.lengths.end());
    for (auto& [name, seconds] : part.timings) {
      report.timings.emplace_back("point" + std::to_string(k) + ":" + name, seconds);
    }
  }
  return report;
}

}  // namespace poisonforge
