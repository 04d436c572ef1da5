#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "poisonforge/poisonforge.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct Failure {
  int exit_code;
  std::string message;
};

void check(pf_status s, const std::string& what) {
  if (s != PF_OK) throw Failure{kExitRuntime, what + ": " + pf_last_error()};
}

template <typename T, void (*Free)(T*)>
struct Handle {
  T* p = nullptr;
  Handle() = default;
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  ~Handle() { Free(p); }
  T** out() { return &p; }
  T* get() const { return p; }
};

using Config = Handle<pf_config, pf_config_free>;
using DatasetH = Handle<pf_dataset, pf_dataset_free>;
using TargetsH = Handle<pf_targets, pf_targets_free>;
using EnsembleH = Handle<pf_ensemble, pf_ensemble_free>;
using GroupsH = Handle<pf_groups, pf_groups_free>;
using AgentH = Handle<pf_agent, pf_agent_free>;
using InjectionH = Handle<pf_injection, pf_injection_free>;
using ReportH = Handle<pf_report, pf_report_free>;
using ManifestH = Handle<pf_manifest, pf_manifest_free>;

std::string take_string(char* s) {
  std::string out = s ? s : "";
  pf_string_free(s);
  return out;
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  std::string out_dir = "out";
  std::string attack;
  std::string target_model;
};

class Stage {
 public:
  Stage(const std::string& name, const Options& opt) : name_(name), opt_(opt), out_(opt.out_dir) {
    if (opt.config.empty()) throw Failure{kExitUsage, "--config is required"};
    if (!fs::exists(opt.config)) throw Failure{kExitUsage, "config file not found: " + opt.config};
    check(pf_config_load(opt.config.c_str(), cfg_.out()), "loading config " + opt.config);
    if (opt.seed) {
      check(pf_config_merge_patch(cfg_.get(), json{{"seed", *opt.seed}}.dump().c_str()), "applying --seed");
    }
    std::error_code ec;
    fs::create_directories(out_, ec);
    if (ec) throw Failure{kExitRuntime, "cannot create " + out_.string() + ": " + ec.message()};
    check(pf_manifest_new(name.c_str(), manifest_.out()), "manifest");
    check(pf_manifest_set_config(manifest_.get(), cfg_.get()), "manifest");
    std::uint64_t seed = 0;
    check(pf_config_seed(cfg_.get(), &seed), "config");
    check(pf_manifest_add_seed(manifest_.get(), "master", seed), "manifest");
    check(pf_manifest_add_input(manifest_.get(), "config", opt.config.c_str()), "manifest");
    start_ = std::chrono::steady_clock::now();
  }

  pf_config* config() const { return cfg_.get(); }
  fs::path path(const std::string& name) const { return out_ / name; }
  pf_manifest* manifest() const { return manifest_.get(); }

  std::string input(const std::string& role, const std::string& name) {
    const auto p = path(name);
    if (!fs::exists(p)) {
      throw Failure{kExitRuntime, p.string() + " not found; run the stage that produces it first"};
    }
    check(pf_manifest_add_input(manifest_.get(), role.c_str(), p.string().c_str()), "manifest");
    return p.string();
  }
  void output(const std::string& role, const fs::path& p) {
    check(pf_manifest_add_output(manifest_.get(), role.c_str(), p.string().c_str()), "manifest");
  }

  void finish() {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    check(pf_manifest_add_timing(manifest_.get(), "total", secs), "manifest");
    const auto mpath = path("manifest_" + name_ + ".json");
    check(pf_manifest_write(manifest_.get(), mpath.string().c_str()), "writing manifest");
  }

  void load_dataset(DatasetH& ds) {
    check(pf_dataset_load(input("dataset", "dataset.json").c_str(), ds.out()), "loading dataset");
  }
  void load_targets(TargetsH& t) {
    check(pf_targets_load(input("targets", "targets.json").c_str(), t.out()), "loading targets");
  }

 private:
  std::string name_;
  const Options& opt_;
  fs::path out_;
  Config cfg_;
  ManifestH manifest_;
  std::chrono::steady_clock::time_point start_;
};

void print_results(const pf_report* report) {
  char* raw = nullptr;
  check(pf_report_json(report, &raw), "report");
  const json j = json::parse(take_string(raw));
  for (const auto& r : j.at("results")) {
    std::printf("%-8s %-6s users=%-5zu m=%-3d display_rate=%.4f\n", r.at("attack").get<std::string>().c_str(),
                r.at("target_model").get<std::string>().c_str(), r.at("controlled_users").get<std::size_t>(),
                r.at("m_actions").get<int>(), r.at("display_rate").get<double>());
  }
}

void write_report(Stage& st, const pf_report* report, const std::string& sub = "") {
  const fs::path dir = sub.empty() ? st.path("") : st.path(sub);
  check(pf_report_write(report, dir.string().c_str()), "writing report");
  check(pf_manifest_add_report_timings(st.manifest(), report), "manifest");
  st.output("report", dir / "report.json");
  st.output("display_rates", dir / "display_rates.csv");
}

int run_ingest(const Options& opt) {
  Stage st("ingest", opt);
  DatasetH ds;
  check(pf_dataset_from_config(st.config(), ds.out()), "building dataset");
  TargetsH t;
  check(pf_targets_select(st.config(), ds.get(), t.out()), "selecting targets");
  const auto dpath = st.path("dataset.json"), tpath = st.path("targets.json");
  check(pf_dataset_save(ds.get(), dpath.string().c_str()), "saving dataset");
  check(pf_targets_save(t.get(), tpath.string().c_str()), "saving targets");
  st.output("dataset", dpath);
  st.output("targets", tpath);
  st.finish();
  std::size_t users = 0, items = 0;
  check(pf_dataset_size(ds.get(), &users, &items), "dataset");
  std::printf("dataset: %zu users, %zu items\n", users, items);
  return 0;
}

int run_train_models(const Options& opt) {
  Stage st("train-models", opt);
  DatasetH ds;
  st.load_dataset(ds);
  EnsembleH ens;
  check(pf_ensemble_train(st.config(), ds.get(), ens.out()), "training simulator");
  const auto index = st.path("simulator.json");
  check(pf_ensemble_save(ens.get(), index.string().c_str()), "saving simulator");
  st.output("simulator", index);
  std::ifstream in(index);
  for (const auto& m : json::parse(in).at("members")) {
    st.output("model", st.path(m.at("path").get<std::string>()));
  }
  st.finish();
  return 0;
}

int run_build_groups(const Options& opt) {
  Stage st("build-groups", opt);
  DatasetH ds;
  TargetsH t;
  st.load_dataset(ds);
  st.load_targets(t);
  GroupsH g;
  check(pf_groups_build(st.config(), ds.get(), t.get(), g.out()), "building groups");
  const auto gpath = st.path("groups.json");
  check(pf_groups_save(g.get(), gpath.string().c_str()), "saving groups");
  st.output("groups", gpath);
  st.finish();
  std::size_t n = 0;
  check(pf_groups_size(g.get(), &n), "groups");
  std::printf("groups: %zu\n", n);
  return 0;
}

int run_train_agent(const Options& opt) {
  Stage st("train-agent", opt);
  DatasetH ds;
  TargetsH t;
  EnsembleH ens;
  GroupsH g;
  st.load_dataset(ds);
  st.load_targets(t);
  check(pf_ensemble_load(st.input("simulator", "simulator.json").c_str(), ens.out()), "loading simulator");
  check(pf_groups_load(st.input("groups", "groups.json").c_str(), g.out()), "loading groups");
  AgentH agent;
  check(pf_agent_train(st.config(), ds.get(), t.get(), ens.get(), g.get(), agent.out()), "training agent");
  const auto apath = st.path("agent.json"), lpath = st.path("agent_log.csv");
  check(pf_agent_save(agent.get(), apath.string().c_str()), "saving agent");
  check(pf_agent_write_log(agent.get(), lpath.string().c_str()), "saving agent log");
  st.output("agent", apath);
  st.output("agent_log", lpath);
  st.finish();
  return 0;
}

int run_attack(const Options& opt) {
  Stage st("attack", opt);
  const std::string attack = opt.attack.empty() ? "loki" : opt.attack;
  DatasetH ds;
  TargetsH t;
  GroupsH g;
  AgentH agent;
  st.load_dataset(ds);
  st.load_targets(t);
  if (attack == "loki") {
    check(pf_groups_load(st.input("groups", "groups.json").c_str(), g.out()), "loading groups");
    check(pf_agent_load(st.input("agent", "agent.json").c_str(), agent.out()), "loading agent");
  }
  InjectionH inj;
  check(pf_attack_generate(st.config(), attack.c_str(), ds.get(), t.get(), g.get(), agent.get(), inj.out()),
        "generating " + attack + " attack");
  const auto ipath = st.path("injections_" + attack + ".jsonl");
  check(pf_injection_save(inj.get(), ds.get(), ipath.string().c_str()), "saving injections");
  st.output("injections", ipath);
  st.finish();
  std::size_t n = 0;
  check(pf_injection_count(inj.get(), &n), "injections");
  std::printf("%s: %zu controlled users\n", attack.c_str(), n);
  return 0;
}

int run_evaluate(const Options& opt) {
  Stage st("evaluate", opt);
  const std::string attack = opt.attack.empty() ? "none" : opt.attack;
  DatasetH ds;
  TargetsH t;
  st.load_dataset(ds);
  st.load_targets(t);
  InjectionH inj;
  if (attack != "none") {
    check(pf_injection_load(st.input("injections", "injections_" + attack + ".jsonl").c_str(), ds.get(), inj.out()),
          "loading injections");
  }
  std::vector<std::string> models;
  if (!opt.target_model.empty()) {
    models.push_back(opt.target_model);
  } else {
    char* raw = nullptr;
    check(pf_config_to_json(st.config(), &raw), "config");
    models = json::parse(take_string(raw)).at("target_models").get<std::vector<std::string>>();
  }
  for (const auto& model : models) {
    ReportH report;
    check(pf_evaluate(st.config(), ds.get(), t.get(), inj.get(), model.c_str(), report.out()), "evaluating");
    write_report(st, report.get(), "evaluate_" + attack + "_" + model);
    print_results(report.get());
  }
  st.finish();
  return 0;
}

int run_campaign(const Options& opt) {
  Stage st("campaign", opt);
  ReportH report;
  check(pf_campaign_run(st.config(), report.out()), "campaign");
  write_report(st, report.get());
  st.finish();
  print_results(report.get());
  return 0;
}

int run_sweep(const Options& opt) {
  Stage st("sweep", opt);
  ReportH report;
  check(pf_sweep_run(st.config(), opt.jobs, report.out()), "sweep");
  write_report(st, report.get());
  st.finish();
  print_results(report.get());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  pf_init_logging("warn");
  if (pf_abi_version() != PF_ABI_VERSION) {
    std::fprintf(stderr, "poisonforge: library ABI %d does not match header ABI %d\n", pf_abi_version(),
                 PF_ABI_VERSION);
    return kExitRuntime;
  }

  CLI::App app{"Data-poisoning laboratory for next-item recommenders"};
  app.require_subcommand(1);
  Options opt;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "campaign config (JSON)");
    sub->add_option("--seed", opt.seed, "override the master seed");
    sub->add_option("--jobs", opt.jobs, "parallel workers")->check(CLI::PositiveNumber);
    sub->add_option("--out-dir", opt.out_dir, "artifact directory")->capture_default_str();
  };
  const std::vector<std::pair<std::string, std::string>> stages{
      {"ingest", "build the dataset and select targets"},
      {"train-models", "train the simulator ensemble"},
      {"build-groups", "build the agent's item groups"},
      {"train-agent", "train the attack agent"},
      {"attack", "generate injected sequences"},
      {"evaluate", "retrain the target model and measure display rate"},
      {"campaign", "run the full pipeline"},
      {"sweep", "run the pipeline over the budget grid"}};
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : stages) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub);
    subs[name] = sub;
  }
  const auto attacks = CLI::IsMember({"none", "random", "popular", "loki"});
  subs["attack"]->add_option("--attack", opt.attack, "none|random|popular|loki")->check(attacks);
  subs["evaluate"]->add_option("--attack", opt.attack, "none|random|popular|loki")->check(attacks);
  subs["evaluate"]->add_option("--target-model", opt.target_model, "bprmf|fpmc")
      ->check(CLI::IsMember({"bprmf", "fpmc"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (subs["ingest"]->parsed()) return run_ingest(opt);
    if (subs["train-models"]->parsed()) return run_train_models(opt);
    if (subs["build-groups"]->parsed()) return run_build_groups(opt);
    if (subs["train-agent"]->parsed()) return run_train_agent(opt);
    if (subs["attack"]->parsed()) return run_attack(opt);
    if (subs["evaluate"]->parsed()) return run_evaluate(opt);
    if (subs["campaign"]->parsed()) return run_campaign(opt);
    if (subs["sweep"]->parsed()) return run_sweep(opt);
  } catch (const Failure& f) {
    std::fprintf(stderr, "poisonforge: %s\n", f.message.c_str());
    return f.exit_code;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "poisonforge: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
