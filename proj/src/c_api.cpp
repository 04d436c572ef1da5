#include "poisonforge/poisonforge.h"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <memory>
#include <new>
#include <string>

#include "poisonforge/evalharness.hpp"
#include "poisonforge/manifest.hpp"

namespace pf = poisonforge;
namespace fs = std::filesystem;
using nlohmann::json;

struct pf_config {
  pf::CampaignConfig cfg;
};
struct pf_dataset {
  pf::Dataset ds;
};
struct pf_targets {
  pf::TargetSpec spec;
};
struct pf_model {
  std::unique_ptr<pf::Recommender> model;
};
struct pf_ensemble {
  pf::Ensemble ens;
};
struct pf_groups {
  pf::ItemGroups groups;
};
struct pf_agent {
  pf::TrainedAgent agent;
};
struct pf_injection {
  pf::InjectedSequences seqs;
};
struct pf_report {
  pf::CampaignReport report;
};
struct pf_manifest {
  pf::RunManifest manifest;
};

namespace {

thread_local std::string g_last_error;

pf_status to_status(pf::ErrorCode code) {
  switch (code) {
    case pf::ErrorCode::kInvalidArgument: return PF_ERR_INVALID_ARGUMENT;
    case pf::ErrorCode::kIo: return PF_ERR_IO;
    case pf::ErrorCode::kParse: return PF_ERR_PARSE;
    case pf::ErrorCode::kNumeric: return PF_ERR_NUMERIC;
    case pf::ErrorCode::kEmpty: return PF_ERR_EMPTY;
    case pf::ErrorCode::kRuntime: return PF_ERR_RUNTIME;
  }
  return PF_ERR_RUNTIME;
}

template <typename F>
pf_status guard(F&& f) {
  try {
    g_last_error.clear();
    f();
    return PF_OK;
  } catch (const pf::Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const json::exception& e) {
    g_last_error = e.what();
    return PF_ERR_PARSE;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return PF_ERR_RUNTIME;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return PF_ERR_RUNTIME;
  } catch (...) {
    g_last_error = "unknown error";
    return PF_ERR_RUNTIME;
  }
}

void require(const void* p, const char* what) {
  if (!p) throw pf::Error(pf::ErrorCode::kInvalidArgument, std::string(what) + " must not be null");
}

char* copy_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

template <typename T, typename... Args>
void emit(T** out, Args&&... args) {
  require(out, "out");
  *out = nullptr;
  *out = new T{std::forward<Args>(args)...};
}

}  // namespace

extern "C" {

int pf_abi_version(void) { return PF_ABI_VERSION; }

const char* pf_last_error(void) { return g_last_error.c_str(); }

const char* pf_status_name(pf_status status) {
  switch (status) {
    case PF_OK: return "ok";
    case PF_ERR_INVALID_ARGUMENT: return "invalid argument";
    case PF_ERR_IO: return "i/o error";
    case PF_ERR_PARSE: return "parse error";
    case PF_ERR_NUMERIC: return "numeric error";
    case PF_ERR_EMPTY: return "empty input";
    case PF_ERR_RUNTIME: return "runtime error";
  }
  return "unknown status";
}

void pf_string_free(char* s) { std::free(s); }

void pf_init_logging(const char* fallback) { pf::init_logging(fallback ? fallback : "warn"); }

// --- config -------------------------------------------------------------------

pf_status pf_config_load(const char* path, pf_config** out) {
  return guard([&] {
    require(path, "path");
    emit(out, pf::CampaignConfig::load(path));
  });
}

pf_status pf_config_from_json(const char* text, const char* base_dir, pf_config** out) {
  return guard([&] {
    require(text, "json");
    emit(out, pf::CampaignConfig::from_json(json::parse(text), base_dir ? fs::path(base_dir) : fs::path()));
  });
}

pf_status pf_config_merge_patch(pf_config* cfg, const char* patch) {
  return guard([&] {
    require(cfg, "config");
    require(patch, "patch");
    json j = cfg->cfg.to_json();
    j.merge_patch(json::parse(patch));
    cfg->cfg = pf::CampaignConfig::from_json(j);
  });
}

pf_status pf_config_to_json(const pf_config* cfg, char** out) {
  return guard([&] {
    require(cfg, "config");
    require(out, "out");
    *out = copy_string(cfg->cfg.to_json().dump(2));
  });
}

pf_status pf_config_seed(const pf_config* cfg, uint64_t* out) {
  return guard([&] {
    require(cfg, "config");
    require(out, "out");
    *out = cfg->cfg.seed;
  });
}

void pf_config_free(pf_config* cfg) { delete cfg; }

// --- dataset ------------------------------------------------------------------

pf_status pf_dataset_from_config(const pf_config* cfg, pf_dataset** out) {
  return guard([&] {
    require(cfg, "config");
    emit(out, pf::campaign_dataset(cfg->cfg));
  });
}

pf_status pf_dataset_ingest(const char* path, const char* format, int min_user_acts, int min_item_acts,
                            pf_dataset** out) {
  return guard([&] {
    require(path, "path");
    require(format, "format");
    const auto log = pf::ingest_interactions(path, pf::parse_log_format(format));
    emit(out, pf::build_dataset(log, min_user_acts, min_item_acts));
  });
}

pf_status pf_dataset_load(const char* path, pf_dataset** out) {
  return guard([&] {
    require(path, "path");
    emit(out, pf::Dataset::load(path));
  });
}

pf_status pf_dataset_save(const pf_dataset* ds, const char* path) {
  return guard([&] {
    require(ds, "dataset");
    require(path, "path");
    ds->ds.save(path);
  });
}

pf_status pf_dataset_size(const pf_dataset* ds, size_t* users, size_t* items) {
  return guard([&] {
    require(ds, "dataset");
    if (users) *users = ds->ds.num_users();
    if (items) *items = ds->ds.num_items();
  });
}

void pf_dataset_free(pf_dataset* ds) { delete ds; }

// --- targets ------------------------------------------------------------------

pf_status pf_targets_select(const pf_config* cfg, const pf_dataset* ds, pf_targets** out) {
  return guard([&] {
    require(cfg, "config");
    require(ds, "dataset");
    emit(out, pf::campaign_targets(cfg->cfg, ds->ds));
  });
}

pf_status pf_targets_load(const char* path, pf_targets** out) {
  return guard([&] {
    require(path, "path");
    std::ifstream in(path);
    if (!in) throw pf::Error(pf::ErrorCode::kIo, std::string("cannot read ") + path);
    emit(out, pf::TargetSpec::from_json(json::parse(in)));
  });
}

pf_status pf_targets_save(const pf_targets* t, const char* path) {
  return guard([&] {
    require(t, "targets");
    require(path, "path");
    std::ofstream o(path);
    if (!o) throw pf::Error(pf::ErrorCode::kIo, std::string("cannot write ") + path);
    o << t->spec.to_json().dump(1) << '\n';
  });
}

pf_status pf_targets_size(const pf_targets* t, size_t* items, size_t* users) {
  return guard([&] {
    require(t, "targets");
    if (items) *items = t->spec.items.size();
    if (users) *users = t->spec.users.size();
  });
}

void pf_targets_free(pf_targets* t) { delete t; }

// --- models -------------------------------------------------------------------

pf_status pf_model_train(const pf_config* cfg, const pf_dataset* ds, const char* kind, uint64_t seed,
                         pf_model** out) {
  return guard([&] {
    require(cfg, "config");
    require(ds, "dataset");
    require(kind, "kind");
    const auto k = pf::parse_model_kind(kind);
    emit(out, pf::train_model(k, ds->ds, cfg->cfg.hyper(k), seed));
  });
}

pf_status pf_model_load(const char* path, pf_model** out) {
  return guard([&] {
    require(path, "path");
    emit(out, pf::Recommender::load(path));
  });
}

pf_status pf_model_save(const pf_model* m, const char* path) {
  return guard([&] {
    require(m, "model");
    require(path, "path");
    m->model->save(path);
  });
}

pf_status pf_model_top_k(const pf_model* m, const pf_dataset* ds, int32_t user, size_t k, int32_t* out_items,
                         size_t* count) {
  return guard([&] {
    require(m, "model");
    require(ds, "dataset");
    require(out_items, "out_items");
    require(count, "count");
    if (user < 0 || static_cast<size_t>(user) >= ds->ds.num_users() ||
        static_cast<size_t>(user) >= m->model->num_users()) {
      throw pf::Error(pf::ErrorCode::kInvalidArgument, "user out of range");
    }
    const auto top = pf::top_k(*m->model, user, ds->ds.train(user), k, true);
    std::copy(top.items.begin(), top.items.end(), out_items);
    *count = top.items.size();
  });
}

void pf_model_free(pf_model* m) { delete m; }

// --- ensemble -----------------------------------------------------------------

pf_status pf_ensemble_train(const pf_config* cfg, const pf_dataset* ds, pf_ensemble** out) {
  return guard([&] {
    require(cfg, "config");
    require(ds, "dataset");
    emit(out, pf::train_simulator(cfg->cfg, ds->ds));
  });
}

pf_status pf_ensemble_save(const pf_ensemble* e, const char* index_path) {
  return guard([&] {
    require(e, "ensemble");
    require(index_path, "path");
    const fs::path index(index_path);
    const fs::path dir = index.parent_path();
    json members = json::array();
    for (std::size_t m = 0; m < e->ens.members.size(); ++m) {
      const auto& model = *e->ens.members[m];
      const std::string file = "model_" + std::to_string(m) + "_" + std::string(pf::to_string(model.kind())) + ".json";
      model.save(dir / file);
      members.push_back({{"path", file}, {"weight", e->ens.weights[m]}, {"kind", pf::to_string(model.kind())}});
    }
    std::ofstream o(index);
    if (!o) throw pf::Error(pf::ErrorCode::kIo, "cannot write " + index.string());
    o << json{{"version", 1}, {"members", members}}.dump(1) << '\n';
  });
}

pf_status pf_ensemble_load(const char* index_path, pf_ensemble** out) {
  return guard([&] {
    require(index_path, "path");
    const fs::path index(index_path);
    std::ifstream in(index);
    if (!in) throw pf::Error(pf::ErrorCode::kIo, "cannot read " + index.string());
    const json j = json::parse(in);
    pf::Ensemble ens;
    for (const auto& m : j.at("members")) {
      ens.members.push_back(pf::Recommender::load(index.parent_path() / m.at("path").get<std::string>()));
      ens.weights.push_back(m.at("weight").get<double>());
    }
    ens.validate();
    emit(out, std::move(ens));
  });
}

pf_status pf_ensemble_size(const pf_ensemble* e, size_t* members) {
  return guard([&] {
    require(e, "ensemble");
    require(members, "members");
    *members = e->ens.members.size();
  });
}

void pf_ensemble_free(pf_ensemble* e) { delete e; }

// --- groups -------------------------------------------------------------------

pf_status pf_groups_build(const pf_config* cfg, const pf_dataset* ds, const pf_targets* t, pf_groups** out) {
  return guard([&] {
    require(cfg, "config");
    require(ds, "dataset");
    require(t, "targets");
    emit(out, pf::campaign_groups(cfg->cfg, ds->ds, t->spec));
  });
}

pf_status pf_groups_load(const char* path, pf_groups** out) {
  return guard([&] {
    require(path, "path");
    emit(out, pf::ItemGroups::load(path));
  });
}

pf_status pf_groups_save(const pf_groups* g, const char* path) {
  return guard([&] {
    require(g, "groups");
    require(path, "path");
    g->groups.save(path);
  });
}

pf_status pf_groups_size(const pf_groups* g, size_t* groups) {
  return guard([&] {
    require(g, "groups");
    require(groups, "groups out");
    *groups = g->groups.size();
  });
}

void pf_groups_free(pf_groups* g) { delete g; }

// --- agent --------------------------------------------------------------------

pf_status pf_agent_train(const pf_config* cfg, const pf_dataset* ds, const pf_targets* t, const pf_ensemble* e,
                         const pf_groups* g, pf_agent** out) {
  return guard([&] {
    require(cfg, "config");
    require(ds, "dataset");
    require(t, "targets");
    require(e, "ensemble");
    require(g, "groups");
    emit(out, pf::train_campaign_agent(cfg->cfg, ds->ds, t->spec, e->ens, g->groups, cfg->cfg.budget.m_actions));
  });
}

pf_status pf_agent_load(const char* path, pf_agent** out) {
  return guard([&] {
    require(path, "path");
    emit(out, pf::TrainedAgent::load(path));
  });
}

pf_status pf_agent_save(const pf_agent* a, const char* path) {
  return guard([&] {
    require(a, "agent");
    require(path, "path");
    a->agent.save(path);
  });
}

pf_status pf_agent_write_log(const pf_agent* a, const char* csv_path) {
  return guard([&] {
    require(a, "agent");
    require(csv_path, "path");
    a->agent.write_log_csv(csv_path);
  });
}

void pf_agent_free(pf_agent* a) { delete a; }

// --- attacks ------------------------------------------------------------------

pf_status pf_attack_generate(const pf_config* cfg, const char* attack, const pf_dataset* ds, const pf_targets* t,
                             const pf_groups* g, const pf_agent* a, pf_injection** out) {
  return guard([&] {
    require(cfg, "config");
    require(attack, "attack");
    require(ds, "dataset");
    require(t, "targets");
    emit(out, pf::generate_attack(cfg->cfg, pf::parse_attack_kind(attack), ds->ds, t->spec, cfg->cfg.budget,
                                  g ? &g->groups : nullptr, a ? &a->agent.net : nullptr));
  });
}

pf_status pf_injection_load(const char* path, const pf_dataset* ds, pf_injection** out) {
  return guard([&] {
    require(path, "path");
    require(ds, "dataset");
    emit(out, pf::InjectedSequences::load_jsonl(path, ds->ds));
  });
}

pf_status pf_injection_save(const pf_injection* inj, const pf_dataset* ds, const char* path) {
  return guard([&] {
    require(inj, "injection");
    require(ds, "dataset");
    require(path, "path");
    inj->seqs.save_jsonl(path, ds->ds);
  });
}

pf_status pf_injection_count(const pf_injection* inj, size_t* users) {
  return guard([&] {
    require(inj, "injection");
    require(users, "users");
    *users = inj->seqs.sequences.size();
  });
}

void pf_injection_free(pf_injection* inj) { delete inj; }

// --- evaluation ---------------------------------------------------------------

pf_status pf_evaluate(const pf_config* cfg, const pf_dataset* ds, const pf_targets* t, const pf_injection* inj,
                      const char* target_model, pf_report** out) {
  return guard([&] {
    require(cfg, "config");
    require(ds, "dataset");
    require(t, "targets");
    require(target_model, "target_model");
    const pf::InjectedSequences none{pf::AttackKind::kNone, {}};
    const auto& seqs = inj ? inj->seqs : none;
    pf::CampaignReport r;
    r.config = cfg->cfg.to_json();
    r.users = ds->ds.num_users();
    r.items = ds->ds.num_items();
    r.train_interactions = ds->ds.num_train_interactions();
    r.targets = t->spec;
    r.lengths.push_back({seqs.provenance, cfg->cfg.budget,
                         pf::length_distribution_report(ds->ds, pf::inject(ds->ds, seqs))});
    r.results.push_back(pf::evaluate_injection(cfg->cfg, ds->ds, t->spec, seqs,
                                               pf::parse_model_kind(target_model), cfg->cfg.budget));
    emit(out, std::move(r));
  });
}

pf_status pf_campaign_run(const pf_config* cfg, pf_report** out) {
  return guard([&] {
    require(cfg, "config");
    emit(out, pf::run_campaign(cfg->cfg));
  });
}

pf_status pf_sweep_run(const pf_config* cfg, int jobs, pf_report** out) {
  return guard([&] {
    require(cfg, "config");
    emit(out, pf::run_sweep(cfg->cfg, jobs));
  });
}

pf_status pf_report_json(const pf_report* r, char** out) {
  return guard([&] {
    require(r, "report");
    require(out, "out");
    *out = copy_string(r->report.to_json().dump(2));
  });
}

pf_status pf_report_write(const pf_report* r, const char* dir) {
  return guard([&] {
    require(r, "report");
    require(dir, "dir");
    r->report.write(dir);
  });
}

pf_status pf_report_display_rate(const pf_report* r, const char* attack, const char* target_model, double* out) {
  return guard([&] {
    require(r, "report");
    require(attack, "attack");
    require(target_model, "target_model");
    require(out, "out");
    *out = r->report.display_rate(pf::parse_attack_kind(attack), pf::parse_model_kind(target_model));
  });
}

void pf_report_free(pf_report* r) { delete r; }

// --- manifests ----------------------------------------------------------------

pf_status pf_hash_file(const char* path, char** out) {
  return guard([&] {
    require(path, "path");
    require(out, "out");
    *out = copy_string(pf::git_blob_hash_file(path));
  });
}

pf_status pf_manifest_new(const char* stage, pf_manifest** out) {
  return guard([&] {
    require(stage, "stage");
    pf::RunManifest m;
    m.stage = stage;
    emit(out, std::move(m));
  });
}

pf_status pf_manifest_set_config(pf_manifest* m, const pf_config* cfg) {
  return guard([&] {
    require(m, "manifest");
    require(cfg, "config");
    m->manifest.config = cfg->cfg.to_json();
  });
}

pf_status pf_manifest_add_seed(pf_manifest* m, const char* name, uint64_t seed) {
  return guard([&] {
    require(m, "manifest");
    require(name, "name");
    m->manifest.seeds.emplace_back(name, seed);
  });
}

pf_status pf_manifest_add_input(pf_manifest* m, const char* role, const char* path) {
  return guard([&] {
    require(m, "manifest");
    require(role, "role");
    require(path, "path");
    m->manifest.add_input(role, path);
  });
}

pf_status pf_manifest_add_output(pf_manifest* m, const char* role, const char* path) {
  return guard([&] {
    require(m, "manifest");
    require(role, "role");
    require(path, "path");
    m->manifest.add_output(role, path);
  });
}

pf_status pf_manifest_add_timing(pf_manifest* m, const char* name, double seconds) {
  return guard([&] {
    require(m, "manifest");
    require(name, "name");
    m->manifest.timings.emplace_back(name, seconds);
  });
}

pf_status pf_manifest_add_report_timings(pf_manifest* m, const pf_report* r) {
  return guard([&] {
    require(m, "manifest");
    require(r, "report");
    for (const auto& t : r->report.timings) m->manifest.timings.push_back(t);
  });
}

pf_status pf_manifest_write(const pf_manifest* m, const char* path) {
  return guard([&] {
    require(m, "manifest");
    require(path, "path");
    m->manifest.write(path);
  });
}

void pf_manifest_free(pf_manifest* m) { delete m; }

}  // extern "C"
