#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "poisonforge/poisonforge.h"

#ifndef PF_TEST_DATA_DIR
#error "PF_TEST_DATA_DIR must point at tests/data"
#endif

namespace fs = std::filesystem;

namespace {

const std::string kTinyConfig = std::string(PF_TEST_DATA_DIR) + "/tiny_campaign.json";

struct Scratch {
  fs::path dir;
  Scratch() : dir(fs::temp_directory_path() / "pf_c_api_test") {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  std::string path(const char* name) const { return (dir / name).string(); }
};

}  // namespace

TEST_CASE("abi and status names") {
  pf_init_logging("error");
  CHECK(pf_abi_version() == PF_ABI_VERSION);
  CHECK(std::string(pf_status_name(PF_ERR_PARSE)) == "parse error");
  pf_config_free(nullptr);
  pf_string_free(nullptr);
}

TEST_CASE("errors come back as codes with a message") {
  pf_config* cfg = nullptr;
  CHECK(pf_config_load("/nonexistent/config.json", &cfg) == PF_ERR_IO);
  CHECK(cfg == nullptr);
  CHECK(std::string(pf_last_error()).find("/nonexistent/config.json") != std::string::npos);

  CHECK(pf_config_from_json("{not json", nullptr, &cfg) == PF_ERR_PARSE);
  CHECK(pf_config_load(nullptr, &cfg) == PF_ERR_INVALID_ARGUMENT);

  pf_dataset* ds = nullptr;
  CHECK(pf_dataset_ingest("/nonexistent/log.csv", "csv", 5, 5, &ds) == PF_ERR_IO);
  CHECK(pf_dataset_ingest("/nonexistent/log.csv", "xml", 5, 5, &ds) == PF_ERR_INVALID_ARGUMENT);
}

TEST_CASE("staged pipeline through the C interface") {
  Scratch scratch;
  pf_config* cfg = nullptr;
  REQUIRE(pf_config_load(kTinyConfig.c_str(), &cfg) == PF_OK);
  uint64_t seed = 0;
  CHECK(pf_config_seed(cfg, &seed) == PF_OK);
  CHECK(seed == 5);
  CHECK(pf_config_merge_patch(cfg, R"({"seed": 6})") == PF_OK);
  CHECK(pf_config_seed(cfg, &seed) == PF_OK);
  CHECK(seed == 6);

  pf_dataset* ds = nullptr;
  REQUIRE(pf_dataset_from_config(cfg, &ds) == PF_OK);
  size_t users = 0, items = 0;
  CHECK(pf_dataset_size(ds, &users, &items) == PF_OK);
  CHECK(users > 0);
  CHECK(pf_dataset_save(ds, scratch.path("ds.json").c_str()) == PF_OK);
  pf_dataset* ds2 = nullptr;
  REQUIRE(pf_dataset_load(scratch.path("ds.json").c_str(), &ds2) == PF_OK);
  size_t users2 = 0, items2 = 0;
  CHECK(pf_dataset_size(ds2, &users2, &items2) == PF_OK);
  CHECK(users2 == users);
  CHECK(items2 == items);
  pf_dataset_free(ds2);

  pf_targets* t = nullptr;
  REQUIRE(pf_targets_select(cfg, ds, &t) == PF_OK);
  size_t n_items = 0, n_users = 0;
  CHECK(pf_targets_size(t, &n_items, &n_users) == PF_OK);
  CHECK(n_items == 5);
  CHECK(n_users == 5);

  pf_model* model = nullptr;
  REQUIRE(pf_model_train(cfg, ds, "fpmc", 3, &model) == PF_OK);
  std::vector<int32_t> top(10);
  size_t count = 0;
  CHECK(pf_model_top_k(model, ds, 0, 10, top.data(), &count) == PF_OK);
  CHECK(count == 10);
  CHECK(pf_model_top_k(model, ds, -1, 10, top.data(), &count) == PF_ERR_INVALID_ARGUMENT);
  CHECK(pf_model_train(cfg, ds, "sasrec", 3, &model) == PF_ERR_INVALID_ARGUMENT);
  pf_model_free(model);

  pf_ensemble* ens = nullptr;
  REQUIRE(pf_ensemble_train(cfg, ds, &ens) == PF_OK);
  size_t members = 0;
  CHECK(pf_ensemble_size(ens, &members) == PF_OK);
  CHECK(members == 2);
  CHECK(pf_ensemble_save(ens, scratch.path("ensemble.json").c_str()) == PF_OK);
  pf_ensemble* ens2 = nullptr;
  CHECK(pf_ensemble_load(scratch.path("ensemble.json").c_str(), &ens2) == PF_OK);
  pf_ensemble_free(ens2);

  pf_groups* groups = nullptr;
  REQUIRE(pf_groups_build(cfg, ds, t, &groups) == PF_OK);
  size_t n_groups = 0;
  CHECK(pf_groups_size(groups, &n_groups) == PF_OK);
  CHECK(n_groups >= 2);

  pf_agent* agent = nullptr;
  REQUIRE(pf_agent_train(cfg, ds, t, ens, groups, &agent) == PF_OK);
  CHECK(pf_agent_save(agent, scratch.path("agent.json").c_str()) == PF_OK);

  pf_injection* inj = nullptr;
  CHECK(pf_attack_generate(cfg, "loki", ds, t, nullptr, nullptr, &inj) == PF_ERR_INVALID_ARGUMENT);
  REQUIRE(pf_attack_generate(cfg, "loki", ds, t, groups, agent, &inj) == PF_OK);
  size_t injected = 0;
  CHECK(pf_injection_count(inj, &injected) == PF_OK);
  CHECK(injected == static_cast<size_t>(std::llround(0.04 * static_cast<double>(users))));
  CHECK(pf_injection_save(inj, ds, scratch.path("inj.jsonl").c_str()) == PF_OK);

  pf_report* report = nullptr;
  REQUIRE(pf_evaluate(cfg, ds, t, inj, "bprmf", &report) == PF_OK);
  double dr = -1;
  CHECK(pf_report_display_rate(report, "loki", "bprmf", &dr) == PF_OK);
  CHECK(dr >= 0.0);
  CHECK(dr <= 1.0);
  CHECK(pf_report_display_rate(report, "random", "bprmf", &dr) == PF_ERR_INVALID_ARGUMENT);
  pf_report_free(report);

  pf_manifest* manifest = nullptr;
  REQUIRE(pf_manifest_new("evaluate", &manifest) == PF_OK);
  CHECK(pf_manifest_set_config(manifest, cfg) == PF_OK);
  CHECK(pf_manifest_add_seed(manifest, "master", 6) == PF_OK);
  CHECK(pf_manifest_add_input(manifest, "injection", scratch.path("inj.jsonl").c_str()) == PF_OK);
  CHECK(pf_manifest_add_output(manifest, "missing", scratch.path("nope").c_str()) != PF_OK);
  CHECK(pf_manifest_write(manifest, scratch.path("manifest.json").c_str()) == PF_OK);
  pf_manifest_free(manifest);

  char* hash = nullptr;
  CHECK(pf_hash_file(scratch.path("inj.jsonl").c_str(), &hash) == PF_OK);
  CHECK(std::string(hash).size() == 40);
  pf_string_free(hash);

  pf_injection_free(inj);
  pf_agent_free(agent);
  pf_groups_free(groups);
  pf_ensemble_free(ens);
  pf_targets_free(t);
  pf_dataset_free(ds);
  pf_config_free(cfg);
}

TEST_CASE("campaign through the C interface is reproducible") {
  pf_config* cfg = nullptr;
  REQUIRE(pf_config_load(kTinyConfig.c_str(), &cfg) == PF_OK);
  pf_report* a = nullptr;
  pf_report* b = nullptr;
  REQUIRE(pf_campaign_run(cfg, &a) == PF_OK);
  REQUIRE(pf_campaign_run(cfg, &b) == PF_OK);
  char* ja = nullptr;
  char* jb = nullptr;
  CHECK(pf_report_json(a, &ja) == PF_OK);
  CHECK(pf_report_json(b, &jb) == PF_OK);
  CHECK(std::string(ja) == std::string(jb));
  pf_string_free(ja);
  pf_string_free(jb);
  pf_report_free(a);
  pf_report_free(b);
  pf_config_free(cfg);
}
