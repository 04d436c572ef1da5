/* C interface to the poisonforge library.
 *
 * Every fallible call returns a pf_status; on failure pf_last_error() describes the problem
 * (thread-local, valid until the next call on the same thread). Objects are opaque handles
 * released with their matching *_free function; strings returned through char** are
 * released with pf_string_free. Passing NULL to a *_free function is a no-op.
 */
#ifndef POISONFORGE_H
#define POISONFORGE_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(POISONFORGE_BUILDING_LIBRARY)
#    define PF_API __declspec(dllexport)
#  else
#    define PF_API __declspec(dllimport)
#  endif
#else
#  define PF_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

#define PF_ABI_VERSION 1

typedef enum pf_status {
  PF_OK = 0,
  PF_ERR_INVALID_ARGUMENT = 1,
  PF_ERR_IO = 2,
  PF_ERR_PARSE = 3,
  PF_ERR_NUMERIC = 4,
  PF_ERR_EMPTY = 5,
  PF_ERR_RUNTIME = 6
} pf_status;

typedef struct pf_config pf_config;
typedef struct pf_dataset pf_dataset;
typedef struct pf_targets pf_targets;
typedef struct pf_model pf_model;
typedef struct pf_ensemble pf_ensemble;
typedef struct pf_groups pf_groups;
typedef struct pf_agent pf_agent;
typedef struct pf_injection pf_injection;
typedef struct pf_report pf_report;
typedef struct pf_manifest pf_manifest;

PF_API int pf_abi_version(void);
PF_API const char* pf_last_error(void);
PF_API const char* pf_status_name(pf_status status);
PF_API void pf_string_free(char* s);
/* Log level from POISONFORGE_LOG, else `fallback` (trace|debug|info|warn|error|off). */
PF_API void pf_init_logging(const char* fallback);

/* Campaign configuration. */
PF_API pf_status pf_config_load(const char* path, pf_config** out);
PF_API pf_status pf_config_from_json(const char* json, const char* base_dir, pf_config** out);
/* RFC 7386 merge patch applied to the config's JSON form. */
PF_API pf_status pf_config_merge_patch(pf_config* cfg, const char* json_patch);
PF_API pf_status pf_config_to_json(const pf_config* cfg, char** out);
PF_API pf_status pf_config_seed(const pf_config* cfg, uint64_t* out);
PF_API void pf_config_free(pf_config* cfg);

/* Datasets. format is "csv" or "jsonl". */
PF_API pf_status pf_dataset_from_config(const pf_config* cfg, pf_dataset** out);
PF_API pf_status pf_dataset_ingest(const char* path, const char* format, int min_user_acts,
                                   int min_item_acts, pf_dataset** out);
PF_API pf_status pf_dataset_load(const char* path, pf_dataset** out);
PF_API pf_status pf_dataset_save(const pf_dataset* ds, const char* path);
PF_API pf_status pf_dataset_size(const pf_dataset* ds, size_t* users, size_t* items);
PF_API void pf_dataset_free(pf_dataset* ds);

/* Attack targets. */
PF_API pf_status pf_targets_select(const pf_config* cfg, const pf_dataset* ds, pf_targets** out);
PF_API pf_status pf_targets_load(const char* path, pf_targets** out);
PF_API pf_status pf_targets_save(const pf_targets* t, const char* path);
PF_API pf_status pf_targets_size(const pf_targets* t, size_t* items, size_t* users);
PF_API void pf_targets_free(pf_targets* t);

/* Recommenders. kind is "bprmf" or "fpmc"; hyperparameters come from the config. */
PF_API pf_status pf_model_train(const pf_config* cfg, const pf_dataset* ds, const char* kind,
                                uint64_t seed, pf_model** out);
PF_API pf_status pf_model_load(const char* path, pf_model** out);
PF_API pf_status pf_model_save(const pf_model* m, const char* path);
/* Top-k items for user u of ds (training history excluded). out_items holds k entries; *count
 * receives the number written. */
PF_API pf_status pf_model_top_k(const pf_model* m, const pf_dataset* ds, int32_t user, size_t k,
                                int32_t* out_items, size_t* count);
PF_API void pf_model_free(pf_model* m);

/* Simulator ensemble. Saved as an index file plus one checkpoint per member next to it. */
PF_API pf_status pf_ensemble_train(const pf_config* cfg, const pf_dataset* ds, pf_ensemble** out);
PF_API pf_status pf_ensemble_load(const char* index_path, pf_ensemble** out);
PF_API pf_status pf_ensemble_save(const pf_ensemble* e, const char* index_path);
PF_API pf_status pf_ensemble_size(const pf_ensemble* e, size_t* members);
PF_API void pf_ensemble_free(pf_ensemble* e);

/* Action space. */
PF_API pf_status pf_groups_build(const pf_config* cfg, const pf_dataset* ds, const pf_targets* t,
                                 pf_groups** out);
PF_API pf_status pf_groups_load(const char* path, pf_groups** out);
PF_API pf_status pf_groups_save(const pf_groups* g, const char* path);
PF_API pf_status pf_groups_size(const pf_groups* g, size_t* groups);
PF_API void pf_groups_free(pf_groups* g);

/* Attack agent, trained for the config's budget horizon. */
PF_API pf_status pf_agent_train(const pf_config* cfg, const pf_dataset* ds, const pf_targets* t,
                                const pf_ensemble* e, const pf_groups* g, pf_agent** out);
PF_API pf_status pf_agent_load(const char* path, pf_agent** out);
PF_API pf_status pf_agent_save(const pf_agent* a, const char* path);
PF_API pf_status pf_agent_write_log(const pf_agent* a, const char* csv_path);
PF_API void pf_agent_free(pf_agent* a);

/* Injected sequences. attack is "none", "random", "popular" or "loki"; groups and agent may be
 * NULL unless attack is "loki". */
PF_API pf_status pf_attack_generate(const pf_config* cfg, const char* attack, const pf_dataset* ds,
                                    const pf_targets* t, const pf_groups* g, const pf_agent* a,
                                    pf_injection** out);
PF_API pf_status pf_injection_load(const char* path, const pf_dataset* ds, pf_injection** out);
PF_API pf_status pf_injection_save(const pf_injection* inj, const pf_dataset* ds, const char* path);
PF_API pf_status pf_injection_count(const pf_injection* inj, size_t* users);
PF_API void pf_injection_free(pf_injection* inj);

/* Evaluation. injection may be NULL for the no-attack control. */
PF_API pf_status pf_evaluate(const pf_config* cfg, const pf_dataset* ds, const pf_targets* t,
                             const pf_injection* inj, const char* target_model, pf_report** out);
PF_API pf_status pf_campaign_run(const pf_config* cfg, pf_report** out);
PF_API pf_status pf_sweep_run(const pf_config* cfg, int jobs, pf_report** out);
PF_API pf_status pf_report_json(const pf_report* r, char** out);
PF_API pf_status pf_report_write(const pf_report* r, const char* dir);
PF_API pf_status pf_report_display_rate(const pf_report* r, const char* attack, const char* target_model,
                                        double* out);
PF_API void pf_report_free(pf_report* r);

/* Run manifests. */
PF_API pf_status pf_hash_file(const char* path, char** out);
PF_API pf_status pf_manifest_new(const char* stage, pf_manifest** out);
PF_API pf_status pf_manifest_set_config(pf_manifest* m, const pf_config* cfg);
PF_API pf_status pf_manifest_add_seed(pf_manifest* m, const char* name, uint64_t seed);
PF_API pf_status pf_manifest_add_input(pf_manifest* m, const char* role, const char* path);
PF_API pf_status pf_manifest_add_output(pf_manifest* m, const char* role, const char* path);
PF_API pf_status pf_manifest_add_timing(pf_manifest* m, const char* name, double seconds);
PF_API pf_status pf_manifest_add_report_timings(pf_manifest* m, const pf_report* r);
PF_API pf_status pf_manifest_write(const pf_manifest* m, const char* path);
PF_API void pf_manifest_free(pf_manifest* m);

#ifdef __cplusplus
}
#endif

#endif /* POISONFORGE_H */
