#ifndef RESAE_RESAE_H
#define RESAE_RESAE_H

/*
 * C interface to the residualized-SAE toolkit.
 *
 * Every function returns a resae_status. On failure, resae_last_error()
 * returns a message for the calling thread, valid until the next call on
 * that thread. Output pointers are written only on success.
 *
 * Objects are opaque handles released with the matching *_free function;
 * passing NULL to a *_free function is a no-op.
 */

#include <stddef.h>
#include <stdint.h>

#if defined(RESAE_BUILDING_LIBRARY)
#define RESAE_API __attribute__((visibility("default")))
#else
#define RESAE_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum resae_status {
  RESAE_OK = 0,
  RESAE_ERR_INVALID_ARGUMENT = 1,
  RESAE_ERR_OUT_OF_RANGE = 2,
  RESAE_ERR_DIMENSION_MISMATCH = 3,
  RESAE_ERR_IO = 4,
  RESAE_ERR_FORMAT = 5,
  RESAE_ERR_NUMERICAL = 6,
  RESAE_ERR_STATE = 7,
  RESAE_ERR_INTERNAL = 99
} resae_status;

typedef enum resae_placement { RESAE_POST_BLOCK = 0, RESAE_POST_LAYERNORM = 1 } resae_placement;
typedef enum resae_chain_kind { RESAE_CHAIN_RAW = 0, RESAE_CHAIN_RESIDUAL = 1 } resae_chain_kind;
typedef enum resae_mode { RESAE_MODE_TEACHER = 0, RESAE_MODE_ONLINE = 1 } resae_mode;
typedef enum resae_topk_mode { RESAE_TOPK_PER_TOKEN = 0, RESAE_TOPK_BATCH = 1 } resae_topk_mode;

RESAE_API const char* resae_last_error(void);
RESAE_API const char* resae_status_name(resae_status status);
RESAE_API const char* resae_version(void);

/* Corpus ---------------------------------------------------------------- */

/* Labeled synthetic corpus at `path` plus `path`.labels. */
RESAE_API resae_status resae_gen_corpus(const char* path, size_t n_docs, int n_classes, int doc_len, uint64_t seed);

/* Language model --------------------------------------------------------- */

typedef struct resae_lm resae_lm;

typedef struct resae_lm_options {
  int n_layers, d_model, n_heads, d_ff, context_len;
  int steps, batch_size, warmup_steps;
  double lr;
  uint64_t seed;
} resae_lm_options;

RESAE_API void resae_lm_default_options(resae_lm_options* options);
/* Trains on the bytes of `corpus_path`; heldout_ce (nullable) receives the
 * final held-out cross-entropy in nats/token. */
RESAE_API resae_status resae_lm_train(const char* corpus_path, const resae_lm_options* options, resae_lm** out,
                                      double* heldout_ce);
RESAE_API resae_status resae_lm_load(const char* path, resae_lm** out);
RESAE_API resae_status resae_lm_save(const resae_lm* lm, const char* path);
RESAE_API void resae_lm_free(resae_lm* lm);
RESAE_API resae_status resae_lm_shape(const resae_lm* lm, int* n_layers, int* d_model, int* context_len);
/* Mean next-token cross-entropy over windows [first_window, first_window + n_windows). */
RESAE_API resae_status resae_lm_cross_entropy(const resae_lm* lm, const char* corpus_path, size_t first_window,
                                              size_t n_windows, double* out);

/* Activation capture ----------------------------------------------------- */

/* Writes ASH1 shards for ceil(n_tokens / context_len) windows starting at
 * first_window into `out_dir`. */
RESAE_API resae_status resae_capture(const resae_lm* lm, const char* corpus_path, const int* layers,
                                     size_t n_layers, size_t n_tokens, size_t first_window,
                                     resae_placement placement, const char* out_dir, size_t* n_shards);

/* Calibration ------------------------------------------------------------ */

/* Fits a chain over the shards in `shard_dir`. For residual chains,
 * heldout_r2 (nullable, n_layers - 1 entries) receives the held-out R^2 of
 * each consecutive map. */
RESAE_API resae_status resae_calibrate(const char* shard_dir, const int* layers, size_t n_layers,
                                       resae_chain_kind kind, double lambda_scale, double epsilon,
                                       const char* out_path, double* heldout_r2);

/* SAE training ----------------------------------------------------------- */

typedef struct resae_sae_options {
  int64_t dict_size;
  int k;
  double lr;
  int warmup_steps;
  double decay_fraction;
  int64_t batch_rows;
  int64_t total_rows;
  uint64_t seed;
  resae_topk_mode topk_mode;
} resae_sae_options;

RESAE_API void resae_sae_default_options(resae_sae_options* options);

/* Trains the SAE for block `block` of a chain. With chain_path NULL (or
 * "none") a raw chain over `layers` is computed from the same shards. The
 * directory of out_path becomes a stack directory: the chain is stored there
 * as chain.rch, and an existing different chain is an error. */
RESAE_API resae_status resae_train_sae(const char* shard_dir, const char* chain_path, const int* layers,
                                       size_t n_layers, int block, const resae_sae_options* options,
                                       const char* out_path, double* final_loss);

/* Interventions and evaluation ------------------------------------------ */

/* Replaces `layers_subset` ("all" or comma-separated layer ids) with the
 * stack's reconstructions over the given windows. Writes a JSON report when
 * report_path is non-NULL. */
RESAE_API resae_status resae_intervene(const resae_lm* lm, const char* stack_dir, const char* corpus_path,
                                       const char* layers_subset, resae_mode mode, size_t n_tokens,
                                       size_t first_window, const char* report_path, double* ce_clean,
                                       double* ce_replaced);

/* Full raw-vs-residual comparison; writes `out_path` (JSON) and a CSV of
 * per-layer values next to it. */
RESAE_API resae_status resae_eval(const resae_lm* lm, const char* raw_stack_dir, const char* resae_stack_dir,
                                  const char* corpus_path, size_t n_tokens, size_t first_window,
                                  const char* out_path);

/* Pipeline ---------------------------------------------------------------- */

typedef struct resae_config resae_config;

RESAE_API resae_status resae_config_new(resae_config** out);
RESAE_API resae_status resae_config_load(const char* path, resae_config** out);
RESAE_API resae_status resae_config_set(resae_config* config, const char* key, const char* value);
/* Number of recognised keys, and the name and current value of key i. The
 * returned strings live until the next call on the same config. */
RESAE_API size_t resae_config_key_count(void);
RESAE_API const char* resae_config_key_name(size_t index);
RESAE_API resae_status resae_config_get(const resae_config* config, const char* key, const char** value);
RESAE_API resae_status resae_config_validate(const resae_config* config);
RESAE_API void resae_config_free(resae_config* config);

typedef void (*resae_progress_fn)(const char* message, void* user);

/* Runs every pipeline stage under the config's out_dir. */
RESAE_API resae_status resae_run_pipeline(const resae_config* config, resae_progress_fn progress, void* user);

/* Captures calibration windows for all layers and writes held-out R^2 per
 * layer gap as JSON to out_path. */
RESAE_API resae_status resae_layer_gap(const resae_lm* lm, const char* corpus_path, const int* gaps, size_t n_gaps,
                                       size_t n_tokens, double lambda_scale, const char* out_path);

#ifdef __cplusplus
}
#endif

#endif /* RESAE_RESAE_H */
