/* C interface to the sera training laboratory. Generated by cbindgen; do not edit. */

#ifndef SERA_H
#define SERA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Loss family selector for [`SeraRunConfig`].
typedef enum SeraLoss {
  SERA_LOSS_DPO = 0,
  SERA_LOSS_IPO = 1,
  SERA_LOSS_SLIC = 2,
  SERA_LOSS_SIMPO = 3,
} SeraLoss;

// Status code returned by every entry point.
typedef enum SeraStatus {
  SERA_STATUS_OK = 0,
  // A required pointer argument was NULL.
  SERA_STATUS_NULL_POINTER = 1,
  // A string argument was not valid UTF-8.
  SERA_STATUS_INVALID_UTF8 = 2,
  // An argument or configuration violated a precondition.
  SERA_STATUS_INVALID_ARGUMENT = 3,
  // File or serialization failure.
  SERA_STATUS_IO = 4,
  // An index was outside the valid range.
  SERA_STATUS_OUT_OF_RANGE = 5,
  // A caller-supplied buffer was too small; retry with the reported size.
  SERA_STATUS_BUFFER_TOO_SMALL = 6,
  // The operation itself failed (e.g. training hit a non-finite loss).
  SERA_STATUS_FAILED = 7,
  // An internal panic was caught at the boundary.
  SERA_STATUS_PANIC = 8,
} SeraStatus;

// Opaque preference-dataset handle.
typedef struct SeraDataset SeraDataset;

// Opaque policy handle.
typedef struct SeraPolicy SeraPolicy;

// Opaque training-run handle.
typedef struct SeraRun SeraRun;

// Opaque synthetic world handle.
typedef struct SeraWorld SeraWorld;

// Plain-data run configuration; fill with [`sera_run_config_defaults`] and
// override fields as needed.
typedef struct SeraRunConfig {
  enum SeraLoss loss;
  double beta;
  // Number of training iterations T.
  size_t t_iters;
  // Ensemble coefficient in [0, 1].
  double gamma;
  // Offline pairs kept per iteration (top margins).
  size_t k;
  // Self-generated pairs added per iteration.
  size_t k_tilde;
  // Candidate completions per prompt when bootstrapping.
  size_t r_candidates;
  // Bootstrap sampling temperature.
  double temperature;
  // Bootstrap nucleus-sampling mass.
  double top_p;
  // Bootstrap response-length cap.
  size_t max_len;
  size_t epochs_per_iter;
  double lr;
  // Minibatch size; 0 trains full-batch.
  size_t batch;
  uint64_t seed;
} SeraRunConfig;

// Per-iteration training report (plain-data mirror).
typedef struct SeraIterationReport {
  size_t t;
  size_t dataset_size;
  size_t offline_kept;
  size_t bootstrapped_kept;
  double mean_loss_start;
  double mean_loss_end;
  size_t optimizer_steps;
  bool loss_increased;
  // Index of this iteration's snapshot in the run history.
  size_t snapshot_index;
  // Number of selected offline pair ids (see `sera_run_selected_ids`).
  size_t selected_len;
} SeraIterationReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *sera_version(void);

// Message for the most recent failure on this thread; empty string if none.
// The pointer is invalidated by the next failing call on the same thread.
const char *sera_last_error_message(void);

// Creates a synthetic preference world with `vocab` regular tokens and the
// given gold-logit sharpness.
enum SeraStatus sera_world_create(uint32_t vocab,
                                  double sharpness,
                                  uint64_t seed,
                                  struct SeraWorld **out);

void sera_world_free(struct SeraWorld *world);

// Number of regular tokens in the world's vocabulary.
enum SeraStatus sera_world_vocab_size(const struct SeraWorld *world, uint32_t *out);

// The world's default response-length cap.
enum SeraStatus sera_world_response_len_max(const struct SeraWorld *world, size_t *out);

// Uniform policy over the world's vocabulary.
enum SeraStatus sera_policy_uniform(const struct SeraWorld *world, struct SeraPolicy **out);

enum SeraStatus sera_policy_clone(const struct SeraPolicy *policy, struct SeraPolicy **out);

// Loads a policy from the text format written by `sera_policy_save` (and by
// the CLI).
enum SeraStatus sera_policy_load(const char *path, struct SeraPolicy **out);

enum SeraStatus sera_policy_save(const struct SeraPolicy *policy, const char *path);

void sera_policy_free(struct SeraPolicy *policy);

// Samples a labeled preference dataset from the world.
//
// `behavior` may be NULL for the uniform sampling policy. `max_len = 0`
// uses the world's default cap. Labels follow the gold ordering, then are
// corrupted at most once per pair: flipped with probability `flip_rate`,
// otherwise longer-wins with probability `length_bias_rate`.
enum SeraStatus sera_dataset_generate(const struct SeraWorld *world,
                                      const struct SeraPolicy *behavior,
                                      size_t n_pairs,
                                      double flip_rate,
                                      double length_bias_rate,
                                      bool stochastic_labels,
                                      double temperature,
                                      double top_p,
                                      size_t max_len,
                                      uint64_t seed,
                                      struct SeraDataset **out);

enum SeraStatus sera_dataset_len(const struct SeraDataset *dataset, size_t *out);

void sera_dataset_free(struct SeraDataset *dataset);

// Fits the reference policy by maximum likelihood on the dataset's chosen
// responses.
enum SeraStatus sera_policy_fit_sft(const struct SeraWorld *world,
                                    const struct SeraDataset *dataset,
                                    size_t epochs,
                                    double lr,
                                    struct SeraPolicy **out);

// Fills `out` with the stock configuration for `n_pairs` offline
// pairs under the given loss family.
enum SeraStatus sera_run_config_defaults(enum SeraLoss loss,
                                         size_t n_pairs,
                                         uint64_t seed,
                                         struct SeraRunConfig *out);

// Runs the full training loop: margin selection over the offline dataset,
// on-policy bootstrapping, and per-iteration retraining against the
// previous snapshot.
enum SeraStatus sera_train(const struct SeraWorld *world,
                           const struct SeraPolicy *sft,
                           const struct SeraDataset *dataset,
                           const struct SeraRunConfig *config,
                           struct SeraRun **out);

// Number of snapshots in the run history (T iterations plus the start).
enum SeraStatus sera_run_snapshot_count(const struct SeraRun *run, size_t *out);

// Clones snapshot `index` (0 is the starting policy) into a new handle.
enum SeraStatus sera_run_snapshot(const struct SeraRun *run, size_t index, struct SeraPolicy **out);

// Copies the report for iteration `t` (1-based) into `out`.
enum SeraStatus sera_run_report(const struct SeraRun *run,
                                size_t t,
                                struct SeraIterationReport *out);

// Writes the offline pair ids trained on at iteration `t` (ascending) into
// `buf`. Call with `cap = 0` to query the count via `written` alone;
// returns `BufferTooSmall` (with `written` set to the required count) when
// a non-zero `cap` is insufficient.
enum SeraStatus sera_run_selected_ids(const struct SeraRun *run,
                                      size_t t,
                                      uint64_t *buf,
                                      size_t cap,
                                      size_t *written);

void sera_run_free(struct SeraRun *run);

// Gold win-rate of policy `a` over policy `b` on `n_prompts` fresh prompts
// (ties count half). Responses are sampled from each policy under the given
// controls; `max_len = 0` uses the world's default cap. Prompt derivation
// matches the CLI's analyze command, so scores line up.
enum SeraStatus sera_win_rate(const struct SeraWorld *world,
                              const struct SeraPolicy *a,
                              const struct SeraPolicy *b,
                              size_t n_prompts,
                              double temperature,
                              double top_p,
                              size_t max_len,
                              uint64_t seed,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SERA_H */
