#ifndef CPPSO_H
#define CPPSO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum CppsoStatus {
  CPPSO_STATUS_OK = 0,
  CPPSO_STATUS_NULL_POINTER = 1,
  CPPSO_STATUS_INVALID_UTF8 = 2,
  CPPSO_STATUS_INVALID_ARGUMENT = 3,
  CPPSO_STATUS_INVALID_MODEL = 4,
  CPPSO_STATUS_UNPARSEABLE = 5,
  CPPSO_STATUS_IO = 6,
  CPPSO_STATUS_JSON = 7,
  CPPSO_STATUS_PANIC = 8,
} CppsoStatus;

// A trained chain loaded from a snapshot.
typedef struct CppsoChain CppsoChain;

// A model with either fixed weights or a prior to sample from.
typedef struct CppsoModel CppsoModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *cppso_last_error(void);

// Library version as a static string.
const char *cppso_version(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void cppso_string_free(char *s);

// Parses a model document (JSON). Sampling uses its weights when present,
// else its prior's predictive with no data.
//
// # Safety
// `json` must be a nul-terminated string; `out` must be writable.
enum CppsoStatus cppso_model_from_json(const char *json, struct CppsoModel **out);

// # Safety
// `model` must come from [`cppso_model_from_json`] and not have been freed.
void cppso_model_free(struct CppsoModel *model);

// Number of symbols, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t cppso_model_len(const struct CppsoModel *model);

// Fixed-point semantics of a weighted model as JSON.
//
// # Safety
// `model` must be a live handle; `out_json` must be writable.
enum CppsoStatus cppso_model_semantics(const struct CppsoModel *model, char **out_json);

// One run of `Sample(symbol, input)`. Writes the output symbol's index, or
// -1 if the run exhausted `budget` calls.
//
// # Safety
// `model` must be a live handle, the names nul-terminated, `out_index`
// writable.
enum CppsoStatus cppso_model_sample(const struct CppsoModel *model,
                                    const char *symbol,
                                    const char *input,
                                    uint32_t budget,
                                    uint64_t seed,
                                    int64_t *out_index);

// Draws one string from the model. `out_terminated` is false when the run
// hit the budget (the string is then a prefix).
//
// # Safety
// `model` must be a live handle and the outputs writable.
enum CppsoStatus cppso_model_generate(const struct CppsoModel *model,
                                      uint32_t budget,
                                      uint64_t seed,
                                      char **out_text,
                                      bool *out_terminated);

// Exhaustive bracket of `p(text)`: the probability of runs that print
// exactly `text`, and the mass cut off by the `depth` call budget.
//
// # Safety
// `model` must be a live handle, `text` nul-terminated, outputs writable.
enum CppsoStatus cppso_model_oracle(const struct CppsoModel *model,
                                    const char *string,
                                    uint32_t depth,
                                    double *out_matched,
                                    double *out_truncated);

// Loads a chain snapshot file written by an experiment run.
//
// # Safety
// `path` must be nul-terminated; `out` writable.
enum CppsoStatus cppso_chain_load(const char *path, struct CppsoChain **out);

// # Safety
// `chain` must come from [`cppso_chain_load`] and not have been freed.
void cppso_chain_free(struct CppsoChain *chain);

// Completed epochs, or 0 for a null handle.
//
// # Safety
// `chain` must be null or a live handle.
size_t cppso_chain_epoch(const struct CppsoChain *chain);

// Per-letter negative log-likelihood estimate of `string` under the chain;
// infinity when no particle produced it.
//
// # Safety
// `chain` must be a live handle, `string` nul-terminated, `out_nll` writable.
enum CppsoStatus cppso_chain_nll(const struct CppsoChain *chain,
                                 const char *string,
                                 size_t particles,
                                 uint64_t seed,
                                 double *out_nll);

// Posterior-mean weights, relation verdicts and parses as JSON.
//
// # Safety
// `chain` must be a live handle; `out_json` writable.
enum CppsoStatus cppso_chain_inspect(const struct CppsoChain *chain, char **out_json);

// Configuration JSON of a preset experiment (`A1`..`A7`).
//
// # Safety
// `id` must be nul-terminated; `out_json` writable.
enum CppsoStatus cppso_experiment_preset(const char *id, char **out_json);

// Runs an experiment from its configuration JSON, writing artifacts to
// `out_dir` unless it is null, and returns the report as JSON.
//
// # Safety
// `config_json` must be nul-terminated, `out_dir` null or nul-terminated,
// `out_report` writable.
enum CppsoStatus cppso_run_experiment(const char *config_json,
                                      const char *out_dir,
                                      char **out_report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CPPSO_H */
