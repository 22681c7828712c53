#ifndef INFOSSM_H
#define INFOSSM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Validation and numerical failures share their values with
// the command-line exit codes.
enum InfossmStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  INFOSSM_STATUS_OK = 0,
  // Bad arguments, shapes, files or configuration.
  INFOSSM_STATUS_VALIDATION = 2,
  // Non-finite objective, failed factorization or degenerate weights.
  INFOSSM_STATUS_NUMERICAL = 3,
  // A required pointer was null.
  INFOSSM_STATUS_NULL_POINTER = 4,
  // An internal panic was caught.
  INFOSSM_STATUS_PANIC = 5,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum InfossmStatus InfossmStatus;
#else
typedef int32_t InfossmStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

// Opaque trained model.
typedef struct InfossmModel InfossmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *infossm_version(void);

// Message of the last failed call on this thread, empty after a success.
// The pointer stays valid until the next library call on this thread.
const char *infossm_last_error(void);

// Load a model archive. On success `*out` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
InfossmStatus infossm_model_load(const char *path, struct InfossmModel **out);

// Train on a dataset CSV. `config_toml` holds config text and may be null
// for the default profile. `seed` overrides the config seed. On success
// `*out` owns a new handle; on failure it is set to null.
//
// # Safety
// String arguments must be NUL-terminated; `out` must be writable.
InfossmStatus infossm_model_train(const char *config_toml,
                                  const char *data_csv,
                                  uint64_t seed,
                                  struct InfossmModel **out);

// Write the model to an archive file.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
InfossmStatus infossm_model_save(const struct InfossmModel *model, const char *path);

// Release a handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void infossm_model_free(struct InfossmModel *model);

// Number of dynamics modes, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t infossm_model_num_modes(const struct InfossmModel *model);

// Latent state dimension, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t infossm_model_state_dim(const struct InfossmModel *model);

// Observation dimension, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t infossm_model_obs_dim(const struct InfossmModel *model);

// Length of the observation window the encoder expects, or 0.
//
// # Safety
// `model` must be null or a live handle.
size_t infossm_model_window(const struct InfossmModel *model);

// Noise-free observations of mode `code`'s mean dynamics from state `x1`.
// Writes `(steps + 1) * obs_dim` values row-major into `out`.
//
// # Safety
// `x1` must hold `x1_len` values and `out` room for `out_len` values.
InfossmStatus infossm_rollout(const struct InfossmModel *model,
                              const double *x1,
                              size_t x1_len,
                              size_t code,
                              size_t steps,
                              double *out,
                              size_t out_len);

// Particle-filter an observation window `y` (`t` rows of `d` values,
// row-major). Writes the filtered state means (`t * state_dim`) and the
// mode posteriors (`t * num_modes`), both row-major. Either output may be
// null with a zero length to skip it.
//
// # Safety
// Buffers must be valid for the stated lengths.
InfossmStatus infossm_track(const struct InfossmModel *model,
                            const double *y,
                            size_t t,
                            size_t d,
                            size_t particles,
                            uint64_t seed,
                            double *out_means,
                            size_t means_len,
                            double *out_code_probs,
                            size_t probs_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INFOSSM_H */
