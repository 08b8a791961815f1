#ifndef RPO_FFI_H
#define RPO_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum RpoStatus {
  RPO_STATUS_OK = 0,
  RPO_STATUS_NULL_POINTER = 1,
  RPO_STATUS_INVALID_ARGUMENT = 2,
  RPO_STATUS_SHAPE_MISMATCH = 3,
  RPO_STATUS_NON_FINITE = 4,
  RPO_STATUS_IO = 5,
  RPO_STATUS_UTF8 = 6,
  RPO_STATUS_PANIC = 7,
} RpoStatus;

// A policy model. Created by [`rpo_model_new`] or [`rpo_model_load`].
typedef struct RpoModel RpoModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. Valid until the
// next library call on the same thread.
const char *rpo_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *rpo_version(void);

// Creates a Gaussian-initialized model.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum RpoStatus rpo_model_new(size_t window,
                             size_t embed_dim,
                             size_t hidden,
                             uint64_t seed,
                             double init_scale,
                             struct RpoModel **out);

// Loads a checkpoint written by `rpo` or [`rpo_model_save`].
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum RpoStatus rpo_model_load(const char *path, struct RpoModel **out);

// Writes the model checkpoint to `path`.
//
// # Safety
// `model` must be a live handle; `path` must be a NUL-terminated string.
enum RpoStatus rpo_model_save(const struct RpoModel *model, const char *path);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void rpo_model_free(struct RpoModel *model);

// Number of parameters of the model.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum RpoStatus rpo_model_num_params(const struct RpoModel *model, size_t *out);

// Copies the flat parameter vector into `out` (`len` must equal the
// parameter count).
//
// # Safety
// `model` must be a live handle; `out` must hold `len` doubles.
enum RpoStatus rpo_model_params(const struct RpoModel *model, double *out, size_t len);

// Log-probability of `response` (plus end-of-sequence) given `prompt`.
//
// # Safety
// `model` must be a live handle; strings must be NUL-terminated; `out`
// must be writable.
enum RpoStatus rpo_model_logprob(const struct RpoModel *model,
                                 const char *prompt,
                                 const char *response,
                                 double *out);

// Generates up to `max_new` bytes. Temperature 0 decodes greedily. The
// result must be released with [`rpo_string_free`].
//
// # Safety
// `model` must be a live handle; `prompt` must be NUL-terminated; `out`
// must be writable.
enum RpoStatus rpo_model_decode(const struct RpoModel *model,
                                const char *prompt,
                                size_t max_new,
                                double temperature,
                                uint64_t seed,
                                char **out);

// Releases a string returned by the library. Null is ignored.
//
// # Safety
// `s` must be null or a string returned by this library, not yet freed.
void rpo_string_free(char *s);

// Row-softmax of `-distances / tau` for a row-major `m x n` matrix.
//
// # Safety
// `distances` and `out` must each hold `m * n` doubles.
enum RpoStatus rpo_weights_from_distances(const double *distances,
                                          size_t m,
                                          size_t n,
                                          double tau,
                                          double *out);

// Every entry `1 / n`.
//
// # Safety
// `out` must hold `m * n` doubles.
enum RpoStatus rpo_weights_uniform(size_t m, size_t n, double *out);

// `alpha` on the diagonal of an `m x m` matrix, `(1 - alpha)/(m - 1)`
// elsewhere.
//
// # Safety
// `out` must hold `m * m` doubles.
enum RpoStatus rpo_weights_diagonal(size_t m, double alpha, double *out);

// Contrast-matrix loss over `m` win and `n` lose log-ratios with row-major
// `m x n` weights. Gradient outputs may be null.
//
// # Safety
// Pointers must reference arrays of the stated lengths.
enum RpoStatus rpo_rpo_loss(const double *wins,
                            size_t m,
                            const double *loses,
                            size_t n,
                            const double *weights,
                            double beta,
                            double *out_loss,
                            double *grad_wins,
                            double *grad_loses);

// Pairwise logistic loss over `m` index-aligned pairs. Gradient outputs may
// be null.
//
// # Safety
// `wins` and `loses` must hold `m` doubles; gradient buffers likewise.
enum RpoStatus rpo_dpo_loss(const double *wins,
                            const double *loses,
                            size_t m,
                            double beta,
                            double *out_loss,
                            double *grad_wins,
                            double *grad_loses);

// Squared-margin loss over `m` index-aligned pairs. Gradient outputs may be
// null.
//
// # Safety
// `wins` and `loses` must hold `m` doubles; gradient buffers likewise.
enum RpoStatus rpo_ipo_loss(const double *wins,
                            const double *loses,
                            size_t m,
                            double beta,
                            double *out_loss,
                            double *grad_wins,
                            double *grad_loses);

// Prospect-style loss over `len` labeled log-ratios. The reference point is
// the clamped batch mean. `out_reference` and `grad` may be null.
//
// # Safety
// `log_ratios`, `desirable` and `grad` must hold `len` elements.
enum RpoStatus rpo_kto_loss(const double *log_ratios,
                            const bool *desirable,
                            size_t len,
                            double beta,
                            double weight_desirable,
                            double weight_undesirable,
                            double *out_loss,
                            double *out_reference,
                            double *grad);

// Probability that a response with reward `reward_w` beats one with reward
// `reward_l`.
//
// # Safety
// `out` must be writable.
enum RpoStatus rpo_bt_probability(double reward_w, double reward_l, double *out);

// Unit-norm hashed bag-of-words embedding of `text` into `out[dim]`.
//
// # Safety
// `text` must be NUL-terminated; `out` must hold `dim` doubles.
enum RpoStatus rpo_hashed_bow(const char *text_ptr, size_t dim, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RPO_FFI_H */
