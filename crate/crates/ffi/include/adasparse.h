#ifndef ADASPARSE_H
#define ADASPARSE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum AdasparseStatus {
  ADASPARSE_STATUS_OK = 0,
  ADASPARSE_STATUS_INVALID_ARGUMENT = 1,
  ADASPARSE_STATUS_INVALID_STATE = 2,
  ADASPARSE_STATUS_INVALID_CONFIG = 3,
  ADASPARSE_STATUS_IO = 4,
  ADASPARSE_STATUS_NULL_POINTER = 5,
  /**
   * Training produced a non-finite loss; the handle still holds the partial trace.
   */
  ADASPARSE_STATUS_DIVERGED = 6,
  ADASPARSE_STATUS_PANIC = 7,
} AdasparseStatus;

/**
 * Which normalizer to apply.
 */
typedef enum AdasparseKind {
  ADASPARSE_KIND_SOFTMAX = 0,
  ADASPARSE_KIND_SPARSEMAX = 1,
  ADASPARSE_KIND_ENTMAX15 = 2,
  /**
   * Bisection α-entmax; uses the `alpha` argument.
   */
  ADASPARSE_KIND_ENTMAX = 3,
} AdasparseKind;

/**
 * Decision rule of [`adasparse_hard_decode`].
 */
typedef enum AdasparseDecode {
  ADASPARSE_DECODE_THRESHOLD = 0,
  ADASPARSE_DECODE_SAMPLE = 1,
} AdasparseDecode;

/**
 * Opaque result of [`adasparse_train`].
 */
typedef struct AdasparseRun AdasparseRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes) and returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t adasparse_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *adasparse_version(void);

/**
 * Maps `n` logits to a probability vector in `out`. `kind` is an
 * [`AdasparseKind`] value; `temp` is used by softmax only and `alpha` by
 * `Entmax` only.
 *
 * # Safety
 * `logits` and `out` must each point to `n` doubles.
 */
enum AdasparseStatus adasparse_transform(int32_t kind,
                                         double alpha,
                                         double temp,
                                         const double *logits,
                                         size_t n,
                                         double *out);

/**
 * Vector-Jacobian product `Jᵀ v` of the transform at `logits`.
 *
 * # Safety
 * `logits`, `v` and `out` must each point to `n` doubles.
 */
enum AdasparseStatus adasparse_transform_vjp(int32_t kind,
                                             double alpha,
                                             double temp,
                                             const double *logits,
                                             const double *v,
                                             size_t n,
                                             double *out);

/**
 * ∂p/∂α of bisection α-entmax at `logits`, for 1 < α < 2.
 *
 * # Safety
 * `logits` and `out` must each point to `n` doubles.
 */
enum AdasparseStatus adasparse_alpha_grad(double alpha,
                                          const double *logits,
                                          size_t n,
                                          double *out);

/**
 * Expected monotonic alignment of a `steps × frames` selection-probability
 * matrix. Writes the alignment to `a_out` (same shape) and, if non-null,
 * the per-step mass that never fired to `leftover_out` (`steps` doubles).
 *
 * # Safety
 * `p` and `a_out` must point to `steps * frames` doubles; `leftover_out`
 * must be null or point to `steps` doubles.
 */
enum AdasparseStatus adasparse_expected_alignment(const double *p,
                                                  size_t steps,
                                                  size_t frames,
                                                  double *a_out,
                                                  double *leftover_out);

/**
 * Hard monotonic decoding. `path_out[i]` receives the attended frame of
 * step `i`, or -1 once the scan ran past the last frame. `mode` is an
 * [`AdasparseDecode`] value; `seed` is used by `Sample` mode only.
 *
 * # Safety
 * `p` must point to `steps * frames` doubles and `path_out` to `steps` integers.
 */
enum AdasparseStatus adasparse_hard_decode(const double *p,
                                           size_t steps,
                                           size_t frames,
                                           int32_t mode,
                                           uint64_t seed,
                                           int64_t *path_out);

/**
 * Trains the toy model from a run-config JSON string (same format as the
 * `train` command; nothing is written to disk). On success or divergence
 * `*run_out` receives a handle to free with [`adasparse_run_free`].
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `run_out` writable.
 */
enum AdasparseStatus adasparse_train(const char *config_json, struct AdasparseRun **run_out);

/**
 * Releases a run handle. Null is ignored.
 *
 * # Safety
 * `run` must come from [`adasparse_train`] and not be used afterwards.
 */
void adasparse_run_free(struct AdasparseRun *run);

/**
 * Held-out greedy token accuracy and best-head alignment accuracy
 * (both 0 for a diverged run).
 *
 * # Safety
 * `run` must be a live handle; the outputs must be writable.
 */
enum AdasparseStatus adasparse_run_accuracy(const struct AdasparseRun *run,
                                            double *token_accuracy,
                                            double *alignment_accuracy);

/**
 * Number of logged trace rows.
 *
 * # Safety
 * `run` must be a live handle and `len_out` writable.
 */
enum AdasparseStatus adasparse_run_trace_len(const struct AdasparseRun *run, size_t *len_out);

/**
 * Number of adaptive encoder heads, i.e. α values per trace row.
 *
 * # Safety
 * `run` must be a live handle and `len_out` writable.
 */
enum AdasparseStatus adasparse_run_alpha_heads(const struct AdasparseRun *run, size_t *len_out);

/**
 * Row `index` of the trace: its step, loss and `n_alphas` α values.
 *
 * # Safety
 * `run` must be a live handle; `step` and `loss` writable; `alphas` must
 * point to `n_alphas` doubles (null allowed when `n_alphas` is 0).
 */
enum AdasparseStatus adasparse_run_trace_row(const struct AdasparseRun *run,
                                             size_t index,
                                             uint64_t *step,
                                             double *loss,
                                             double *alphas,
                                             size_t n_alphas);

/**
 * Mean selection probability of each monotonic head on held-out samples.
 *
 * # Safety
 * `run` must be a live handle and `out` point to `n` doubles, where `n`
 * is the number of monotonic heads.
 */
enum AdasparseStatus adasparse_run_head_selection(const struct AdasparseRun *run,
                                                  double *out,
                                                  size_t n);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADASPARSE_H */
