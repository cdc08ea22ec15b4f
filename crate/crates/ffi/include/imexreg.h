#ifndef IMEXREG_H
#define IMEXREG_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ImexStatus {
  IMEX_STATUS_OK = 0,
  IMEX_STATUS_NULL_POINTER = 1,
  IMEX_STATUS_INVALID_ARGUMENT = 2,
  IMEX_STATUS_EMPTY_BUFFER = 3,
  IMEX_STATUS_SHAPE_MISMATCH = 4,
  IMEX_STATUS_NUMERIC_OVERFLOW = 5,
  IMEX_STATUS_DIVERGENCE = 6,
  IMEX_STATUS_INVALID_CONFIG = 7,
  IMEX_STATUS_IO = 8,
  IMEX_STATUS_PANIC = 9,
} ImexStatus;

/**
 * Reservoir-sampled replay buffer of fixed feature width.
 */
typedef struct ImexBuffer ImexBuffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * failing call on the same thread.
 */
const char *imexreg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *imexreg_version(void);

/**
 * Creates an empty buffer. `capacity` may be 0.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum ImexStatus imexreg_buffer_new(size_t capacity,
                                   size_t dim,
                                   uint64_t seed,
                                   struct ImexBuffer **out);

/**
 * # Safety
 * `buffer` must come from [`imexreg_buffer_new`] and not be used afterwards.
 */
void imexreg_buffer_free(struct ImexBuffer *buffer);

/**
 * Offers one sample. `task` < 0 means unknown. `out_slot` receives the slot
 * written or -1.
 *
 * # Safety
 * `features` must point to `dim` values; `out_slot` may be null.
 */
enum ImexStatus imexreg_buffer_insert(struct ImexBuffer *buffer,
                                      const double *features,
                                      size_t label,
                                      int64_t task,
                                      int64_t *out_slot);

/**
 * # Safety
 * `buffer` must be a live handle and `out_len`/`out_seen` valid or null.
 */
enum ImexStatus imexreg_buffer_stats(const struct ImexBuffer *buffer,
                                     size_t *out_len,
                                     uint64_t *out_seen);

/**
 * Draws up to `k` distinct stored items. Output arrays must hold `k` slots,
 * `k` labels and `k * dim` features; `out_count` receives the number drawn.
 *
 * # Safety
 * All pointers must be valid for the sizes above.
 */
enum ImexStatus imexreg_buffer_sample(struct ImexBuffer *buffer,
                                      size_t k,
                                      size_t *out_slots,
                                      size_t *out_labels,
                                      double *out_features,
                                      size_t *out_count);

/**
 * Mean cross-entropy of row-major `logits` (rows x classes).
 *
 * # Safety
 * `logits` holds `rows * classes` values and `labels` holds `rows`.
 */
enum ImexStatus imexreg_er_loss(const double *logits,
                                const size_t *labels,
                                size_t rows,
                                size_t classes,
                                double *out);

/**
 * Supervised contrastive loss of unit rows `z` (rows x dim), summed over
 * anchors.
 *
 * # Safety
 * `z` holds `rows * dim` values and `labels` holds `rows`.
 */
enum ImexStatus imexreg_supcon_loss(const double *z,
                                    const size_t *labels,
                                    size_t rows,
                                    size_t dim,
                                    double tau,
                                    double *out);

/**
 * Gram-matrix alignment loss between unit rows `z` (rows x dz) and `c`
 * (rows x dc).
 *
 * # Safety
 * `z` holds `rows * dz` values and `c` holds `rows * dc`.
 */
enum ImexStatus imexreg_ecr_loss(const double *z,
                                 const double *c,
                                 size_t rows,
                                 size_t dz,
                                 size_t dc,
                                 double *out);

/**
 * Mean forgetting from a packed lower-triangular accuracy matrix: row `i`
 * contributes `i + 1` values, `tasks * (tasks + 1) / 2` in total.
 *
 * # Safety
 * `packed` must hold that many values.
 */
enum ImexStatus imexreg_forgetting(const double *packed, size_t tasks, double *out);

/**
 * Smallest target dimension guaranteeing `epsilon` distortion for `n` points.
 *
 * # Safety
 * `out` must be valid.
 */
enum ImexStatus imexreg_jl_bound_dim(double epsilon, size_t n, size_t *out);

/**
 * Trains one run described by an experiment config (JSON text) and returns
 * its report as JSON in `out_report`, to be released with
 * [`imexreg_string_free`]. `method` is e.g. "imex-reg"; relative dataset
 * paths resolve against `base_dir`, which may be null.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out_report` must be valid.
 */
enum ImexStatus imexreg_run_json(const char *config_json,
                                 const char *method,
                                 uint64_t seed,
                                 const char *base_dir,
                                 char **out_report);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void imexreg_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IMEXREG_H */
