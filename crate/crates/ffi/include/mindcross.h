#ifndef MINDCROSS_H
#define MINDCROSS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum McStatus {
  MC_STATUS_OK = 0,
  MC_STATUS_NULL_POINTER = 1,
  MC_STATUS_INVALID_ARGUMENT = 2,
  MC_STATUS_UNKNOWN_SUBJECT = 3,
  MC_STATUS_IO = 4,
  MC_STATUS_FORMAT = 5,
  MC_STATUS_NUMERIC = 6,
  MC_STATUS_BUFFER_TOO_SMALL = 7,
  MC_STATUS_PANIC = 8,
} McStatus;

/**
 * Opaque model handle.
 */
typedef struct McModel McModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mc_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `cap > 0`). Returns the full message length
 * excluding the terminator, or 0 when there is none.
 *
 * # Safety
 * `buf` must be NULL or point to `cap` writable bytes.
 */
size_t mc_last_error(char *buf, size_t cap);

/**
 * Loads a checkpoint written by `mindcross train` or `mindcross calibrate`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum McStatus mc_model_load(const char *path, struct McModel **out);

/**
 * Releases a model; NULL is ignored.
 *
 * # Safety
 * `model` must be NULL or a handle from [`mc_model_load`] not yet freed.
 */
void mc_model_free(struct McModel *model);

/**
 * Input length, embedding length, and number of subjects with a branch.
 *
 * # Safety
 * `model` must be a live handle; outputs must be writable or NULL.
 */
enum McStatus mc_model_dims(const struct McModel *model,
                            size_t *in_dim,
                            size_t *embed_dim,
                            size_t *n_subjects);

/**
 * Predicts `rows` semantic embeddings for `subject` from row-major inputs
 * `x` (`rows × in_dim`) into `out` (`rows × embed_dim`). Training subjects
 * use their own branch; calibrated subjects use Top-K collaboration with
 * the checkpoint's λ and K.
 *
 * # Safety
 * `model` must be a live handle, `subject` a NUL-terminated string, `x`
 * readable for `rows * in_dim` doubles and `out` writable for `out_len`.
 */
enum McStatus mc_model_predict(const struct McModel *model,
                               const char *subject,
                               const double *x,
                               size_t rows,
                               double *out,
                               size_t out_len);

/**
 * Copies the cached similarity of a calibrated subject over the training
 * subjects (in training order) into `out`.
 *
 * # Safety
 * `model` must be a live handle, `subject` a NUL-terminated string and
 * `out` writable for `out_len` doubles.
 */
enum McStatus mc_model_similarity(const struct McModel *model,
                                  const char *subject,
                                  double *out,
                                  size_t out_len);

/**
 * Differential-entropy features of a row-major `channels × samples`
 * window over the five standard EEG bands, channel-major into `out`
 * (`channels * 5` values).
 *
 * # Safety
 * `signal` must be readable for `channels * samples` doubles and `out`
 * writable for `out_len`.
 */
enum McStatus mc_de_feature(const double *signal,
                            size_t channels,
                            size_t samples,
                            double sample_rate,
                            double *out,
                            size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MINDCROSS_H */
