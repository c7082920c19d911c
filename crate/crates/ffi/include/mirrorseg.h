#ifndef MIRRORSEG_H
#define MIRRORSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum MsStatus {
  MS_STATUS_OK = 0,
  MS_STATUS_NULL_POINTER = 1,
  MS_STATUS_INVALID_ARGUMENT = 2,
  MS_STATUS_IO = 3,
  MS_STATUS_SHAPE = 4,
  MS_STATUS_MODEL = 5,
  MS_STATUS_PANIC = 6,
} MsStatus;

/**
 * Opaque model handle.
 */
typedef struct MsModel MsModel;

/**
 * Binary-mask metrics of one prediction.
 */
typedef struct MsMetrics {
  double iou;
  double f_beta;
  double accuracy;
  double mae;
} MsMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ms_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *ms_last_error(void);

/**
 * Builds a freshly initialized toy-profile model with parameters drawn from `seed`.
 *
 * # Safety
 * `out` must be valid for a pointer write.
 */
enum MsStatus ms_model_new_toy(uint64_t seed, struct MsModel **out);

/**
 * Loads a checkpoint written by `mirrorseg train` (or [`ms_model_save`]).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for a pointer write.
 */
enum MsStatus ms_model_load(const char *path, struct MsModel **out);

/**
 * Writes the model to a checkpoint file.
 *
 * # Safety
 * `model` must come from this library; `path` must be a NUL-terminated string.
 */
enum MsStatus ms_model_save(const struct MsModel *model, const char *path);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void ms_model_free(struct MsModel *model);

/**
 * Square side the model resizes every frame to.
 *
 * # Safety
 * `model` must come from this library; `out` must be valid for a write.
 */
enum MsStatus ms_model_input_size(const struct MsModel *model, uint32_t *out);

/**
 * Mirror probability of every pixel of one RGB-D frame.
 *
 * `rgb` holds `3 * height * width` channel-major values, `depth` and `out_prob` hold
 * `height * width`. The output is at the frame's own size.
 *
 * # Safety
 * Every buffer must be valid for the stated number of elements.
 */
enum MsStatus ms_model_predict_frame(const struct MsModel *model,
                                     const float *rgb,
                                     const float *depth,
                                     uint32_t height,
                                     uint32_t width,
                                     float *out_prob);

/**
 * Greedy distance-filtered point selection over a row-major `height × width` map.
 *
 * Writes up to `max_points` `(x / width, y / height)` pairs to `out_xy` (`2 * max_points`
 * values), their responses to `out_scores` and the number written to `out_count`.
 *
 * # Safety
 * Every buffer must be valid for the stated number of elements.
 */
enum MsStatus ms_select_points(const double *values,
                               uint32_t height,
                               uint32_t width,
                               uint32_t max_points,
                               double min_distance,
                               double *out_xy,
                               double *out_scores,
                               uint32_t *out_count);

/**
 * IoU, F-beta, accuracy and MAE of `pred` (probabilities) against binary `gt`.
 *
 * # Safety
 * `pred` and `gt` must hold `len` values; `out` must be valid for a write.
 */
enum MsStatus ms_compute_metrics(const double *pred,
                                 const double *gt,
                                 size_t len,
                                 double threshold,
                                 struct MsMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIRRORSEG_H */
