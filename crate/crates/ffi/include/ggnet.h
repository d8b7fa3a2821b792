#ifndef GGNET_H
#define GGNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GgnetStatus {
  GGNET_STATUS_OK = 0,
  GGNET_STATUS_NULL_POINTER = 1,
  GGNET_STATUS_INVALID_ARGUMENT = 2,
  GGNET_STATUS_CONFIG_ERROR = 3,
  GGNET_STATUS_DATA_ERROR = 4,
  GGNET_STATUS_CHECKPOINT_ERROR = 5,
  GGNET_STATUS_NUMERIC_ERROR = 6,
  GGNET_STATUS_INTERNAL_ERROR = 7,
  GGNET_STATUS_PANIC = 8,
} GgnetStatus;

/**
 * A trained network loaded from a checkpoint. Opaque to C callers.
 */
typedef struct GgnetModel GgnetModel;

/**
 * Overlap and distance metrics of one prediction. When either mask is
 * empty the distances are undefined: `has_distances` is 0 and `hd` and
 * `abd` are NaN.
 */
typedef struct GgnetMetrics {
  double dice;
  double jaccard;
  double accuracy;
  double recall;
  double precision;
  double hd;
  double abd;
  uint8_t has_distances;
} GgnetMetrics;

/**
 * Synthetic phantom settings. Fill with [`ggnet_phantom_default_params`]
 * and adjust.
 */
typedef struct GgnetPhantomParams {
  size_t height;
  size_t width;
  double axes_min;
  double axes_max;
  double lesion_mean;
  double background_mean;
  double speckle;
  double shadow_prob;
  double blur;
  double irregularity;
  uint64_t seed;
} GgnetPhantomParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or an empty string.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *ggnet_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ggnet_version(void);

/**
 * Loads a checkpoint written by `ggnet train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer. On
 * success `*out` owns a model that must be released with
 * [`ggnet_model_free`].
 */
enum GgnetStatus ggnet_model_load(const char *path, struct GgnetModel **out);

/**
 * Releases a model. Null is accepted and ignored.
 *
 * # Safety
 * `model` must come from [`ggnet_model_load`] and not be used afterwards.
 */
void ggnet_model_free(struct GgnetModel *model);

/**
 * Number of trainable scalars in the model.
 *
 * # Safety
 * `model` must be a live model and `out` a valid pointer.
 */
enum GgnetStatus ggnet_model_parameter_count(const struct GgnetModel *model, size_t *out);

/**
 * Foreground probability per pixel. Both extents must be multiples of 16.
 *
 * # Safety
 * `image` and `out_prob` must each hold `height * width` elements.
 */
enum GgnetStatus ggnet_model_predict_prob(const struct GgnetModel *model,
                                          const double *image,
                                          size_t height,
                                          size_t width,
                                          double *out_prob);

/**
 * Binary segmentation: 1 where the probability exceeds `threshold`.
 *
 * # Safety
 * `image` and `out_mask` must each hold `height * width` elements.
 */
enum GgnetStatus ggnet_model_infer(const struct GgnetModel *model,
                                   const double *image,
                                   size_t height,
                                   size_t width,
                                   double threshold,
                                   uint8_t *out_mask);

/**
 * Compares a predicted mask with a ground-truth mask.
 *
 * # Safety
 * `pred` and `gt` must each hold `height * width` bytes; `out` must be valid.
 */
enum GgnetStatus ggnet_metrics(const uint8_t *pred,
                               const uint8_t *gt,
                               size_t height,
                               size_t width,
                               struct GgnetMetrics *out);

/**
 * One-pixel inner boundary of a mask.
 *
 * # Safety
 * `mask` and `out` must each hold `height * width` bytes.
 */
enum GgnetStatus ggnet_boundary(const uint8_t *mask, size_t height, size_t width, uint8_t *out);

/**
 * Writes the default phantom settings to `out`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum GgnetStatus ggnet_phantom_default_params(struct GgnetPhantomParams *out);

/**
 * Generates one phantom and its lesion mask.
 *
 * # Safety
 * `params` must be valid; `out_image` and `out_mask` must each hold
 * `params->height * params->width` elements.
 */
enum GgnetStatus ggnet_phantom(const struct GgnetPhantomParams *params,
                               double *out_image,
                               uint8_t *out_mask);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GGNET_H */
