#ifndef WSSHM_H
#define WSSHM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum WsshmStatus {
  WSSHM_STATUS_OK = 0,
  WSSHM_STATUS_NULL_POINTER = 1,
  WSSHM_STATUS_INVALID_ARGUMENT = 2,
  WSSHM_STATUS_DIMENSION_MISMATCH = 3,
  WSSHM_STATUS_IO = 4,
  WSSHM_STATUS_CHECKPOINT = 5,
  WSSHM_STATUS_CONFIG = 6,
  WSSHM_STATUS_INTERNAL = 7,
  WSSHM_STATUS_PANIC = 8,
} WsshmStatus;

/**
 * Opaque network handle.
 */
typedef struct WsshmNetwork WsshmNetwork;

/**
 * Per-image metrics; boundary fields are meaningful only when `has_boundary` is 1.
 */
typedef struct WsshmMetrics {
  double mse_whole;
  double sad_whole;
  double mse_boundary;
  double sad_boundary;
  uint8_t has_boundary;
} WsshmMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the next call.
 */
const char *wsshm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *wsshm_version(void);

/**
 * Builds a randomly initialised network. `preset` is "r101", "r18" or "r18_half";
 * `base_width` 0 keeps the preset width.
 *
 * # Safety
 * `preset` must be a NUL-terminated string and `out` a valid pointer.
 */
enum WsshmStatus wsshm_network_new(const char *preset,
                                   size_t base_width,
                                   uint64_t seed,
                                   struct WsshmNetwork **out);

/**
 * Loads a checkpoint written by the trainer or [`wsshm_network_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum WsshmStatus wsshm_network_load(const char *path, struct WsshmNetwork **out);

/**
 * # Safety
 * `net` must come from this library; `path` must be a NUL-terminated string.
 */
enum WsshmStatus wsshm_network_save(const struct WsshmNetwork *net, const char *path);

/**
 * Releases a handle; NULL is ignored.
 *
 * # Safety
 * `net` must come from this library and not be used afterwards.
 */
void wsshm_network_free(struct WsshmNetwork *net);

/**
 * # Safety
 * `net` and `out` must be valid pointers.
 */
enum WsshmStatus wsshm_network_parameter_count(const struct WsshmNetwork *net, size_t *out);

/**
 * Eval-mode forward pass at the input resolution. Either output may be NULL.
 *
 * # Safety
 * `rgb` must hold `3*height*width` values; non-NULL outputs `height*width`.
 */
enum WsshmStatus wsshm_network_predict(const struct WsshmNetwork *net,
                                       const double *rgb,
                                       size_t height,
                                       size_t width,
                                       double *out_matte,
                                       double *out_boundary);

/**
 * `out = matte * fg + (1 - matte) * bg`.
 *
 * # Safety
 * Image pointers must hold `3*height*width` values, `matte` `height*width`.
 */
enum WsshmStatus wsshm_composite(const double *fg,
                                 const double *bg,
                                 const double *matte,
                                 size_t height,
                                 size_t width,
                                 double *out);

/**
 * Marks pixels whose opacity lies strictly between 0.05 and 0.95.
 *
 * # Safety
 * `matte` and `out_mask` must hold `height*width` elements.
 */
enum WsshmStatus wsshm_extract_boundary(const double *matte,
                                        size_t height,
                                        size_t width,
                                        uint8_t *out_mask);

/**
 * Label blending: the pseudo matte where `boundary` is 1, the segmentation label elsewhere.
 *
 * # Safety
 * Every pointer must hold `height*width` elements.
 */
enum WsshmStatus wsshm_blend_matte(const double *pseudo_matte,
                                   const uint8_t *boundary,
                                   const uint8_t *seg,
                                   size_t height,
                                   size_t width,
                                   double *out);

/**
 * Whole and boundary-region MSE (x1e3) and SAD (/1e3) of `pred` against `gt`.
 *
 * # Safety
 * `pred` and `gt` must hold `height*width` values; `out` must be valid.
 */
enum WsshmStatus wsshm_image_metrics(const double *pred,
                                     const double *gt,
                                     size_t height,
                                     size_t width,
                                     struct WsshmMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WSSHM_H */
