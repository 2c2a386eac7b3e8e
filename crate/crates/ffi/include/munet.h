#ifndef MUNET_H
#define MUNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MunetMetricState {
  MUNET_METRIC_STATE_VALUE = 0,
  /**
   * The metric has no value for this input (e.g. distances to an empty
   * surface).
   */
  MUNET_METRIC_STATE_UNDEFINED = 1,
  /**
   * The class is absent from both masks.
   */
  MUNET_METRIC_STATE_NOT_APPLICABLE = 2,
} MunetMetricState;

typedef enum MunetStatus {
  MUNET_STATUS_OK = 0,
  MUNET_STATUS_NULL_POINTER = 1,
  MUNET_STATUS_INVALID_ARGUMENT = 2,
  MUNET_STATUS_SHAPE = 3,
  MUNET_STATUS_CONFIG = 4,
  MUNET_STATUS_IO = 5,
  MUNET_STATUS_CORRUPT = 6,
  MUNET_STATUS_TOPOLOGY = 7,
  MUNET_STATUS_NON_FINITE = 8,
  MUNET_STATUS_INTERNAL = 9,
} MunetStatus;

/**
 * Opaque network handle.
 */
typedef struct MunetNetwork MunetNetwork;

/**
 * Network geometry. `variant` is 0 for U-Net and 1 for mU-Net; the width
 * multiplier is `width_num / width_den`.
 */
typedef struct MunetNetworkConfig {
  size_t stages;
  size_t base_features;
  size_t in_channels;
  size_t out_classes;
  size_t input_extent;
  uint32_t variant;
  size_t width_num;
  size_t width_den;
} MunetNetworkConfig;

typedef struct MunetMetric {
  enum MunetMetricState state;
  /**
   * Meaningful only when `state` is `Value`; NaN otherwise.
   */
  double value;
} MunetMetric;

/**
 * Percentages for DSC, VOE and RVD; millimetres for ASSD and MSSD.
 */
typedef struct MunetClassMetrics {
  struct MunetMetric dsc;
  struct MunetMetric voe;
  struct MunetMetric rvd;
  struct MunetMetric assd;
  struct MunetMetric mssd;
} MunetClassMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty after a success. The
 * pointer stays valid until the next call into the library on this thread.
 */
const char *munet_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *munet_version(void);

/**
 * Fill `out` with the desk-scale geometry (three stages, one-eighth
 * width, 64² inputs, mU-Net).
 *
 * # Safety
 * `out` must be null or point to writable memory for one config.
 */
enum MunetStatus munet_network_config_desk(struct MunetNetworkConfig *out);

/**
 * Build a network and initialize its parameters from `seed`.
 *
 * # Safety
 * `config` must point to a valid config and `out` to writable storage for
 * one handle pointer.
 */
enum MunetStatus munet_network_new(const struct MunetNetworkConfig *config,
                                   uint64_t seed,
                                   struct MunetNetwork **out);

/**
 * Load a network, geometry included, from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable storage for
 * one handle pointer.
 */
enum MunetStatus munet_network_load(const char *path, struct MunetNetwork **out);

/**
 * Save parameters and batch-norm moments (no optimizer state).
 *
 * # Safety
 * `net` must be a live handle and `path` a NUL-terminated string.
 */
enum MunetStatus munet_network_save(const struct MunetNetwork *net, const char *path);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `net` must be null or a handle not yet freed.
 */
void munet_network_free(struct MunetNetwork *net);

/**
 * # Safety
 * `net` must be a live handle and `out` writable.
 */
enum MunetStatus munet_network_config(const struct MunetNetwork *net,
                                      struct MunetNetworkConfig *out);

/**
 * Number of trainable scalars; 0 for a null handle.
 *
 * # Safety
 * `net` must be null or a live handle.
 */
size_t munet_network_param_count(const struct MunetNetwork *net);

/**
 * Class scores (`n × classes × h × w`) for `n × in_channels × h × w`
 * images already scaled to `[0, 1]`.
 *
 * # Safety
 * `images` must hold `images_len` doubles and `scores` `scores_len`.
 */
enum MunetStatus munet_network_predict(struct MunetNetwork *net,
                                       const double *images,
                                       size_t images_len,
                                       size_t n,
                                       size_t h,
                                       size_t w,
                                       double *scores,
                                       size_t scores_len);

/**
 * Map intensities linearly from `[low, high]` to `[0, 1]` with clipping.
 *
 * # Safety
 * `input` and `output` must each hold `len` doubles; they may alias.
 */
enum MunetStatus munet_scale_intensity(const double *input,
                                       double *output,
                                       size_t len,
                                       double low,
                                       double high);

/**
 * Compare one class of a predicted and a reference label volume.
 * `dims` and `spacing` give `rank` (2 or 3) extents and voxel sizes in mm.
 *
 * # Safety
 * `dims` and `spacing` must hold `rank` values, `pred` and `truth` the
 * product of `dims` labels, and `out` must be writable.
 */
enum MunetStatus munet_evaluate_class(const uint16_t *pred,
                                      const uint16_t *truth,
                                      const size_t *dims,
                                      const double *spacing,
                                      size_t rank,
                                      uint16_t class_,
                                      struct MunetClassMetrics *out);

/**
 * Permeation rate of one object between two `h × w` maps already
 * normalized to `[0, 1]`. `object` holds one byte per pixel (non-zero is
 * inside); `any_below` selects the any-pixel quantifier instead of the
 * default all-pixels one.
 *
 * # Safety
 * `fm_a`, `fm_b` and `object` must each hold `h * w` elements and `out`
 * must be writable.
 */
enum MunetStatus munet_permeation_rate(const double *fm_a,
                                       const double *fm_b,
                                       const uint8_t *object,
                                       size_t h,
                                       size_t w,
                                       bool any_below,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MUNET_H */
