#ifndef HGNET_H
#define HGNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HgStatus {
  HG_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  HG_STATUS_NULL = 1,
  HG_STATUS_CONFIG = 2,
  HG_STATUS_DATA = 3,
  HG_STATUS_IO = 4,
  HG_STATUS_USAGE = 5,
  HG_STATUS_TRAINING = 6,
  /**
   * The engine panicked; the handle involved should be freed.
   */
  HG_STATUS_PANIC = 7,
} HgStatus;

/**
 * A network structure with its parameters.
 */
typedef struct HgNetwork HgNetwork;

/**
 * Accuracy and compute of one model, as used by [`hg_tradeoff`].
 */
typedef struct HgModelStats {
  /**
   * Mean PCKh in percent.
   */
  double pckh;
  double params;
  double madds;
} HgModelStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds a network from an architecture JSON string with parameters
 * initialized from `seed`. On success `*out` owns a new handle.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HgStatus hg_network_from_json(const char *json, uint64_t seed, struct HgNetwork **out);

/**
 * Loads a checkpoint file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HgStatus hg_network_load_checkpoint(const char *path, struct HgNetwork **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `net` must come from this library and not be used afterwards.
 */
void hg_network_free(struct HgNetwork *net);

/**
 * Number of trainable parameters.
 *
 * # Safety
 * Pointers must be valid.
 */
enum HgStatus hg_network_param_count(const struct HgNetwork *net, uint64_t *out);

/**
 * Multiply-adds for one image at the configured input resolution.
 *
 * # Safety
 * Pointers must be valid.
 */
enum HgStatus hg_network_madds(const struct HgNetwork *net, uint64_t *out);

/**
 * Input resolution, heatmap resolution and joint count.
 *
 * # Safety
 * Pointers must be valid.
 */
enum HgStatus hg_network_dims(const struct HgNetwork *net,
                              size_t *input_res,
                              size_t *heatmap_res,
                              size_t *joints);

/**
 * Runs inference on `batch` images laid out as `batch×3×R×R` floats and
 * writes the final stack's heatmaps, `batch×J×R/4×R/4`, into `heatmaps`.
 * Array lengths are in elements and must match exactly.
 *
 * # Safety
 * `images` and `heatmaps` must be valid for the given lengths.
 */
enum HgStatus hg_network_forward(const struct HgNetwork *net,
                                 const float *images,
                                 size_t images_len,
                                 size_t batch,
                                 float *heatmaps,
                                 size_t heatmaps_len);

/**
 * PCKh at `threshold` (0.5 for PCKh@0.5) as a fraction in `[0, 1]`,
 * averaged over the visible scored joints (pelvis and thorax are not
 * scored). `pred` and `gt` hold `n×16×2` coordinates, `visible` `n×16`
 * flags and `head_size` `n` values.
 *
 * # Safety
 * Arrays must be valid for the lengths implied by `n`.
 */
enum HgStatus hg_pckh(const double *pred,
                      const double *gt,
                      const uint8_t *visible,
                      const double *head_size,
                      size_t n,
                      double threshold,
                      double *out);

/**
 * Weighted accuracy/compute tradeoff of `candidate` against `baseline`;
 * `weights` holds `w_acc, w_params, w_madds`.
 *
 * # Safety
 * Pointers must be valid; `weights` must hold three values.
 */
enum HgStatus hg_tradeoff(const struct HgModelStats *baseline,
                          const struct HgModelStats *candidate,
                          const double *weights,
                          double *out);

/**
 * Message of the last failed call on this thread, empty after a success.
 * Valid until the next call on the same thread.
 */
const char *hg_last_error(void);

const char *hg_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HGNET_H */
