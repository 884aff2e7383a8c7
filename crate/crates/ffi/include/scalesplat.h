#ifndef SCALESPLAT_H
#define SCALESPLAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  SCALESPLAT_STATUS_OK = 0,
  SCALESPLAT_STATUS_NULL_ARGUMENT = 1,
  SCALESPLAT_STATUS_INVALID_ARGUMENT = 2,
  SCALESPLAT_STATUS_IO = 3,
  SCALESPLAT_STATUS_FORMAT = 4,
  SCALESPLAT_STATUS_SYNTHESIS = 5,
  SCALESPLAT_STATUS_BUFFER_TOO_SMALL = 6,
  SCALESPLAT_STATUS_PANIC = 7,
} ScalesplatStatus;

/**
 * Opaque scene handle.
 */
typedef struct ScalesplatScene ScalesplatScene;

/**
 * Pinhole camera: row-major world-to-camera pose and intrinsics in pixels.
 */
typedef struct {
  double pose[16];
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} ScalesplatCamera;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *scalesplat_version(void);

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length plus one, so a
 * caller can size a buffer by passing `len = 0`.
 */
size_t scalesplat_last_error(char *buf, size_t len);

/**
 * Creates an empty scene.
 */
ScalesplatStatus scalesplat_scene_new(ScalesplatScene **out);

/**
 * Builds a one-layer scene from an image and a depth map seen by `camera`.
 * `rgb` holds `3 * width * height` row-major floats in [0, 1]; `depth` holds
 * `width * height` floats where values that are not positive and finite
 * mark missing depth.
 */
ScalesplatStatus scalesplat_scene_create_root(const float *rgb,
                                              const float *depth,
                                              const ScalesplatCamera *camera,
                                              uint32_t steps,
                                              uint64_t seed,
                                              ScalesplatScene **out);

ScalesplatStatus scalesplat_scene_load(const char *path, ScalesplatScene **out);

/**
 * Saves atomically; writes the byte count to `bytes_out` when non-null.
 */
ScalesplatStatus scalesplat_scene_save(const ScalesplatScene *scene,
                                       const char *path,
                                       uint64_t *bytes_out);

/**
 * Releases a handle. Null is ignored.
 */
void scalesplat_scene_free(ScalesplatScene *scene);

ScalesplatStatus scalesplat_scene_layer_count(const ScalesplatScene *scene, uint32_t *out);

ScalesplatStatus scalesplat_scene_surfel_count(const ScalesplatScene *scene, uint64_t *out);

/**
 * Number of committed layer additions since the scene was created or loaded.
 */
ScalesplatStatus scalesplat_scene_version(const ScalesplatScene *scene, uint64_t *out);

/**
 * Creation camera of `layer`.
 */
ScalesplatStatus scalesplat_scene_layer_camera(const ScalesplatScene *scene,
                                               uint32_t layer,
                                               ScalesplatCamera *out);

/**
 * Renders into caller buffers: `rgb` receives `3 * width * height`
 * row-major floats in [0, 1]; `depth` (optional) receives `width * height`
 * floats with 0 where no surface was hit.
 */
ScalesplatStatus scalesplat_render(const ScalesplatScene *scene,
                                   const ScalesplatCamera *camera,
                                   bool modulation,
                                   float *rgb,
                                   size_t rgb_len,
                                   float *depth,
                                   size_t depth_len);

/**
 * Adds a detail layer under `layer` using the built-in procedural provider.
 * `prompt` may be null (empty prompt). The handle is unchanged on failure.
 */
ScalesplatStatus scalesplat_scene_zoom_procedural(ScalesplatScene *scene,
                                                  uint32_t layer,
                                                  double center_u,
                                                  double center_v,
                                                  double factor,
                                                  const char *prompt,
                                                  uint64_t seed,
                                                  uint32_t steps,
                                                  uint32_t aux_views,
                                                  uint32_t *new_layer);

/**
 * Depth over the geometric-mean focal length.
 */
ScalesplatStatus scalesplat_native_scale(double depth, double fx, double fy, double *out);

/**
 * Opacity weight at `s_render` for the given bounds; pass NaN for an absent
 * parent or child bound.
 */
ScalesplatStatus scalesplat_opacity_weight(double s_render,
                                           double native,
                                           double parent,
                                           double child,
                                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCALESPLAT_H */
