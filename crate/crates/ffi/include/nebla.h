#ifndef NEBLA_H
#define NEBLA_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum NeblaStatus {
  NEBLA_STATUS_OK = 0,
  NEBLA_STATUS_NULL_POINTER = 1,
  NEBLA_STATUS_INVALID_ARGUMENT = 2,
  NEBLA_STATUS_CONFIG = 3,
  NEBLA_STATUS_DATA = 4,
  NEBLA_STATUS_NUMERICAL = 5,
  NEBLA_STATUS_IO = 6,
  NEBLA_STATUS_PANIC = 7,
} NeblaStatus;

/**
 * Axis-aligned maximum intensity projection planes.
 */
typedef enum NeblaPlane {
  NEBLA_PLANE_AXIAL = 0,
  NEBLA_PLANE_SAGITTAL = 1,
  NEBLA_PLANE_CORONAL = 2,
} NeblaPlane;

/**
 * A row-major `f32` image.
 */
typedef struct NeblaImage NeblaImage;

/**
 * A model with parameters restored from a checkpoint.
 */
typedef struct NeblaModel NeblaModel;

/**
 * A `(1, h, w, d)` volume of `f32` voxels, `d` fastest.
 */
typedef struct NeblaVolume NeblaVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *nebla_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *nebla_version(void);

/**
 * Procedural jaw phantom of spatial size `h x w x d`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum NeblaStatus nebla_phantom_new(size_t h,
                                   size_t w,
                                   size_t d,
                                   uint64_t seed,
                                   struct NeblaVolume **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NeblaStatus nebla_volume_load(const char *path, struct NeblaVolume **out);

/**
 * # Safety
 * `vol` must be a live handle and `path` a NUL-terminated string.
 */
enum NeblaStatus nebla_volume_save(const struct NeblaVolume *vol, const char *path);

/**
 * Writes `(c, h, w, d)` into `dims[0..4]`.
 *
 * # Safety
 * `vol` must be a live handle and `dims` point to four `size_t`.
 */
enum NeblaStatus nebla_volume_dims(const struct NeblaVolume *vol, size_t *dims);

/**
 * Voxel data (`c*h*w*d` floats), or NULL for a NULL handle.
 *
 * # Safety
 * `vol` must be NULL or a live handle.
 */
const float *nebla_volume_data(const struct NeblaVolume *vol);

/**
 * # Safety
 * `vol` must be NULL or a handle not freed before.
 */
void nebla_volume_free(struct NeblaVolume *vol);

/**
 * Renders the panoramic X-ray of `vol` with the geometry of the run
 * config at `config_path` (NULL selects the desk preset).
 *
 * # Safety
 * `vol` must be a live handle, `config_path` NULL or NUL-terminated, and
 * `out` a valid pointer.
 */
enum NeblaStatus nebla_render_px(const struct NeblaVolume *vol,
                                 const char *config_path,
                                 struct NeblaImage **out);

/**
 * # Safety
 * `vol` must be a live handle and `out` a valid pointer.
 */
enum NeblaStatus nebla_mip(const struct NeblaVolume *vol,
                           enum NeblaPlane plane,
                           struct NeblaImage **out);

/**
 * Loads an 8-bit binary PGM.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` a valid pointer.
 */
enum NeblaStatus nebla_image_load_pgm(const char *path, struct NeblaImage **out);

/**
 * Writes an 8-bit binary PGM, rounding and clamping to `[0, 255]`.
 *
 * # Safety
 * `img` must be a live handle and `path` NUL-terminated.
 */
enum NeblaStatus nebla_image_save_pgm(const struct NeblaImage *img, const char *path);

/**
 * # Safety
 * `img` must be a live handle; `rows` and `cols` valid pointers.
 */
enum NeblaStatus nebla_image_dims(const struct NeblaImage *img, size_t *rows, size_t *cols);

/**
 * Pixel data (`rows*cols` floats), or NULL for a NULL handle.
 *
 * # Safety
 * `img` must be NULL or a live handle.
 */
const float *nebla_image_data(const struct NeblaImage *img);

/**
 * # Safety
 * `img` must be NULL or a handle not freed before.
 */
void nebla_image_free(struct NeblaImage *img);

/**
 * Loads a checkpoint and rebuilds its model.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` a valid pointer.
 */
enum NeblaStatus nebla_model_load(const char *path, struct NeblaModel **out);

/**
 * Expected PX size and output volume dims of a model.
 *
 * # Safety
 * `model` must be a live handle, `image` point to two and `volume` to four
 * `size_t`.
 */
enum NeblaStatus nebla_model_dims(const struct NeblaModel *model, size_t *image, size_t *volume);

/**
 * Coarse field output and refined volume for one PX image. Either output
 * pointer may be NULL to skip it.
 *
 * # Safety
 * `model` and `px` must be live handles; non-NULL outputs valid pointers.
 */
enum NeblaStatus nebla_reconstruct(const struct NeblaModel *model,
                                   const struct NeblaImage *px,
                                   struct NeblaVolume **coarse,
                                   struct NeblaVolume **refined);

/**
 * # Safety
 * `model` must be NULL or a handle not freed before.
 */
void nebla_model_free(struct NeblaModel *model);

/**
 * PSNR in dB over a 255 range; `+inf` for identical volumes.
 *
 * # Safety
 * `a`, `b` must be live handles and `db` a valid pointer.
 */
enum NeblaStatus nebla_psnr(const struct NeblaVolume *a, const struct NeblaVolume *b, double *db);

/**
 * Mean SSIM over axial slices, in `[-1, 1]`.
 *
 * # Safety
 * `a`, `b` must be live handles and `ssim` a valid pointer.
 */
enum NeblaStatus nebla_ssim(const struct NeblaVolume *a, const struct NeblaVolume *b, double *ssim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NEBLA_H */
