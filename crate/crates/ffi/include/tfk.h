#ifndef TFK_H
#define TFK_H

/* Generated by cbindgen from tfk-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a fallible call. Anything but `Ok` leaves a message in
 * [`tfk_last_error`].
 */
typedef enum TfkStatus {
  TFK_STATUS_OK = 0,
  /**
   * A required pointer argument was `NULL`.
   */
  TFK_STATUS_NULL_ARGUMENT = 1,
  /**
   * Arguments were structurally valid but semantically rejected.
   */
  TFK_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A buffer length did not match the grid's voxel count.
   */
  TFK_STATUS_BUFFER_SIZE = 3,
  /**
   * File could not be read or decoded.
   */
  TFK_STATUS_IO = 4,
  /**
   * Internal invariant violation; report as a bug.
   */
  TFK_STATUS_INTERNAL = 5,
} TfkStatus;

/**
 * A scalar field (concentration or image) on a 3D grid.
 */
typedef struct TfkField TfkField;

/**
 * A trained velocity model loaded from a checkpoint.
 */
typedef struct TfkModel TfkModel;

/**
 * Per-voxel tissue labels on a 3D grid.
 */
typedef struct TfkTissue TfkTissue;

/**
 * Growth-model parameters; obtain defaults from
 * [`tfk_growth_params_default`] and override selectively.
 */
typedef struct TfkGrowthParams {
  /**
   * Proliferation rate, 1/day.
   */
  double rho;
  /**
   * White-matter diffusivity, mm^2/day.
   */
  double d_white;
  /**
   * Gray-matter diffusivity as a fraction of `d_white`.
   */
  double gray_ratio;
  /**
   * Seed center in voxel coordinates.
   */
  double seed_center[3];
  /**
   * Gaussian seed width, mm.
   */
  double seed_sigma;
  /**
   * Peak seed concentration in [0, 1].
   */
  double seed_amplitude;
} TfkGrowthParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static `MAJOR.MINOR.PATCH` string.
 */
const char *tfk_version(void);

/**
 * Message from the most recent failure on this thread, or `NULL` if none
 * has occurred. The pointer stays valid until the next failing call on the
 * same thread.
 */
const char *tfk_last_error(void);

/**
 * Build a tissue map from per-voxel codes in x-fastest order:
 * 0 background, 1 CSF, 2 gray matter, 3 white matter. `len` must equal
 * `nx*ny*nz`. Returns `NULL` on failure.
 *
 * # Safety
 * `codes` must point to `len` readable bytes.
 */
struct TfkTissue *tfk_tissue_new(size_t nx,
                                 size_t ny,
                                 size_t nz,
                                 double dx,
                                 double dy,
                                 double dz,
                                 const uint8_t *codes,
                                 size_t len);

/**
 * Build the synthetic head phantom used by the demo pipeline: an ellipsoid
 * brain with a gray-matter shell and a central CSF ventricle. Returns
 * `NULL` on failure.
 */
struct TfkTissue *tfk_tissue_head_phantom(size_t nx,
                                          size_t ny,
                                          size_t nz,
                                          double dx,
                                          double dy,
                                          double dz);

/**
 * Free a tissue map. `NULL` is ignored.
 *
 * # Safety
 * `tissue` must come from a `tfk_tissue_*` constructor and not be freed twice.
 */
void tfk_tissue_free(struct TfkTissue *tissue);

/**
 * Default growth parameters (seed centered at the voxel origin; set
 * `seed_center` before simulating).
 */
struct TfkGrowthParams tfk_growth_params_default(void);

/**
 * Run the growth solver and return the concentration field at `t_end`
 * days. `dt` must respect the explicit-scheme stability bound for the
 * largest diffusivity. Returns `NULL` on failure.
 *
 * # Safety
 * `tissue` and `params` must be valid pointers.
 */
struct TfkField *tfk_simulate_final(const struct TfkTissue *tissue,
                                    const struct TfkGrowthParams *params,
                                    double dt,
                                    double t_end);

/**
 * Grid dimensions of a field.
 *
 * # Safety
 * All pointers must be valid.
 */
enum TfkStatus tfk_field_dims(const struct TfkField *field, size_t *nx, size_t *ny, size_t *nz);

/**
 * Copy the field values into `out` in x-fastest order. `len` must equal
 * the voxel count reported by [`tfk_field_dims`].
 *
 * # Safety
 * `out` must point to `len` writable doubles.
 */
enum TfkStatus tfk_field_values(const struct TfkField *field, double *out, size_t len);

/**
 * Threshold a concentration field into a 0/1 whole-tumor mask written to
 * `out`. `len` must equal the voxel count.
 *
 * # Safety
 * `out` must point to `len` writable bytes.
 */
enum TfkStatus tfk_field_threshold(const struct TfkField *field,
                                   double threshold,
                                   uint8_t *out,
                                   size_t len);

/**
 * Free a field. `NULL` is ignored.
 *
 * # Safety
 * `field` must come from this library and not be freed twice.
 */
void tfk_field_free(struct TfkField *field);

/**
 * Load a model checkpoint and keep its averaged inference weights.
 * Returns `NULL` on failure.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
struct TfkModel *tfk_model_load(const char *path);

/**
 * Free a model. `NULL` is ignored.
 *
 * # Safety
 * `model` must come from [`tfk_model_load`] and not be freed twice.
 */
void tfk_model_free(struct TfkModel *model);

/**
 * Synthesize one image: condition the model on `tissue` plus the tumor
 * concentration `conc`, integrate the flow from seeded noise, and return
 * the image clamped to [0, 1]. `modality` is one of "T1", "T1c", "T2",
 * "FLAIR" (case-insensitive). Returns `NULL` on failure.
 *
 * # Safety
 * All pointers must be valid; `modality` must be NUL-terminated.
 */
struct TfkField *tfk_generate_image(const struct TfkModel *model,
                                    const struct TfkTissue *tissue,
                                    const struct TfkField *conc,
                                    const char *modality,
                                    size_t steps,
                                    uint64_t seed);

/**
 * Dice overlap between two 0/1 masks of `len` voxels (nonzero bytes count
 * as inside). Two empty masks score 1.
 *
 * # Safety
 * `a` and `b` must point to `len` readable bytes; `out` must be writable.
 */
enum TfkStatus tfk_dice(const uint8_t *a, const uint8_t *b, size_t len, double *out);

/**
 * PSNR in dB between two value buffers of `len` voxels, restricted to the
 * nonzero bytes of `mask` (pass `NULL` to use every voxel). Identical
 * inputs report the 99 dB sentinel.
 *
 * # Safety
 * `a` and `b` must point to `len` readable doubles; `mask` is `NULL` or
 * `len` readable bytes; `out` must be writable.
 */
enum TfkStatus tfk_psnr(const double *a,
                        const double *b,
                        const uint8_t *mask,
                        size_t len,
                        double data_max,
                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TFK_H */
