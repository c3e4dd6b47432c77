#ifndef VICO_H
#define VICO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum VicoStatus {
  VICO_STATUS_OK = 0,
  VICO_STATUS_NULL_POINTER = 1,
  VICO_STATUS_INVALID_ARGUMENT = 2,
  VICO_STATUS_SHAPE = 3,
  VICO_STATUS_CONFIG = 4,
  VICO_STATUS_CHECKPOINT = 5,
  VICO_STATUS_IO = 6,
  VICO_STATUS_NON_FINITE = 7,
  VICO_STATUS_PANIC = 8,
} VicoStatus;

/**
 * Opaque trained model with its noise schedule.
 */
typedef struct VicoModel VicoModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *vico_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *vico_version(void);

/**
 * Otsu threshold over `n` values with `bins` histogram bins.
 *
 * # Safety
 * `values` must point to `n` readable doubles; `out_tau` and
 * `out_degenerate` must be writable.
 */
enum VicoStatus vico_otsu_threshold(const double *values,
                                    size_t n,
                                    size_t bins,
                                    double *out_tau,
                                    bool *out_degenerate);

/**
 * Binarizes a similarity column into `out_mask` (0/1 bytes, length `n`),
 * with the all-ones fallback for constant or empty results.
 *
 * # Safety
 * `values` must hold `n` doubles, `out_mask` room for `n` bytes and
 * `out_fallback` must be writable.
 */
enum VicoStatus vico_object_mask(const double *values,
                                 size_t n,
                                 size_t bins,
                                 uint8_t *out_mask,
                                 bool *out_fallback);

/**
 * Loads a checkpoint into a new handle written to `out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum VicoStatus vico_model_load(const char *path, struct VicoModel **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from [`vico_model_load`] and not be used afterwards.
 */
void vico_model_free(struct VicoModel *model);

/**
 * Latent shape `[C, H, W]` of the model.
 *
 * # Safety
 * `model` must be a live handle and `out_shape` room for 3 values.
 */
enum VicoStatus vico_model_latent_shape(const struct VicoModel *model, size_t *out_shape);

/**
 * Generates one latent with DDIM from `prompt` (one `{}` slot) and
 * `n_refs` reference latents laid out `[n_refs, C, H, W]`. Writes `C·H·W`
 * floats to `out`.
 *
 * # Safety
 * `references` must hold `n_refs·C·H·W` floats and `out` room for
 * `out_len ≥ C·H·W` floats.
 */
enum VicoStatus vico_model_sample(const struct VicoModel *model,
                                  const char *prompt,
                                  const float *references,
                                  size_t n_refs,
                                  size_t steps,
                                  uint64_t seed,
                                  float *out,
                                  size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VICO_H */
