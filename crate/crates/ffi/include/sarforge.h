#ifndef SARFORGE_H
#define SARFORGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/*
 Result codes.
 */
typedef enum SarfStatus {
  SARF_STATUS_OK = 0,
  SARF_STATUS_NULL_ARGUMENT = 1,
  SARF_STATUS_INVALID_ARGUMENT = 2,
  SARF_STATUS_IO = 3,
  SARF_STATUS_FORMAT = 4,
  SARF_STATUS_INCOMPATIBLE = 5,
  SARF_STATUS_OUT_OF_RANGE = 6,
  SARF_STATUS_METRIC = 7,
  SARF_STATUS_PANIC = 8,
} SarfStatus;

/*
 An in-memory dataset.
 */
typedef struct SarfDataset SarfDataset;

/*
 A loaded network.
 */
typedef struct SarfModel SarfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message describing the last failure on this thread; empty after success.
 The pointer stays valid until the next call on this thread.
 */
const char *sarf_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *sarf_version(void);

/*
 Loads a `SARW` checkpoint into `*out`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SarfStatus sarf_model_load(const char *path, struct SarfModel **out);

/*
 Releases a model; null is ignored.

 # Safety
 `model` must come from [`sarf_model_load`] and not be used afterwards.
 */
void sarf_model_free(struct SarfModel *model);

/*
 Network depth and base channel count.

 # Safety
 All pointers must be valid.
 */
enum SarfStatus sarf_model_arch(const struct SarfModel *model,
                                uint32_t *depth,
                                uint32_t *base_channels);

/*
 Predicts a `height × width` SAR map (row-major, unclamped) from an input
 raster of the same size. Both sides must be divisible by `2^depth`.

 # Safety
 `input` and `output` must each hold `width * height` floats.
 */
enum SarfStatus sarf_model_predict(const struct SarfModel *model,
                                   const float *input,
                                   uintptr_t width,
                                   uintptr_t height,
                                   float *output);

/*
 Reads a `SARD` dataset into `*out`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SarfStatus sarf_dataset_open(const char *path, struct SarfDataset **out);

/*
 Releases a dataset; null is ignored.

 # Safety
 `dataset` must come from [`sarf_dataset_open`] and not be used afterwards.
 */
void sarf_dataset_free(struct SarfDataset *dataset);

/*
 Number of samples.

 # Safety
 Both pointers must be valid.
 */
enum SarfStatus sarf_dataset_len(const struct SarfDataset *dataset, uintptr_t *len);

/*
 Raster width and height shared by all samples.

 # Safety
 All pointers must be valid.
 */
enum SarfStatus sarf_dataset_shape(const struct SarfDataset *dataset,
                                   uintptr_t *width,
                                   uintptr_t *height);

/*
 Copies sample `index` into `input` and `target` (each `capacity` floats,
 at least width × height) and its W/kg scale into `norm_factor`.

 # Safety
 Buffers must hold `capacity` floats; `norm_factor` may be null.
 */
enum SarfStatus sarf_dataset_sample(const struct SarfDataset *dataset,
                                    uintptr_t index,
                                    float *input,
                                    float *target,
                                    uintptr_t capacity,
                                    double *norm_factor);

/*
 `100 · RMSE / max(truth)` over the whole raster.

 # Safety
 `pred` and `truth` must hold `width * height` floats; `out` must be valid.
 */
enum SarfStatus sarf_rmse_pct(const float *pred,
                              const float *truth,
                              uintptr_t width,
                              uintptr_t height,
                              double *out);

/*
 Mean SSIM (11×11 Gaussian window, σ 1.5, L = max(truth)).

 # Safety
 `pred` and `truth` must hold `width * height` floats; `out` must be valid.
 */
enum SarfStatus sarf_ssim(const float *pred,
                          const float *truth,
                          uintptr_t width,
                          uintptr_t height,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SARFORGE_H */
