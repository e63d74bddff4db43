#ifndef DROPCLASS_H
#define DROPCLASS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DcMode {
  DC_MODE_BASELINE = 0,
  DC_MODE_DROPCLASS = 1,
  DC_MODE_ABLATION_NO_SUP = 2,
  DC_MODE_ABLATION_LABEL_DROP = 3,
} DcMode;

/**
 * Result of every fallible call.
 */
typedef enum DcStatus {
  DC_STATUS_OK = 0,
  DC_STATUS_NULL_POINTER = 1,
  DC_STATUS_INVALID_ARGUMENT = 2,
  DC_STATUS_IO = 3,
  DC_STATUS_FORMAT = 4,
  DC_STATUS_SHAPE = 5,
  DC_STATUS_CONFIG = 6,
  DC_STATUS_GENERATION = 7,
  DC_STATUS_NON_FINITE = 8,
  DC_STATUS_DOMAIN = 9,
  DC_STATUS_PANIC = 10,
} DcStatus;

/**
 * Opaque in-memory dataset split.
 */
typedef struct DcDataset DcDataset;

/**
 * Opaque trained or freshly initialized model.
 */
typedef struct DcModel DcModel;

/**
 * Training options; start from [`dc_train_options_default`].
 */
typedef struct DcTrainOptions {
  enum DcMode mode;
  /**
   * 0 uses the mode's default step count.
   */
  size_t iterations;
  size_t batch_size;
  float learning_rate;
  float momentum;
  float alpha;
  uint64_t seed;
} DcTrainOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL after a
 * success. Valid until the next call on the same thread.
 */
const char *dc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dc_version(void);

/**
 * Generates `count` samples of the default benchmark at `image_size`
 * pixels. `split` is 0 (train), 1 (val) or 2 (test); splits of one seed
 * never share samples.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
enum DcStatus dc_dataset_generate(size_t image_size,
                                  size_t count,
                                  uint64_t seed,
                                  uint32_t split,
                                  struct DcDataset **out);

/**
 * Loads one split of a dataset directory written by `dropclass gen-data`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum DcStatus dc_dataset_load(const char *dir, uint32_t split, struct DcDataset **out);

/**
 * Number of samples, or 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live dataset handle.
 */
size_t dc_dataset_len(const struct DcDataset *ds);

/**
 * Number of classes, or 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live dataset handle.
 */
size_t dc_dataset_num_classes(const struct DcDataset *ds);

/**
 * # Safety
 * `ds` must be NULL or a handle not yet freed.
 */
void dc_dataset_free(struct DcDataset *ds);

/**
 * Fresh model with `n_widths` extractor convs of the given widths.
 *
 * # Safety
 * `widths` must point to `n_widths` values; `out` must be writable.
 */
enum DcStatus dc_model_new(size_t num_classes,
                           const size_t *widths,
                           size_t n_widths,
                           uint64_t seed,
                           struct DcModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DcStatus dc_model_load(const char *path, struct DcModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum DcStatus dc_model_save(const struct DcModel *model, const char *path);

/**
 * Number of classes, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live model handle.
 */
size_t dc_model_num_classes(const struct DcModel *model);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void dc_model_free(struct DcModel *model);

/**
 * Per-pixel class of an `height x width` RGB image given row-major as
 * `height * width * 3` floats; writes `height * width` labels.
 *
 * # Safety
 * `image` must hold `height*width*3` floats and `labels` room for
 * `height*width` bytes.
 */
enum DcStatus dc_model_predict(const struct DcModel *model,
                               const float *image,
                               size_t height,
                               size_t width,
                               uint8_t *labels);

/**
 * Defaults for `mode`; the library's own defaults.
 */
struct DcTrainOptions dc_train_options_default(enum DcMode mode);

/**
 * Trains `model` in place on `train`.
 *
 * # Safety
 * `model` and `train` must be live handles; `options` must be valid.
 */
enum DcStatus dc_train(struct DcModel *model,
                       const struct DcDataset *train,
                       const struct DcTrainOptions *options);

/**
 * Mean IoU of `model` on `ds`.
 *
 * # Safety
 * Handles must be live; `miou` must be writable.
 */
enum DcStatus dc_evaluate_miou(const struct DcModel *model,
                               const struct DcDataset *ds,
                               double *miou);

/**
 * Mean over classes of the summed cosine similarity between a class's
 * classifier weights and every other class's.
 *
 * # Safety
 * `model` must be live; `out` must be writable.
 */
enum DcStatus dc_weight_correlation(const struct DcModel *model, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DROPCLASS_H */
