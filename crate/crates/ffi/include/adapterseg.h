#ifndef ADAPTERSEG_H
#define ADAPTERSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AsegStatus {
  ASEG_STATUS_OK = 0,
  ASEG_STATUS_NULL_POINTER = 1,
  ASEG_STATUS_INVALID_ARGUMENT = 2,
  ASEG_STATUS_CONFIG = 3,
  ASEG_STATUS_IO = 4,
  ASEG_STATUS_CHECKPOINT = 5,
  ASEG_STATUS_NUMERICAL = 6,
  ASEG_STATUS_BUFFER_TOO_SMALL = 7,
  ASEG_STATUS_PANIC = 8,
} AsegStatus;

typedef enum AsegPreset {
  ASEG_PRESET_CLIP_B = 0,
  ASEG_PRESET_TOY = 1,
} AsegPreset;

typedef enum AsegVariant {
  ASEG_VARIANT_V = 0,
  ASEG_VARIANT_VL = 1,
  ASEG_VARIANT_VLC = 2,
} AsegVariant;

typedef enum AsegKind {
  ASEG_KIND_SHALLOW = 0,
  ASEG_KIND_DENSE = 1,
} AsegKind;

typedef enum AsegSplit {
  ASEG_SPLIT_TRAIN = 0,
  ASEG_SPLIT_VAL = 1,
  ASEG_SPLIT_TEST = 2,
} AsegSplit;

/**
 * A dataset split into train, val and test.
 */
typedef struct AsegDataset AsegDataset;

/**
 * A trained or freshly loaded adapted model.
 */
typedef struct AsegModel AsegModel;

/**
 * Per-sample segmentation scores.
 */
typedef struct AsegScores {
  double dsc;
  double iou;
  double hd95;
} AsegScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or null if none.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *aseg_last_error(void);

/**
 * Closed-form trainable-parameter count of an adapter plan.
 *
 * # Safety
 * `out` must be a valid pointer to a `uint64_t`.
 */
enum AsegStatus aseg_count_params(enum AsegPreset preset,
                                  enum AsegVariant variant,
                                  enum AsegKind kind,
                                  size_t d_prime,
                                  uint64_t *out);

/**
 * Loads a checkpoint written by the `train` command.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum AsegStatus aseg_model_load(const char *path, struct AsegModel **out);

/**
 * # Safety
 * `model` must come from [`aseg_model_load`] and not be used afterwards.
 */
void aseg_model_free(struct AsegModel *model);

/**
 * Side length of the square images the model expects.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum AsegStatus aseg_model_image_size(const struct AsegModel *model, size_t *out);

/**
 * Number of trainable adapter parameters in the model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum AsegStatus aseg_model_trainable_count(const struct AsegModel *model, uint64_t *out);

/**
 * Predicts per-pixel logits for one image and prompt.
 *
 * `rgb` holds `size * size * 3` interleaved bytes in row-major order;
 * `logits` receives `size * size` values.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `prompt` must be
 * nul-terminated.
 */
enum AsegStatus aseg_model_predict(const struct AsegModel *model,
                                   const uint8_t *rgb,
                                   size_t rgb_len,
                                   const char *prompt,
                                   double *logits,
                                   size_t logits_len);

/**
 * Generates the synthetic distractor dataset in memory.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum AsegStatus aseg_dataset_generate(uint64_t seed,
                                      size_t n,
                                      size_t size,
                                      struct AsegDataset **out);

/**
 * Loads a dataset from a JSONL manifest.
 *
 * # Safety
 * `manifest` must be nul-terminated and `out` a valid pointer.
 */
enum AsegStatus aseg_dataset_load(const char *manifest, struct AsegDataset **out);

/**
 * # Safety
 * `dataset` must come from this library and not be used afterwards.
 */
void aseg_dataset_free(struct AsegDataset *dataset);

/**
 * Number of samples in one split.
 *
 * # Safety
 * `dataset` must be a live handle and `out` a valid pointer.
 */
enum AsegStatus aseg_dataset_len(const struct AsegDataset *dataset,
                                 enum AsegSplit split,
                                 size_t *out);

/**
 * Scores a model on one split, prompting each sample with its first prompt.
 *
 * # Safety
 * Handles must be live and `out` a valid pointer.
 */
enum AsegStatus aseg_evaluate(const struct AsegModel *model,
                              const struct AsegDataset *dataset,
                              enum AsegSplit split,
                              double threshold,
                              struct AsegScores *out);

/**
 * DSC, IoU and HD95 of two binary masks given as `height * width` bytes
 * (zero is background, anything else foreground).
 *
 * # Safety
 * `pred` and `gt` must each hold `height * width` bytes; `out` must be valid.
 */
enum AsegStatus aseg_mask_scores(const uint8_t *pred,
                                 const uint8_t *gt,
                                 size_t height,
                                 size_t width,
                                 struct AsegScores *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADAPTERSEG_H */
