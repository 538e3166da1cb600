#ifndef POMP_H
#define POMP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum PompStatus {
  POMP_STATUS_OK = 0,
  POMP_STATUS_NULL_POINTER = 1,
  POMP_STATUS_INVALID_ARGUMENT = 2,
  POMP_STATUS_IO = 3,
  POMP_STATUS_FORMAT = 4,
  POMP_STATUS_DIGEST_MISMATCH = 5,
  POMP_STATUS_SHAPE_MISMATCH = 6,
  POMP_STATUS_NON_FINITE = 7,
  POMP_STATUS_BUFFER_TOO_SMALL = 8,
  POMP_STATUS_PANIC = 9,
} PompStatus;

/**
 * Encoder variants accepted by [`pomp_encoder_new`].
 */
typedef enum PompEncoderKind {
  POMP_ENCODER_KIND_MEAN_POOL_LINEAR = 0,
  POMP_ENCODER_KIND_MEAN_POOL_TWO_LAYER_TANH = 1,
} PompEncoderKind;

typedef struct PompDataset PompDataset;

typedef struct PompEncoder PompEncoder;

typedef struct PompPrompt PompPrompt;

typedef struct PompVocabulary PompVocabulary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len - 1` bytes). Returns the full message
 * length excluding the terminator; 0 when there is no error.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t pomp_last_error_message(char *buf, size_t len);

/**
 * `m = -ln((K - 1) / (N - 1))`.
 *
 * # Safety
 * `out` must point to a writable `double`.
 */
enum PompStatus pomp_adaptive_margin(size_t k, size_t n, double *out);

/**
 * Margin-corrected probability of `sims[positive]` among `len` similarities.
 *
 * # Safety
 * `sims` must point to `len` readable doubles and `out` to a writable one.
 */
enum PompStatus pomp_corrected_prob(const double *sims,
                                    size_t len,
                                    size_t positive,
                                    double tau,
                                    double margin,
                                    double *out);

/**
 * Loads a vocabulary file and its token embedding table.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be writable.
 */
enum PompStatus pomp_vocab_load(const char *vocab_path,
                                const char *embedding_path,
                                struct PompVocabulary **out);

/**
 * # Safety
 * `vocab` must be null or a handle from [`pomp_vocab_load`], freed once.
 */
void pomp_vocab_free(struct PompVocabulary *vocab);

/**
 * # Safety
 * `vocab` must be a live handle or null (returns 0).
 */
size_t pomp_vocab_num_classes(const struct PompVocabulary *vocab);

/**
 * # Safety
 * `vocab` must be a live handle or null (returns 0).
 */
size_t pomp_vocab_embed_dim(const struct PompVocabulary *vocab);

/**
 * Seeded frozen encoder mapping `embed_dim`-wide tokens to `output_dim`.
 *
 * # Safety
 * `out` must be writable.
 */
enum PompStatus pomp_encoder_new(enum PompEncoderKind kind,
                                 uint64_t seed,
                                 size_t embed_dim,
                                 size_t output_dim,
                                 struct PompEncoder **out);

/**
 * # Safety
 * `encoder` must be null or a handle from [`pomp_encoder_new`], freed once.
 */
void pomp_encoder_free(struct PompEncoder *encoder);

/**
 * Loads a feature file and its label file.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be writable.
 */
enum PompStatus pomp_dataset_load(const char *feature_path,
                                  const char *label_path,
                                  struct PompDataset **out);

/**
 * # Safety
 * `dataset` must be null or a handle from [`pomp_dataset_load`], freed once.
 */
void pomp_dataset_free(struct PompDataset *dataset);

/**
 * # Safety
 * `dataset` must be a live handle or null (returns 0).
 */
size_t pomp_dataset_len(const struct PompDataset *dataset);

/**
 * # Safety
 * `dataset` must be a live handle or null (returns 0).
 */
size_t pomp_dataset_dim(const struct PompDataset *dataset);

/**
 * Freshly initialized `len × embed_dim` prompt.
 *
 * # Safety
 * `out` must be writable.
 */
enum PompStatus pomp_prompt_init(size_t len,
                                 size_t embed_dim,
                                 uint64_t seed,
                                 struct PompPrompt **out);

/**
 * Loads a checkpoint's prompt; `step` and `seed` may be null.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable; `step`
 * and `seed` must be null or writable.
 */
enum PompStatus pomp_checkpoint_load(const char *path,
                                     struct PompPrompt **out,
                                     uint64_t *step,
                                     uint64_t *seed);

/**
 * Writes `prompt` as a checkpoint file.
 *
 * # Safety
 * `prompt` must be a live handle; `path` a NUL-terminated string.
 */
enum PompStatus pomp_checkpoint_save(const struct PompPrompt *prompt,
                                     uint64_t step,
                                     uint64_t seed,
                                     const char *path);

/**
 * # Safety
 * `prompt` must be null or a handle from this library, freed once.
 */
void pomp_prompt_free(struct PompPrompt *prompt);

/**
 * # Safety
 * `prompt` must be a live handle or null (returns 0).
 */
size_t pomp_prompt_len(const struct PompPrompt *prompt);

/**
 * # Safety
 * `prompt` must be a live handle or null (returns 0).
 */
size_t pomp_prompt_embed_dim(const struct PompPrompt *prompt);

/**
 * Copies the prompt row-major into `buf`, which must hold `len × embed_dim`
 * doubles.
 *
 * # Safety
 * `buf` must point to `buf_len` writable doubles.
 */
enum PompStatus pomp_prompt_copy(const struct PompPrompt *prompt, double *buf, size_t buf_len);

/**
 * Writes the `N × output_dim` class-feature matrix, row-major, into `buf`.
 *
 * # Safety
 * Handles must be live; `buf` must point to `buf_len` writable doubles.
 */
enum PompStatus pomp_encode_class_features(const struct PompEncoder *encoder,
                                           const struct PompPrompt *prompt,
                                           const struct PompVocabulary *vocab,
                                           double *buf,
                                           size_t buf_len);

/**
 * Zero-shot top-1 / top-5 of `dataset` over the classes that occur in it.
 *
 * # Safety
 * Handles must be live; `top1` and `top5` must be writable.
 */
enum PompStatus pomp_zero_shot_eval(const struct PompEncoder *encoder,
                                    const struct PompPrompt *prompt,
                                    const struct PompVocabulary *vocab,
                                    const struct PompDataset *dataset,
                                    double *top1,
                                    double *top5);

/**
 * Mean `‖x - w_y‖²` with `class_features` given row-major as
 * `num_classes × dim`; dataset labels index its rows.
 *
 * # Safety
 * `dataset` must be live; `class_features` must hold `num_classes × dim`
 * doubles; `out` must be writable.
 */
enum PompStatus pomp_alignment_loss(const struct PompDataset *dataset,
                                    const double *class_features,
                                    size_t num_classes,
                                    size_t dim,
                                    double *out);

/**
 * Log-mean Gaussian-kernel energy over ordered pairs of class features.
 *
 * # Safety
 * `class_features` must hold `num_classes × dim` doubles; `out` writable.
 */
enum PompStatus pomp_uniformity_loss(const double *class_features,
                                     size_t num_classes,
                                     size_t dim,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POMP_H */
