#ifndef RAE_H
#define RAE_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RaeStatus {
  RAE_STATUS_OK = 0,
  RAE_STATUS_NULL_ARGUMENT = 1,
  RAE_STATUS_INVALID_ARGUMENT = 2,
  RAE_STATUS_IO = 3,
  RAE_STATUS_FORMAT = 4,
  RAE_STATUS_KEY_REQUIRED = 5,
  RAE_STATUS_CHECKSUM = 6,
  RAE_STATUS_CAPACITY = 7,
  RAE_STATUS_ATTACK = 8,
  RAE_STATUS_BUFFER_TOO_SMALL = 9,
  RAE_STATUS_PANIC = 10,
} RaeStatus;

typedef enum RaeMode {
  RAE_MODE_LSB = 0,
  RAE_MODE_HS = 1,
} RaeMode;

/**
 * Trained classifier.
 */
typedef struct RaeModel RaeModel;

/**
 * Per-pixel perturbation stages.
 */
typedef struct RaeStages RaeStages;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *rae_last_error(void);

/**
 * Loads a weights file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RaeStatus rae_model_load(const char *path, struct RaeModel **out);

/**
 * # Safety
 * `model` must come from [`rae_model_load`] and not be freed twice. Null is
 * ignored.
 */
void rae_model_free(struct RaeModel *model);

/**
 * Input height, width, channels and class count. Any out pointer may be null.
 *
 * # Safety
 * `model` must be a live handle; non-null out pointers must be writable.
 */
enum RaeStatus rae_model_shape(const struct RaeModel *model,
                               size_t *height,
                               size_t *width,
                               size_t *channels,
                               size_t *classes);

/**
 * Writes class probabilities for one image into `probs`.
 *
 * # Safety
 * `pixels` must hold `H·W·C` bytes of the model's input shape and `probs`
 * `probs_len` floats.
 */
enum RaeStatus rae_model_predict(const struct RaeModel *model,
                                 const uint8_t *pixels,
                                 float *probs,
                                 size_t probs_len);

/**
 * Builds a stage matrix from `height·width` values in `-2..=2`.
 *
 * # Safety
 * `data` must hold `height·width` bytes; `out` must be writable.
 */
enum RaeStatus rae_stages_new(size_t height,
                              size_t width,
                              uint8_t xi,
                              const int8_t *data,
                              struct RaeStages **out);

/**
 * # Safety
 * `stages` must be a live handle; out pointers may be null.
 */
enum RaeStatus rae_stages_shape(const struct RaeStages *stages,
                                size_t *height,
                                size_t *width,
                                uint8_t *xi);

/**
 * Copies the stage values, row-major, into `out`.
 *
 * # Safety
 * `out` must hold `out_len` bytes.
 */
enum RaeStatus rae_stages_copy(const struct RaeStages *stages, int8_t *out, size_t out_len);

/**
 * # Safety
 * `stages` must be a live handle or null.
 */
void rae_stages_free(struct RaeStages *stages);

/**
 * White-box phase against an equally weighted ensemble, with default
 * settings apart from the adaptive mask switch.
 *
 * # Safety
 * `models` must point to `n_models` live handles, `pixels` to `H·W·C`
 * bytes, and `out` must be writable.
 */
enum RaeStatus rae_attack_white(const struct RaeModel *const *models,
                                size_t n_models,
                                const uint8_t *pixels,
                                size_t height,
                                size_t width,
                                size_t channels,
                                size_t label,
                                uint64_t seed,
                                bool sa_enabled,
                                struct RaeStages **out);

/**
 * Adds the decoded perturbation to an image, writing `H·W·C` bytes to `out`.
 *
 * # Safety
 * `pixels` and `out` must hold `H·W·C` bytes; `stages` must be live.
 */
enum RaeStatus rae_apply(const uint8_t *pixels,
                         size_t height,
                         size_t width,
                         size_t channels,
                         const struct RaeStages *stages,
                         uint8_t *out);

/**
 * Embeds `stages` into the adversarial image. A null or empty key embeds
 * without encryption.
 *
 * # Safety
 * `x_adv` and `out` must hold `H·W·C` bytes; `key` must hold `key_len`
 * bytes when non-null.
 */
enum RaeStatus rae_make(const uint8_t *x_adv,
                        size_t height,
                        size_t width,
                        size_t channels,
                        const struct RaeStages *stages,
                        const uint8_t *key,
                        size_t key_len,
                        enum RaeMode mode,
                        uint8_t *out);

/**
 * Restores the original image into `x_hat` and optionally returns the
 * embedded stages through `stages_out`.
 *
 * # Safety
 * `stego_pixels` and `x_hat` must hold `H·W·C` bytes; `stages_out` may be
 * null.
 */
enum RaeStatus rae_recover(const uint8_t *stego_pixels,
                           size_t height,
                           size_t width,
                           size_t channels,
                           const uint8_t *key,
                           size_t key_len,
                           uint8_t *x_hat,
                           struct RaeStages **stages_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RAE_H */
