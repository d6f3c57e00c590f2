#ifndef MAXSR_H
#define MAXSR_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum MaxsrStatus {
  MaxsrStatus_Ok = 0,
  MaxsrStatus_NullArgument = 1,
  MaxsrStatus_InvalidUtf8 = 2,
  MaxsrStatus_IoError = 3,
  MaxsrStatus_InvalidCheckpoint = 4,
  MaxsrStatus_InvalidConfig = 5,
  MaxsrStatus_ShapeMismatch = 6,
  MaxsrStatus_RuntimeError = 7,
} MaxsrStatus;

/**
 * Attention footage selection for maxsr_attention_cost.
 */
typedef enum MaxsrAttentionMode {
  MaxsrAttentionMode_AdaptiveExact = 0,
  MaxsrAttentionMode_AdaptiveApprox = 1,
  MaxsrAttentionMode_Fixed = 2,
} MaxsrAttentionMode;

/**
 * Opaque model handle: a trained (or freshly initialized) network plus its
 * configuration.
 */
typedef struct MaxsrModel MaxsrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent non-Ok status on this thread. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *maxsr_last_error_message(void);

/**
 * Load a model from a checkpoint file written by this library or the CLI.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out_model` a valid
 * destination pointer.
 */
enum MaxsrStatus maxsr_model_load(const char *path, struct MaxsrModel **out_model);

/**
 * Build a freshly initialized model from a JSON configuration (the same
 * schema as the CLI's "model" section) and a seed.
 *
 * # Safety
 * `config_json` must be a valid NUL-terminated string and `out_model` a
 * valid destination pointer.
 */
enum MaxsrStatus maxsr_model_build(const char *config_json,
                                   uint64_t seed,
                                   struct MaxsrModel **out_model);

/**
 * Write the model to a checkpoint file (atomic write).
 *
 * # Safety
 * `model` must be a live handle from this library; `path` a valid string.
 */
enum MaxsrStatus maxsr_model_save(const struct MaxsrModel *model, const char *path);

/**
 * Release a handle. Passing NULL is a no-op.
 *
 * # Safety
 * `model` must be NULL or a pointer obtained from this library, not yet
 * freed.
 */
void maxsr_model_free(struct MaxsrModel *model);

/**
 * Upsampling factor of the model (0 for a NULL handle).
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
uint32_t maxsr_model_scale(const struct MaxsrModel *model);

/**
 * Learnable parameter count (0 for a NULL handle).
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
uint64_t maxsr_model_param_count(const struct MaxsrModel *model);

/**
 * Upscale an interleaved RGB8 image of extent width x height. The output
 * buffer must hold (width*scale) * (height*scale) * 3 bytes.
 *
 * # Safety
 * `pixels` must point to width*height*3 readable bytes and `out_pixels` to
 * the documented number of writable bytes; `model` must be a live handle.
 */
enum MaxsrStatus maxsr_upscale_rgb8(const struct MaxsrModel *model,
                                    const uint8_t *pixels,
                                    uint32_t width,
                                    uint32_t height,
                                    bool self_ensemble,
                                    uint8_t *out_pixels);

/**
 * Upscale a PNG file to another PNG file.
 *
 * # Safety
 * `model` must be a live handle; both paths valid NUL-terminated strings.
 */
enum MaxsrStatus maxsr_upscale_png(const struct MaxsrModel *model,
                                   const char *input_path,
                                   const char *output_path,
                                   bool self_ensemble);

/**
 * Query-key pair count of one block-attention plus one grid-attention pass
 * over a height x width feature map. `fixed_footage` is only read in Fixed
 * mode.
 *
 * # Safety
 * `out_cost` must be a valid destination pointer.
 */
enum MaxsrStatus maxsr_attention_cost(uint32_t height,
                                      uint32_t width,
                                      enum MaxsrAttentionMode mode,
                                      uint32_t fixed_footage,
                                      uint64_t *out_cost);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAXSR_H */
