#ifndef NOMMER_H
#define NOMMER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
enum NommerStatus
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  NOMMER_STATUS_OK = 0,
  NOMMER_STATUS_NULL_POINTER = 1,
  NOMMER_STATUS_INVALID_UTF8 = 2,
  NOMMER_STATUS_CONFIG = 3,
  NOMMER_STATUS_SHAPE = 4,
  NOMMER_STATUS_NUMERICAL = 5,
  NOMMER_STATUS_IO = 6,
  NOMMER_STATUS_CHECKPOINT = 7,
  NOMMER_STATUS_BUFFER_TOO_SMALL = 8,
  NOMMER_STATUS_PANIC = 9,
  NOMMER_STATUS_OTHER = 10,
};
#ifndef __cplusplus
typedef int32_t NommerStatus;
#endif // __cplusplus

/**
 * Opaque model handle.
 */
typedef struct NommerModel NommerModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds a freshly initialised preset model (`nommer-t`, `nommer-s`,
 * `nommer-b` or `micro`).
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
NommerStatus nommer_model_new_preset(const char *name, uint64_t seed, struct NommerModel **out);

/**
 * Builds a freshly initialised model from a TOML run configuration file.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string and `out` a valid pointer.
 */
NommerStatus nommer_model_from_config(const char *config_path,
                                      uint64_t seed,
                                      struct NommerModel **out);

/**
 * Loads a checkpoint written for the model described by `config_path`.
 *
 * # Safety
 * Both paths must be NUL-terminated strings and `out` a valid pointer.
 */
NommerStatus nommer_model_load(const char *config_path,
                               const char *checkpoint_path,
                               struct NommerModel **out);

/**
 * # Safety
 * `model` must come from one of the constructors; `path` must be a
 * NUL-terminated string.
 */
NommerStatus nommer_model_save(const struct NommerModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from one of the constructors and not be used again.
 */
void nommer_model_free(struct NommerModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
NommerStatus nommer_model_param_count(const struct NommerModel *model, uint64_t *out);

/**
 * Writes `[height, width, channels]` of the expected input into `out`.
 *
 * # Safety
 * `model` must be a live handle and `out` must point to 3 writable `size_t`.
 */
NommerStatus nommer_model_input_shape(const struct NommerModel *model, size_t *out);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
NommerStatus nommer_model_num_classes(const struct NommerModel *model, size_t *out);

/**
 * Eval-mode forward of one row-major `[H, W, C]` image.
 *
 * `image_len` must equal `H * W * C` and `logits_len` the class count.
 *
 * # Safety
 * `image` must point to `image_len` readable doubles and `logits` to
 * `logits_len` writable doubles.
 */
NommerStatus nommer_model_forward(const struct NommerModel *model,
                                  const double *image,
                                  size_t image_len,
                                  double *logits,
                                  size_t logits_len);

/**
 * Copies the calling thread's last error message, NUL-terminated, into
 * `buf` and returns its length without the terminator. A return value
 * `>= len` means the message was truncated; pass a null `buf` to query the
 * length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t nommer_last_error_message(char *buf, size_t len);

/**
 * Static NUL-terminated crate version.
 */
const char *nommer_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NOMMER_H */
