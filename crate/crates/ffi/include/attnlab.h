#ifndef ATTNLAB_H
#define ATTNLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum AttnlabStatus {
  ATTNLAB_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  ATTNLAB_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  ATTNLAB_STATUS_INVALID_UTF8 = 2,
  /**
   * The request was rejected before running (bad value, prompt too long).
   */
  ATTNLAB_STATUS_VALIDATION = 3,
  /**
   * Weights or other required files are missing or unreadable.
   */
  ATTNLAB_STATUS_MISSING_ASSETS = 4,
  /**
   * The operation failed while running.
   */
  ATTNLAB_STATUS_RUNTIME = 5,
  /**
   * The library panicked; the handle involved should be freed.
   */
  ATTNLAB_STATUS_PANIC = 6,
} AttnlabStatus;

/**
 * A loaded backbone.
 */
typedef struct AttnlabAdapter AttnlabAdapter;

/**
 * An RGB8 image, row-major and tightly packed.
 */
typedef struct AttnlabImage AttnlabImage;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *attnlab_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next call into the library on this thread.
 */
const char *attnlab_last_error(void);

/**
 * Loads a backbone (`sd15` or `tiny-test`).
 *
 * `device` and `weights_root` may be null (meaning `auto` and unset).
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum AttnlabStatus attnlab_adapter_load(const char *backbone,
                                        const char *device,
                                        const char *weights_root,
                                        uint64_t fixture_seed,
                                        struct AttnlabAdapter **out);

/**
 * Releases an adapter. Null is ignored.
 *
 * # Safety
 * `adapter` must be null or a handle from [`attnlab_adapter_load`] that has
 * not been freed.
 */
void attnlab_adapter_free(struct AttnlabAdapter *adapter);

/**
 * Number of attention sites (self plus cross) of the adapter's backbone.
 *
 * # Safety
 * `adapter` must be null or a live handle.
 */
size_t attnlab_adapter_site_count(const struct AttnlabAdapter *adapter);

/**
 * The site table as a JSON array.
 *
 * # Safety
 * `adapter` must be a live handle and `out_json` writable.
 */
enum AttnlabStatus attnlab_adapter_sites_json(const struct AttnlabAdapter *adapter,
                                              char **out_json);

/**
 * Edits the image generated from `source_prompt` with `seed` toward
 * `target_prompt`, replacing self-attention maps at the backbone's default
 * sites over the first `ratio` of `steps` (0 means the default step count).
 *
 * `out_source` may be null when the source image is not wanted.
 *
 * # Safety
 * `adapter` must be a live handle, the prompts NUL-terminated, and the
 * out-pointers writable (or null where allowed).
 */
enum AttnlabStatus attnlab_edit(const struct AttnlabAdapter *adapter,
                                uint64_t seed,
                                const char *source_prompt,
                                const char *target_prompt,
                                double ratio,
                                uint32_t steps,
                                struct AttnlabImage **out_source,
                                struct AttnlabImage **out_edited);

/**
 * Runs a job of `kind` (`edit`, `sweep`, `harvest`, `probe`, `benchmark`)
 * from its JSON request, writing artifacts to `out_dir`. The summary JSON is
 * stored in `out_summary` when it is not null.
 *
 * # Safety
 * `adapter` must be a live handle; strings NUL-terminated; `out_summary`
 * null or writable.
 */
enum AttnlabStatus attnlab_run_job(const struct AttnlabAdapter *adapter,
                                   const char *kind,
                                   const char *request_json,
                                   const char *out_dir,
                                   char **out_summary);

/**
 * # Safety
 * `image` must be null or a live image handle.
 */
uint32_t attnlab_image_width(const struct AttnlabImage *image);

/**
 * # Safety
 * `image` must be null or a live image handle.
 */
uint32_t attnlab_image_height(const struct AttnlabImage *image);

/**
 * Pixel bytes (`width * height * 3`), valid until the image is freed.
 *
 * # Safety
 * `image` must be null or a live image handle; `out_len` null or writable.
 */
const uint8_t *attnlab_image_data(const struct AttnlabImage *image, size_t *out_len);

/**
 * Releases an image. Null is ignored.
 *
 * # Safety
 * `image` must be null or a handle returned by this library, not yet freed.
 */
void attnlab_image_free(struct AttnlabImage *image);

/**
 * Releases a string returned through an out-parameter. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void attnlab_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATTNLAB_H */
