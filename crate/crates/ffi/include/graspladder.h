#ifndef GRASPLADDER_H
#define GRASPLADDER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define GL_STATE_DIM 15

#define GL_ACTION_DIM 7

typedef enum GlStatus {
  GL_STATUS_OK = 0,
  GL_STATUS_NULL_POINTER = 1,
  GL_STATUS_INVALID_ARGUMENT = 2,
  GL_STATUS_INVALID_CONFIG = 3,
  GL_STATUS_EPISODE_OVER = 4,
  GL_STATUS_PLACEMENT_FAILURE = 5,
  GL_STATUS_BUFFER_TOO_SMALL = 6,
  GL_STATUS_PROTOCOL = 7,
  GL_STATUS_IO = 8,
  GL_STATUS_PANIC = 99,
} GlStatus;

/**
 * Opaque environment handle.
 */
typedef struct GlEnv GlEnv;

typedef struct GlOutcome {
  bool success;
  bool grasp_any;
  bool reach;
} GlOutcome;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *gl_version(void);

/**
 * Copies the calling thread's last error message into `buf`.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes or be null; `out_len` may be null.
 */
enum GlStatus gl_last_error_message(char *buf, size_t cap, size_t *out_len);

/**
 * Creates an environment. `config_json` is an environment config as JSON or
 * null for the defaults; `regime` is `small_jitter`, `medium_jitter`,
 * `large_jitter` or `full_random`.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum GlStatus gl_env_new(const char *config_json,
                         const char *regime,
                         uint32_t object_count,
                         struct GlEnv **out);

/**
 * # Safety
 * `env` must be null or a handle from [`gl_env_new`] not yet freed.
 */
void gl_env_free(struct GlEnv *env);

/**
 * Starts the episode for `seed` and writes its initial state.
 *
 * # Safety
 * `env` must be a live handle; `state_out` null or 15 writable floats.
 */
enum GlStatus gl_env_reset(struct GlEnv *env, uint64_t seed, float *state_out);

/**
 * Advances one control step with a 7-float action.
 *
 * # Safety
 * `env` live; `action` 7 readable floats; `state_out` null or 15 writable
 * floats; `done_out` null or writable.
 */
enum GlStatus gl_env_step(struct GlEnv *env, const float *action, float *state_out, bool *done_out);

/**
 * Scores the current episode.
 *
 * # Safety
 * `env` live; `out` writable.
 */
enum GlStatus gl_env_outcome(struct GlEnv *env, struct GlOutcome *out);

/**
 * Copies the current episode's instruction text.
 *
 * # Safety
 * `env` live; `buf` null or `cap` writable bytes; `out_len` null or writable.
 */
enum GlStatus gl_env_instruction(struct GlEnv *env, char *buf, size_t cap, size_t *out_len);

/**
 * Copies the environment config hash (hex).
 *
 * # Safety
 * As [`gl_env_instruction`].
 */
enum GlStatus gl_env_config_hash(const struct GlEnv *env, char *buf, size_t cap, size_t *out_len);

/**
 * Generalized advantage estimation over `n` steps.
 *
 * # Safety
 * `rewards`, `values`, `dones` must hold `n` readable elements and
 * `advantages_out`, `returns_out` `n` writable ones.
 */
enum GlStatus gl_compute_gae(const double *rewards,
                             const double *values,
                             const bool *dones,
                             size_t n,
                             double bootstrap,
                             double gamma,
                             double lambda,
                             double *advantages_out,
                             double *returns_out);

/**
 * Validates a JSON protocol message and writes its length-prefixed frame.
 * On `BufferTooSmall`, `out_len` holds the required size.
 *
 * # Safety
 * `json` NUL-terminated; `buf` null or `cap` writable bytes; `out_len` writable.
 */
enum GlStatus gl_protocol_encode(const char *json, uint8_t *buf, size_t cap, size_t *out_len);

/**
 * Decodes one frame from the front of `data`. `consumed_out` receives the
 * frame length, or 0 if `data` holds only part of a frame; the JSON payload
 * is copied to `json_out` as a NUL-terminated string.
 *
 * # Safety
 * `data` `len` readable bytes; `json_out` null or `cap` writable bytes;
 * `consumed_out` writable; `json_len` null or writable.
 */
enum GlStatus gl_protocol_decode(const uint8_t *data,
                                 size_t len,
                                 char *json_out,
                                 size_t cap,
                                 size_t *json_len,
                                 size_t *consumed_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRASPLADDER_H */
