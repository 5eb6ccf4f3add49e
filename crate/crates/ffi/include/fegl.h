#ifndef FEGL_H
#define FEGL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Version of this interface; bumped on any incompatible change.
 */
#define FEGL_ABI_VERSION 1

/**
 * Result code of every call.
 */
typedef enum FeglStatus {
  FEGL_STATUS_OK = 0,
  FEGL_STATUS_NULL_POINTER = 1,
  FEGL_STATUS_INVALID_ARGUMENT = 2,
  FEGL_STATUS_CONFIG = 3,
  FEGL_STATUS_IO = 4,
  FEGL_STATUS_FORMAT = 5,
  FEGL_STATUS_CAPACITY = 6,
  FEGL_STATUS_BUFFER_TOO_SMALL = 7,
  FEGL_STATUS_INTERNAL = 8,
} FeglStatus;

/**
 * Decoding strategy.
 */
typedef enum FeglMode {
  FEGL_MODE_VANILLA = 0,
  FEGL_MODE_CASCADE_TREE = 1,
  FEGL_MODE_CASCADE_CHAIN = 2,
  FEGL_MODE_PARALLEL_HEADS = 3,
} FeglMode;

/**
 * Opaque engine handle.
 */
typedef struct FeglEngine FeglEngine;

/**
 * Per-call generation settings. Start from [`fegl_default_options`].
 */
typedef struct FeglGenerateOptions {
  size_t max_new_tokens;
  /**
   * 0 selects greedy decoding.
   */
  float temperature;
  size_t depth;
  size_t topk;
  enum FeglMode mode;
  uint64_t seed;
  /**
   * Token that ends generation; negative for none.
   */
  int64_t eos;
} FeglGenerateOptions;

/**
 * Counters of one generation.
 */
typedef struct FeglRunStats {
  size_t new_tokens;
  size_t cycles;
  size_t target_calls;
  size_t drafter_calls;
  /**
   * Mean tokens per cycle.
   */
  double tau;
  double wall_time_seconds;
} FeglRunStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

uint32_t fegl_abi_version(void);

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *fegl_last_error(void);

/**
 * Opens an engine from a run-config file. Models come from the configured
 * weight paths; unset paths give seeded random models.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FeglStatus fegl_engine_open(const char *config_path, struct FeglEngine **out);

/**
 * # Safety
 * `engine` must come from [`fegl_engine_open`] and not be used afterwards.
 * Null is ignored.
 */
void fegl_engine_free(struct FeglEngine *engine);

/**
 * Vocabulary size of the engine's target model.
 *
 * # Safety
 * `engine` must be a live handle or null (which returns 0).
 */
size_t fegl_vocab_size(const struct FeglEngine *engine);

/**
 * Fills `out` with the generation settings of the engine's config.
 *
 * # Safety
 * `engine` must be a live handle and `out` a valid pointer.
 */
enum FeglStatus fegl_default_options(const struct FeglEngine *engine,
                                     struct FeglGenerateOptions *out);

/**
 * Generates a continuation of `prompt`. The tokens are written to
 * `out_tokens` and their count to `out_len`. When `out_capacity` is too
 * small nothing is written except `out_len`, and the call returns
 * `BufferTooSmall`. `options` and `stats` may be null.
 *
 * # Safety
 * `engine` must be a live handle; `prompt` must point to `prompt_len`
 * tokens; `out_tokens` to `out_capacity` writable tokens (or be null when
 * `out_capacity` is 0); `out_len` must be valid.
 */
enum FeglStatus fegl_generate(const struct FeglEngine *engine,
                              const uint32_t *prompt,
                              size_t prompt_len,
                              const struct FeglGenerateOptions *options,
                              uint32_t *out_tokens,
                              size_t out_capacity,
                              size_t *out_len,
                              struct FeglRunStats *stats);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEGL_H */
