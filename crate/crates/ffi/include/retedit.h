#ifndef RETEDIT_H
#define RETEDIT_H

/* Generated by cbindgen from retedit-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a fallible call.
 */
typedef enum RetEditStatus {
  /**
   * The call succeeded.
   */
  RET_EDIT_STATUS_OK = 0,
  /**
   * Unspecified failure; see `retedit_last_error`.
   */
  RET_EDIT_STATUS_ERROR = 1,
  /**
   * A pointer, string, or parameter was unusable.
   */
  RET_EDIT_STATUS_BAD_INPUT = 2,
  /**
   * A required artifact is missing; run the named pipeline stage.
   */
  RET_EDIT_STATUS_MISSING_ARTIFACT = 3,
  /**
   * A numeric computation diverged.
   */
  RET_EDIT_STATUS_NUMERIC_ERROR = 4,
} RetEditStatus;

/**
 * Opaque handle to a loaded config, retriever, index, and editor.
 */
typedef struct RetEditSession RetEditSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failing call on the current thread, or
 * NULL if none has failed yet.
 *
 * The pointer stays valid until the next failing call on this thread;
 * do not free it.
 */
const char *retedit_last_error(void);

/**
 * Crate version as a static string; do not free it.
 */
const char *retedit_version(void);

/**
 * Loads trained artifacts described by the config file at `config_path`
 * and stores the new session in `*out`.
 *
 * The referenced `data_dir` must already contain the checkpoints written
 * by the ingest, train-retriever, build-index, and train-editor stages.
 * On failure `*out` is NULL and the status tells which stage is missing
 * or what was invalid.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string and `out` a valid
 * pointer; the returned session must be released with `retedit_close`.
 */
enum RetEditStatus retedit_open(const char *config_path, struct RetEditSession **out);

/**
 * Releases a session. NULL is a no-op.
 *
 * # Safety
 * `session` must have come from `retedit_open` and not been closed yet.
 */
void retedit_close(struct RetEditSession *session);

/**
 * Number of training examples behind the session's index, or 0 for a
 * NULL session.
 *
 * # Safety
 * `session` must be a live session from `retedit_open` or NULL.
 */
uintptr_t retedit_train_size(const struct RetEditSession *session);

/**
 * Number of vocabulary entries the models were trained with, or 0 for a
 * NULL session.
 *
 * # Safety
 * `session` must be a live session from `retedit_open` or NULL.
 */
uintptr_t retedit_vocab_size(const struct RetEditSession *session);

/**
 * Retrieves the nearest training example for the whitespace-tokenized
 * `query` and decodes up to `topk` completion candidates, storing a
 * JSON document in `*out`:
 *
 * ```json
 * {
 *   "retrieved_id": "t003_i01",
 *   "distance": 0.12,
 *   "candidates": [{"tokens": ["def", "..."], "logprob": -1.5}]
 * }
 * ```
 *
 * # Safety
 * `session` must be a live session from `retedit_open`, `query` a
 * NUL-terminated string, and `out` a valid pointer; release `*out` with
 * `retedit_string_free`.
 */
enum RetEditStatus retedit_complete_json(const struct RetEditSession *session,
                                         const char *query,
                                         uintptr_t topk,
                                         char **out);

/**
 * Releases a string produced by this library. NULL is a no-op.
 *
 * # Safety
 * `s` must have come from an out-parameter of this library and not have
 * been freed already.
 */
void retedit_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RETEDIT_H */
