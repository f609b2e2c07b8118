#ifndef STAGEFIX_H
#define STAGEFIX_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  STAGEFIX_STATUS_OK = 0,
  STAGEFIX_STATUS_NULL_POINTER = 1,
  STAGEFIX_STATUS_INVALID_UTF8 = 2,
  STAGEFIX_STATUS_INVALID_ARGUMENT = 3,
  STAGEFIX_STATUS_IO = 4,
  STAGEFIX_STATUS_PARSE = 5,
  STAGEFIX_STATUS_EMPTY = 6,
  STAGEFIX_STATUS_PANIC = 7,
} StagefixStatus;

/**
 * A BM25 index over a training split.
 */
typedef struct StagefixIndex StagefixIndex;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next call into the library on this thread.
 */
const char *stagefix_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void stagefix_string_free(char *s);

/**
 * # Safety
 * `candidate` and `reference` must be NUL-terminated strings; `out` must
 * be valid for writes.
 */
StagefixStatus stagefix_exact_match(const char *candidate, const char *reference, bool *out);

/**
 * Sentence BLEU-4 in `[0, 1]`.
 *
 * # Safety
 * As [`stagefix_exact_match`].
 */
StagefixStatus stagefix_bleu4(const char *candidate, const char *reference, double *out);

/**
 * Token-level edit distance.
 *
 * # Safety
 * As [`stagefix_exact_match`].
 */
StagefixStatus stagefix_levenshtein(const char *candidate, const char *reference, size_t *out);

/**
 * Pulls the one-line patch out of a model reply. Returns
 * `STAGEFIX_STATUS_EMPTY` when the reply holds no code.
 *
 * # Safety
 * `reply` must be a NUL-terminated string; `out` must be valid for writes.
 */
StagefixStatus stagefix_extract_patch(const char *reply, char **out);

/**
 * Reads a reviewer reply. `feedback` may be null; otherwise it receives
 * the trimmed reply text.
 *
 * # Safety
 * `reply` must be a NUL-terminated string; `passed` must be valid for
 * writes; `feedback` must be null or valid for writes.
 */
StagefixStatus stagefix_parse_verdict(const char *reply, bool *passed, char **feedback);

/**
 * Scores a `results.jsonl` file against a reference split and returns the
 * report as JSON.
 *
 * # Safety
 * `results_path` and `reference_path` must be NUL-terminated strings;
 * `out_json` must be valid for writes.
 */
StagefixStatus stagefix_evaluate(const char *results_path,
                                 const char *reference_path,
                                 size_t k,
                                 char **out_json);

/**
 * Builds an index over a JSONL training split. When `cache_path` is
 * non-null the index is loaded from, or saved to, that cache file.
 *
 * # Safety
 * `train_path` must be a NUL-terminated string, `cache_path` null or a
 * NUL-terminated string, and `out` valid for writes. Release the handle
 * with [`stagefix_index_free`].
 */
StagefixStatus stagefix_index_open(const char *train_path,
                                   const char *cache_path,
                                   StagefixIndex **out);

/**
 * # Safety
 * `index` must be a live handle from [`stagefix_index_open`]; `out` must
 * be valid for writes.
 */
StagefixStatus stagefix_index_doc_count(const StagefixIndex *index, size_t *out);

/**
 * Retrieves the `k` best demonstrations for a bug instance given as JSON.
 * The result is a JSON array ordered by descending score.
 *
 * # Safety
 * `index` must be a live handle; `query_json` a NUL-terminated string;
 * `out_json` valid for writes.
 */
StagefixStatus stagefix_index_top_k(const StagefixIndex *index,
                                    const char *query_json,
                                    size_t k,
                                    char **out_json);

/**
 * Releases an index handle. Null is ignored.
 *
 * # Safety
 * `index` must come from [`stagefix_index_open`] and not be used again.
 */
void stagefix_index_free(StagefixIndex *index);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STAGEFIX_H */
