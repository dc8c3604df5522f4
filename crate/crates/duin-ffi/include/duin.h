#ifndef DUIN_H
#define DUIN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Mirrors the CLI exit codes.
 */
typedef enum DuinStatus {
  DuinOk = 0,
  /**
   * Null pointer, empty buffer, or a string that is not UTF-8.
   */
  DuinInvalidArgument = 1,
  /**
   * Unreadable or malformed files, unknown rows, degenerate inputs.
   */
  DuinDataError = 2,
  /**
   * Non-finite arithmetic or an internal panic.
   */
  DuinNumericError = 3,
} DuinStatus;

/**
 * Opaque scorer produced by `duin_open`; release with `duin_close`.
 */
typedef struct DuinModel {
  uint8_t _private[0];
} DuinModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread. Never null.
 */
const char *duin_last_error(void);

/**
 * Crate version as a static string.
 */
const char *duin_version(void);

/**
 * Loads a checkpoint directory (weights, vocabularies, graph) and writes
 * the handle to `out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum DuinStatus duin_open(const char *path, struct DuinModel **out);

/**
 * Releases a handle. Null is a no-op.
 *
 * # Safety
 * `handle` must have come from `duin_open` and not been closed before.
 */
void duin_close(struct DuinModel *handle);

/**
 * Scores one sample row in the prepared-samples TSV layout (11 tab
 * separated fields, no header) and writes the click probability.
 *
 * # Safety
 * `handle` must be open; `row` NUL-terminated; `out_prob` valid.
 */
enum DuinStatus duin_score_row(const struct DuinModel *handle, const char *row, double *out_prob);

/**
 * Scores a whole samples TSV (with header) and writes the ranking AUC of
 * the stored labels.
 *
 * # Safety
 * `handle` must be open; `path` NUL-terminated; `out_auc` valid.
 */
enum DuinStatus duin_score_file(const struct DuinModel *handle, const char *path, double *out_auc);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUIN_H */
