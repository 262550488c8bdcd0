#ifndef TVSPEC_H
#define TVSPEC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum TvspecStatus {
  TVSPEC_STATUS_OK = 0,
  TVSPEC_STATUS_NULL_POINTER = 1,
  TVSPEC_STATUS_INVALID_ARGUMENT = 2,
  TVSPEC_STATUS_CONFIG = 3,
  TVSPEC_STATUS_DATA = 4,
  TVSPEC_STATUS_NUMERICAL = 5,
  TVSPEC_STATUS_IO = 6,
  TVSPEC_STATUS_BUFFER_TOO_SMALL = 7,
  TVSPEC_STATUS_PANIC = 8,
} TvspecStatus;

/**
 * A finished chain and the prior it was run under.
 */
typedef struct TvspecRun TvspecRun;

/**
 * A `T × N` real series.
 */
typedef struct TvspecSeries TvspecSeries;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *tvspec_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tvspec_version(void);

/**
 * Copy a row-major `len × dim` array into a new series.
 *
 * # Safety
 * `values` must point to `len * dim` readable doubles; `out` must be writable.
 */
enum TvspecStatus tvspec_series_new(const double *values,
                                    size_t len,
                                    size_t dim,
                                    struct TvspecSeries **out);

/**
 * Read a numeric CSV (optional header row) into a new series.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum TvspecStatus tvspec_series_load_csv(const char *path, struct TvspecSeries **out);

/**
 * # Safety
 * `series` must come from a `tvspec_series_*` constructor and not be freed yet; null is ignored.
 */
void tvspec_series_free(struct TvspecSeries *series);

/**
 * # Safety
 * `series` must be a live handle or null (which yields 0).
 */
size_t tvspec_series_len(const struct TvspecSeries *series);

/**
 * # Safety
 * `series` must be a live handle or null (which yields 0).
 */
size_t tvspec_series_dim(const struct TvspecSeries *series);

/**
 * Run the sampler. `settings_json` is `{"prior": {…}, "sampler": {…}}`
 * with the same fields and defaults as the command line configuration, or
 * null for all defaults. `M` is capped at `⌊T / n_min⌋`.
 *
 * # Safety
 * `series` must be a live handle, `settings_json` null or NUL-terminated, `out` writable.
 */
enum TvspecStatus tvspec_run_new(const struct TvspecSeries *series,
                                 const char *settings_json,
                                 struct TvspecRun **out);

/**
 * # Safety
 * `run` must come from `tvspec_run_new` and not be freed yet; null is ignored.
 */
void tvspec_run_free(struct TvspecRun *run);

/**
 * Maximum number of segments `M` the run used; the length of its `Pr(m)` vector.
 *
 * # Safety
 * `run` must be a live handle or null (which yields 0).
 */
size_t tvspec_run_max_segments(const struct TvspecRun *run);

/**
 * # Safety
 * `run` must be a live handle or null (which yields 0).
 */
size_t tvspec_run_snapshot_count(const struct TvspecRun *run);

/**
 * Write `Pr(m = k | Y)` for `k = 1..=M` into `out`.
 *
 * # Safety
 * `run` must be a live handle and `out` must hold `cap` writable doubles.
 */
enum TvspecStatus tvspec_run_pm(const struct TvspecRun *run, double *out, size_t cap);

/**
 * Posterior mean of a functional (`"f11"`, `"logf22"`, `"rho21"`, …) on
 * every time point `1..=T` and `n_freqs` equally spaced frequencies in
 * `[0, 0.5]`, written time-major into `out` (`T * n_freqs` values).
 *
 * # Safety
 * `run` must be a live handle, `functional` NUL-terminated, `out` must hold `cap` doubles.
 */
enum TvspecStatus tvspec_run_mean(const struct TvspecRun *run,
                                  const char *functional,
                                  size_t n_freqs,
                                  double *out,
                                  size_t cap);

/**
 * Move statistics of the run as a JSON string, released with `tvspec_string_free`.
 *
 * # Safety
 * `run` must be a live handle and `out` writable.
 */
enum TvspecStatus tvspec_run_diagnostics_json(const struct TvspecRun *run, char **out);

/**
 * # Safety
 * `s` must come from this library and not be freed yet; null is ignored.
 */
void tvspec_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TVSPEC_H */
