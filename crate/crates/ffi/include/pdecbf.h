#ifndef PDECBF_H
#define PDECBF_H

#include <stdbool.h>
#include <stddef.h>

typedef enum {
  PDECBF_STATUS_OK = 0,
  PDECBF_STATUS_NULL_POINTER = 1,
  PDECBF_STATUS_INVALID_ARGUMENT = 2,
  PDECBF_STATUS_CONFIG = 3,
  PDECBF_STATUS_DOMAIN = 4,
  PDECBF_STATUS_NUMERICAL = 5,
  PDECBF_STATUS_IO = 6,
  PDECBF_STATUS_PANIC = 7,
} PdecbfStatus;

/**
 * Columns of the trajectory log.
 */
typedef enum {
  PDECBF_COLUMN_TIME = 0,
  /**
   * First ODE state.
   */
  PDECBF_COLUMN_Y1 = 1,
  PDECBF_COLUMN_U0 = 2,
  PDECBF_COLUMN_U1 = 3,
  PDECBF_COLUMN_INPUT = 4,
  PDECBF_COLUMN_BARRIER = 5,
  PDECBF_COLUMN_LAMBDA_HAT = 6,
  PDECBF_COLUMN_B_HAT = 7,
} PdecbfColumn;

/**
 * Completed run: trajectory plus report.
 */
typedef struct PdecbfRun PdecbfRun;

/**
 * Parsed scenario.
 */
typedef struct PdecbfScenario PdecbfScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Owned by the
 * library; valid until the next call.
 */
const char *pdecbf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pdecbf_version(void);

/**
 * Loads a TOML or JSON scenario file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
PdecbfStatus pdecbf_scenario_load(const char *path, PdecbfScenario **out);

/**
 * Parses a scenario from TOML text.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
PdecbfStatus pdecbf_scenario_parse(const char *text, PdecbfScenario **out);

/**
 * Checks the scenario without stepping.
 *
 * # Safety
 * `sc` must come from `pdecbf_scenario_load` or `pdecbf_scenario_parse`.
 */
PdecbfStatus pdecbf_scenario_validate(const PdecbfScenario *sc);

/**
 * # Safety
 * `sc` must be NULL or a handle not yet freed.
 */
void pdecbf_scenario_free(PdecbfScenario *sc);

/**
 * Runs a scenario. `stride` 0 keeps the scenario's own snapshot stride.
 *
 * # Safety
 * `sc` must be a live scenario handle and `out` a valid pointer.
 */
PdecbfStatus pdecbf_run(const PdecbfScenario *sc, size_t stride, bool strict, PdecbfRun **out);

/**
 * # Safety
 * `run` must be NULL or a handle not yet freed.
 */
void pdecbf_run_free(PdecbfRun *run);

/**
 * Whether every enabled check passed (warnings count under `strict`).
 *
 * # Safety
 * `run` must be a live run handle and `passed` a valid pointer.
 */
PdecbfStatus pdecbf_run_passed(const PdecbfRun *run, bool *passed);

/**
 * Number of logged rows.
 *
 * # Safety
 * `run` must be a live run handle and `len` a valid pointer.
 */
PdecbfStatus pdecbf_run_len(const PdecbfRun *run, size_t *len);

/**
 * Copies one logged column into `buf`, which must hold `cap` values;
 * `cap` smaller than the log length is an error.
 *
 * # Safety
 * `run` must be a live run handle and `buf` valid for `cap` writes.
 */
PdecbfStatus pdecbf_run_column(const PdecbfRun *run, PdecbfColumn column, double *buf, size_t cap);

/**
 * JSON report as a newly allocated string; release with `pdecbf_string_free`.
 *
 * # Safety
 * `run` must be a live run handle and `out` a valid pointer.
 */
PdecbfStatus pdecbf_run_report_json(const PdecbfRun *run, char **out);

/**
 * Writes trajectory.csv, field.csv and report.json into `dir`.
 *
 * # Safety
 * `run` must be a live run handle and `dir` a NUL-terminated string.
 */
PdecbfStatus pdecbf_run_write(const PdecbfRun *run, const char *dir);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library.
 */
void pdecbf_string_free(char *s);

/**
 * Gap pi/4 - sum_j (-1)^j e^{-(2j+1)^2 x}/(2j+1) with `terms` terms, and a
 * bound on the truncation error.
 *
 * # Safety
 * `value` and `tail` must be valid pointers.
 */
PdecbfStatus pdecbf_theta_gap(double x, size_t terms, double *value, double *tail);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PDECBF_H */
