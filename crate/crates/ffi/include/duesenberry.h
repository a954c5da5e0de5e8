#ifndef DUESENBERRY_H
#define DUESENBERRY_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DsbStatus {
  DSB_STATUS_OK = 0,
  DSB_STATUS_NULL_POINTER = 1,
  DSB_STATUS_INVALID_UTF8 = 2,
  DSB_STATUS_INVALID_CONFIG = 3,
  DSB_STATUS_SIMULATION_FAILED = 4,
  DSB_STATUS_OUT_OF_RANGE = 5,
  DSB_STATUS_BUFFER_TOO_SMALL = 6,
  DSB_STATUS_PANIC = 7,
} DsbStatus;

/**
 * Path series selectors for [`dsb_run_copy_series`].
 */
typedef enum DsbSeries {
  DSB_SERIES_STATE_PRICE = 0,
  DSB_SERIES_PRICE = 1,
  DSB_SERIES_TOTAL_WEALTH = 2,
  DSB_SERIES_ETA = 3,
  DSB_SERIES_LOADING = 4,
  DSB_SERIES_CONSUMPTION = 5,
} DsbSeries;

/**
 * Scenario selectors for [`dsb_config_desk`].
 */
typedef enum DsbScenario {
  DSB_SCENARIO_RENTIER = 0,
  DSB_SCENARIO_EXAMPLE51 = 1,
  DSB_SCENARIO_EXAMPLE53 = 2,
  DSB_SCENARIO_TABULATED = 3,
} DsbScenario;

/**
 * Opaque run configuration.
 */
typedef struct DsbConfig DsbConfig;

/**
 * Opaque simulated market.
 */
typedef struct DsbRun DsbRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *dsb_version(void);

/**
 * Bytes needed for the last error message including the NUL; 0 if none.
 */
size_t dsb_last_error_length(void);

/**
 * Copy the last error message of this thread into `buf` (NUL-terminated).
 * An empty string is written when there is no error.
 *
 * # Safety
 * `buf` must be valid for `len` bytes.
 */
enum DsbStatus dsb_last_error_message(char *buf, size_t len);

/**
 * Parse and validate a TOML config.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` must be writable.
 */
enum DsbStatus dsb_config_from_toml(const char *toml, struct DsbConfig **out);

/**
 * Desk config for a scenario (see [`DsbScenario`]).
 *
 * # Safety
 * `out` must be writable.
 */
enum DsbStatus dsb_config_desk(uint32_t scenario, struct DsbConfig **out);

/**
 * Override the ensemble size and seed.
 *
 * # Safety
 * `config` must come from this library and not be freed.
 */
enum DsbStatus dsb_config_set_ensemble(struct DsbConfig *config, size_t paths, uint64_t seed);

/**
 * Write the 64-character config hash plus NUL into `buf`.
 *
 * # Safety
 * `config` must be live; `buf` must be valid for `len` bytes.
 */
enum DsbStatus dsb_config_hash(const struct DsbConfig *config, char *buf, size_t len);

/**
 * # Safety
 * `config` must come from this library or be null; it is invalid afterwards.
 */
void dsb_config_free(struct DsbConfig *config);

/**
 * Simulate the configured market.
 *
 * # Safety
 * `config` must be live; `out` must be writable.
 */
enum DsbStatus dsb_run_new(const struct DsbConfig *config, struct DsbRun **out);

/**
 * # Safety
 * `run` must come from this library or be null; it is invalid afterwards.
 */
void dsb_run_free(struct DsbRun *run);

/**
 * Number of time steps N; series have N + 1 points.
 *
 * # Safety
 * `run` must be live; `out` must be writable.
 */
enum DsbStatus dsb_run_steps(const struct DsbRun *run, size_t *out);

/**
 * Number of simulated paths M.
 *
 * # Safety
 * `run` must be live; `out` must be writable.
 */
enum DsbStatus dsb_run_paths(const struct DsbRun *run, size_t *out);

/**
 * Copy path `path` of a [`DsbSeries`] into `buf` (N + 1 values). Flagged
 * paths hold NaN.
 *
 * # Safety
 * `run` must be live; `buf` must be valid for `len` doubles.
 */
enum DsbStatus dsb_run_copy_series(const struct DsbRun *run,
                                   uint32_t series,
                                   size_t path,
                                   double *buf,
                                   size_t len);

/**
 * Cross-path mean of a [`DsbSeries`] at every grid point.
 *
 * # Safety
 * `run` must be live; `buf` must be valid for `len` doubles.
 */
enum DsbStatus dsb_run_mean_series(const struct DsbRun *run,
                                   uint32_t series,
                                   double *buf,
                                   size_t len);

/**
 * Largest clearing residual of the optimal policy and whether it is within
 * tolerance.
 *
 * # Safety
 * `run` must be live; outputs must be writable.
 */
enum DsbStatus dsb_run_clearing(const struct DsbRun *run, double *residual, bool *pass);

/**
 * Run every verification suite and write `verification.json` under `dir`.
 * `pass` receives the overall verdict.
 *
 * # Safety
 * `config` must be live; `dir` NUL-terminated; `pass` writable.
 */
enum DsbStatus dsb_verify(const struct DsbConfig *config, const char *dir, bool *pass);

/**
 * Predicted equity premium (σ^Σ)² and implied ϑ = EP/σ^Σ.
 *
 * # Safety
 * Outputs must be writable.
 */
enum DsbStatus dsb_table1_row(double sigma, double ep, double *predicted_ep, double *implied_theta);

/**
 * r = μ^c − μ^{−∂η} − (σ^c)ᵀϑ.
 */
double dsb_short_rate(double mu_c, double mu_loading, double consumption_risk_premium);

/**
 * r = μ^c + γ − |σ^c|².
 */
double dsb_short_rate_constant(double mu_c, double gamma, double sigma_c_norm);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUESENBERRY_H */
