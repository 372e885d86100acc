#ifndef CLBENCH_H
#define CLBENCH_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum ClbStatus {
  CLB_STATUS_OK = 0,
  CLB_STATUS_NULL_POINTER = 1,
  CLB_STATUS_INVALID_UTF8 = 2,
  CLB_STATUS_CONFIG = 3,
  CLB_STATUS_METRIC = 4,
  CLB_STATUS_BUDGET = 5,
  CLB_STATUS_INFEASIBLE = 6,
  CLB_STATUS_TRAINING = 7,
  CLB_STATUS_IO = 8,
  CLB_STATUS_OUT_OF_RANGE = 9,
  CLB_STATUS_INTERNAL = 10,
  CLB_STATUS_PANIC = 11,
} ClbStatus;

/**
 * Storage categories priced by the memory ledger.
 */
typedef enum ClbStorageKind {
  CLB_STORAGE_KIND_IMAGE = 0,
  CLB_STORAGE_KIND_FEATURE = 1,
  CLB_STORAGE_KIND_MODEL = 2,
  CLB_STORAGE_KIND_PARAMETER = 3,
  CLB_STORAGE_KIND_PROMPT = 4,
} ClbStorageKind;

/**
 * Experiment description: built-in defaults merged with user layers.
 */
typedef struct ClbConfig ClbConfig;

/**
 * Itemized storage ledger.
 */
typedef struct ClbLedger ClbLedger;

/**
 * Result of one run.
 */
typedef struct ClbRunRecord ClbRunRecord;

/**
 * Summary metrics of an accuracy matrix. `bwt` and `forgetting` are NaN and
 * `has_transfer` is false for single-task matrices.
 */
typedef struct ClbMetrics {
  double last_acc;
  double avg_acc;
  double bwt;
  double forgetting;
  bool has_transfer;
} ClbMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *clb_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next call into this library from the same thread.
 */
const char *clb_last_error(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library and not yet freed.
 */
void clb_string_free(char *s);

/**
 * Built-in default configuration.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage.
 */
enum ClbStatus clb_config_default(struct ClbConfig **out);

/**
 * Parses YAML text and merges it over the built-in defaults.
 *
 * # Safety
 * `yaml` must be a NUL-terminated string; `out` must be writable.
 */
enum ClbStatus clb_config_from_yaml(const char *yaml, struct ClbConfig **out);

/**
 * Loads a YAML file over the built-in defaults.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum ClbStatus clb_config_load(const char *path, struct ClbConfig **out);

/**
 * Applies one `dotted.key=value` override. The handle is unchanged on error.
 *
 * # Safety
 * `cfg` must be a live handle; `assignment` a NUL-terminated string.
 */
enum ClbStatus clb_config_set(struct ClbConfig *cfg, const char *assignment);

/**
 * Fully resolved configuration as YAML.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be writable.
 */
enum ClbStatus clb_config_to_yaml(const struct ClbConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must be NULL or a handle from this library and not yet freed.
 */
void clb_config_free(struct ClbConfig *cfg);

/**
 * Runs an experiment to completion. With `write_outputs` false nothing is
 * written to disk.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be writable.
 */
enum ClbStatus clb_run(const struct ClbConfig *cfg, bool write_outputs, struct ClbRunRecord **out);

/**
 * Loads a `record.json` written by a previous run.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum ClbStatus clb_record_load(const char *path, struct ClbRunRecord **out);

/**
 * Number of evaluated rows in the accuracy matrix.
 *
 * # Safety
 * `rec` must be a live handle; `out` must be writable.
 */
enum ClbStatus clb_record_num_tasks(const struct ClbRunRecord *rec, size_t *out);

/**
 * Accuracy on task `j` after training through task `t` (`j <= t`).
 *
 * # Safety
 * `rec` must be a live handle; `out` must be writable.
 */
enum ClbStatus clb_record_accuracy(const struct ClbRunRecord *rec, size_t t, size_t j, double *out);

/**
 * Summary metrics of the recorded matrix.
 *
 * # Safety
 * `rec` must be a live handle; `out` must be writable.
 */
enum ClbStatus clb_record_metrics(const struct ClbRunRecord *rec, struct ClbMetrics *out);

/**
 * The record serialized as JSON.
 *
 * # Safety
 * `rec` must be a live handle; `out` must be writable.
 */
enum ClbStatus clb_record_to_json(const struct ClbRunRecord *rec, char **out);

/**
 * Copy of the run's storage ledger.
 *
 * # Safety
 * `rec` must be a live handle; `out` must be writable.
 */
enum ClbStatus clb_record_ledger(const struct ClbRunRecord *rec, struct ClbLedger **out);

/**
 * # Safety
 * `rec` must be NULL or a handle from this library and not yet freed.
 */
void clb_record_free(struct ClbRunRecord *rec);

/**
 * Metrics of a lower-triangular accuracy matrix given row-major in a
 * `num_tasks * num_tasks` array; entries above the diagonal are ignored.
 *
 * # Safety
 * `values` must point to `num_tasks * num_tasks` readable doubles; `out` must
 * be writable.
 */
enum ClbStatus clb_metrics_compute(const double *values, size_t num_tasks, struct ClbMetrics *out);

/**
 * Empty ledger.
 *
 * # Safety
 * `out` must be writable.
 */
enum ClbStatus clb_ledger_new(struct ClbLedger **out);

/**
 * Ledger of a published method footprint (`icarl`, `gpm`, `l2p`,
 * `moe_adapter4cl`).
 *
 * # Safety
 * `method` must be a NUL-terminated string; `out` must be writable.
 */
enum ClbStatus clb_ledger_published(const char *method, struct ClbLedger **out);

/**
 * Appends `count` values of `kind`. Images cost 1 unit per value, every
 * other kind 4.
 *
 * # Safety
 * `ledger` must be a live handle.
 */
enum ClbStatus clb_ledger_push(struct ClbLedger *ledger, enum ClbStorageKind kind, uint64_t count);

/**
 * Sets the frozen backbone footprint in units.
 *
 * # Safety
 * `ledger` must be a live handle.
 */
enum ClbStatus clb_ledger_set_frozen(struct ClbLedger *ledger, uint64_t units);

/**
 * Total units, optionally counting the frozen backbone.
 *
 * # Safety
 * `ledger` must be a live handle; `out` must be writable.
 */
enum ClbStatus clb_ledger_total_units(const struct ClbLedger *ledger,
                                      bool include_frozen,
                                      uint64_t *out);

/**
 * # Safety
 * `ledger` must be NULL or a handle from this library and not yet freed.
 */
void clb_ledger_free(struct ClbLedger *ledger);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLBENCH_H */
