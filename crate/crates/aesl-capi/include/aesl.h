#ifndef AESL_H
#define AESL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Anything other than `Ok` leaves a
 * description in `aesl_last_error_message`.
 */
typedef enum AeslStatus {
  AeslStatus_Ok = 0,
  AeslStatus_NullPointer = 1,
  AeslStatus_InvalidUtf8 = 2,
  AeslStatus_InvalidArgument = 3,
  AeslStatus_InvalidConfig = 4,
  AeslStatus_MissingFile = 5,
  AeslStatus_IoError = 6,
  AeslStatus_NumericError = 7,
  AeslStatus_TrainingDiverged = 8,
  AeslStatus_InternalError = 9,
} AeslStatus;

/**
 * Opaque label-relation graph handle.
 */
typedef struct AeslGraph AeslGraph;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *aesl_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *aesl_version(void);

/**
 * Generates a synthetic dataset from a generator-config JSON string and
 * writes manifest, CSVs, oracle graph, and prototypes into `out_dir`.
 *
 * # Safety
 * `config_json` and `out_dir` must be valid NUL-terminated strings.
 */
enum AeslStatus aesl_generate_dataset(const char *config_json, const char *out_dir);

/**
 * Runs the full (method, seed) grid described by a run-config JSON string;
 * results land in the config's `out_dir`.
 *
 * # Safety
 * `config_json` must be a valid NUL-terminated string.
 */
enum AeslStatus aesl_run_experiment(const char *config_json);

/**
 * Loads a relation-graph JSON export. Returns null on failure (see
 * `aesl_last_error_message`).
 *
 * # Safety
 * `path` must be a valid NUL-terminated string. The returned handle must be
 * released with `aesl_graph_free`.
 */
struct AeslGraph *aesl_graph_load(const char *path);

/**
 * Releases a graph handle. Null is tolerated.
 *
 * # Safety
 * `graph` must be a handle from `aesl_graph_load` or null, and must not be
 * used afterwards.
 */
void aesl_graph_free(struct AeslGraph *graph);

/**
 * Number of labels in the graph; 0 for a null handle.
 *
 * # Safety
 * `graph` must be a live handle from `aesl_graph_load` or null.
 */
size_t aesl_graph_label_count(const struct AeslGraph *graph);

/**
 * Pearson correlation of the off-diagonal entries of `graph` against the
 * matching labels of `oracle` (which may cover a superset of labels).
 *
 * # Safety
 * Both handles must be live handles from `aesl_graph_load`; `out` must point
 * to a writable double.
 */
enum AeslStatus aesl_graph_pcc(const struct AeslGraph *graph,
                               const struct AeslGraph *oracle,
                               double *out);

/**
 * Critical difference of the Nemenyi test. `k` is the number of methods,
 * `n` the number of datasets.
 *
 * # Safety
 * `out` must point to a writable double.
 */
enum AeslStatus aesl_nemenyi_cd(double q_alpha, size_t k, size_t n, double *out);

/**
 * Friedman statistics over a row-major rank matrix with `n_datasets` rows
 * and `k_methods` columns. Writes the chi-squared statistic and the derived
 * F statistic.
 *
 * # Safety
 * `ranks` must point to `n_datasets * k_methods` doubles; `out_chi2` and
 * `out_ff` must point to writable doubles.
 */
enum AeslStatus aesl_friedman(const double *ranks,
                              size_t n_datasets,
                              size_t k_methods,
                              double *out_chi2,
                              double *out_ff);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* AESL_H */
