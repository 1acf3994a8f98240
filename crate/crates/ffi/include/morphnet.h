#ifndef MORPHNET_H
#define MORPHNET_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Selection result for a row matching no class.
 */
#define MN_CLASS_NONE -1

/**
 * Selection result for a row matching more than one class.
 */
#define MN_CLASS_AMBIGUOUS -2

/**
 * Number of answers in the decision tree.
 */
#define MN_NUM_ANSWERS 37

typedef enum MnStatus {
  MN_STATUS_OK = 0,
  MN_STATUS_NULL_POINTER = 1,
  MN_STATUS_INVALID_ARGUMENT = 2,
  MN_STATUS_SHAPE = 3,
  MN_STATUS_SCHEMA = 4,
  MN_STATUS_CONFIG = 5,
  MN_STATUS_INTEGRITY = 6,
  MN_STATUS_NON_FINITE = 7,
  MN_STATUS_IO = 8,
  MN_STATUS_IMAGE = 9,
  MN_STATUS_CSV = 10,
  MN_STATUS_PANIC = 11,
} MnStatus;

/**
 * Loaded network. Created by [`mn_network_load`], released by
 * [`mn_network_free`].
 */
typedef struct MnNetwork MnNetwork;

typedef struct MnClassMetrics {
  double precision;
  double recall;
  double f1;
  uint64_t support;
  /**
   * Set when a denominator was zero; the affected values are 0.
   */
  bool undefined;
} MnClassMetrics;

typedef struct MnReportSummary {
  double accuracy;
  double macro_precision;
  double macro_recall;
  double macro_f1;
  uint64_t total;
} MnReportSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a
 * successful one. Valid until the next call on the same thread.
 */
const char *mn_last_error(void);

/**
 * Library version as a static string.
 */
const char *mn_version(void);

/**
 * Loads a checkpoint file and rebuilds its network.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out_net` must be writable.
 */
enum MnStatus mn_network_load(const char *path, struct MnNetwork **out_net);

/**
 * Releases a network. Null is ignored.
 *
 * # Safety
 * `net` must come from [`mn_network_load`] and not be freed twice.
 */
void mn_network_free(struct MnNetwork *net);

/**
 * Input side length, outputs per image, and whether the outputs are class
 * probabilities (otherwise vote fractions).
 *
 * # Safety
 * `net` must be a live handle; the out pointers must be writable.
 */
enum MnStatus mn_network_info(const struct MnNetwork *net,
                              size_t *resolution,
                              size_t *outputs,
                              bool *classify);

/**
 * Runs inference on `n` images of `height x width x 3` floats in [0, 1],
 * channel-last, and writes `n * outputs` values to `out_values`.
 *
 * # Safety
 * `images` must hold `n * height * width * 3` floats and `out_values`
 * `out_len`.
 */
enum MnStatus mn_network_predict(const struct MnNetwork *net,
                                 const float *images,
                                 size_t n,
                                 size_t height,
                                 size_t width,
                                 float *out_values,
                                 size_t out_len);

/**
 * Per-class and macro metrics of a `classes x classes` confusion matrix
 * given row-major with rows as true classes.
 *
 * # Safety
 * `counts` must hold `classes * classes` values and `per_class` `classes`
 * entries; `summary` must be writable.
 */
enum MnStatus mn_classification_report(const uint64_t *counts,
                                       size_t classes,
                                       struct MnClassMetrics *per_class,
                                       struct MnReportSummary *summary);

/**
 * Root mean squared error over `n x k` row-major predictions and targets.
 *
 * # Safety
 * `pred` and `target` must hold `n * k` values; `result` must be writable.
 */
enum MnStatus mn_rmse(const double *pred, const double *target, size_t n, size_t k, double *result);

/**
 * Weights each of the 37 answers by the vote mass reaching its task.
 *
 * # Safety
 * `fractions` and `weighted` must each hold 37 values.
 */
enum MnStatus mn_propagate_tree(const double *fractions, double *weighted);

/**
 * Clean-sample class of one row of 37 vote fractions: 0..6, or
 * [`MN_CLASS_NONE`] / [`MN_CLASS_AMBIGUOUS`]. `class6_any` makes the
 * irregular rule accept any single odd-feature answer instead of the sum.
 *
 * # Safety
 * `fractions` must hold 37 values; `class` must be writable.
 */
enum MnStatus mn_select_class(const double *fractions, bool class6_any, int32_t *class_);

/**
 * `alpha * beta^2 * gamma^2 - 2` for scaling coefficients, each >= 1.
 *
 * # Safety
 * `deviation` must be writable.
 */
enum MnStatus mn_check_constraint(double alpha, double beta, double gamma, double *deviation);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MORPHNET_H */
