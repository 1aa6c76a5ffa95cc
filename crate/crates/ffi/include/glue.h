#ifndef GLUE_H
#define GLUE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GlueStatus {
  GLUE_STATUS_OK = 0,
  GLUE_STATUS_CONFIG = 2,
  GLUE_STATUS_DATA = 3,
  GLUE_STATUS_NUMERIC = 4,
  GLUE_STATUS_NULL_POINTER = 5,
  GLUE_STATUS_PANIC = 6,
} GlueStatus;

typedef enum GlueActivation {
  GLUE_ACTIVATION_RELU = 0,
  GLUE_ACTIVATION_TANH = 1,
} GlueActivation;

/**
 * How the mixture coefficients are determined.
 */
typedef enum GlueMethod {
  /**
   * Proportional to each expert's training-set size.
   */
  GLUE_METHOD_DATA_SIZE = 1,
  /**
   * Proportional to accuracy on the given set.
   */
  GLUE_METHOD_PROXY = 2,
  /**
   * Adam on exact gradients.
   */
  GLUE_METHOD_FULL_GRAD = 3,
  /**
   * Adam on two-point SPSA estimates.
   */
  GLUE_METHOD_GLUE = 4,
} GlueMethod;

/**
 * `K` experts sharing one architecture.
 */
typedef struct GlueBank GlueBank;

/**
 * Labelled classification data.
 */
typedef struct GlueDataset GlueDataset;

/**
 * Settings for the learned methods. Ignored by the heuristics.
 */
typedef struct GlueLearnOptions {
  double mu;
  size_t directions;
  bool dimension_scaling;
  uint64_t direction_seed;
  double learning_rate;
  size_t steps;
  size_t batch_size;
  /**
   * Minibatch order.
   */
  uint64_t seed;
} GlueLearnOptions;

typedef struct GlueCounters {
  uint64_t forwards;
  uint64_t backwards;
  uint64_t blends;
  uint64_t inner_products;
} GlueCounters;

typedef struct GlueCostBreakdown {
  double t_full;
  double t_spsa;
  double gap;
} GlueCostBreakdown;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or an empty string.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *glue_last_error_message(void);

/**
 * Defaults matching the command-line tool.
 */
struct GlueLearnOptions glue_learn_options_default(void);

/**
 * Build a bank from `k` flat parameter vectors stored back to back in
 * `params` (`k * param_count` values). `train_sizes` may be null.
 *
 * # Safety
 * Pointers must reference arrays of the stated lengths.
 */
enum GlueStatus glue_bank_new(const size_t *layer_sizes,
                              size_t n_layers,
                              enum GlueActivation activation,
                              const double *params,
                              size_t k,
                              const uint64_t *train_sizes,
                              struct GlueBank **out);

/**
 * Build a bank from `k` checkpoint files. Training-set sizes come from the
 * checkpoint metadata.
 *
 * # Safety
 * `paths` must hold `k` NUL-terminated UTF-8 strings.
 */
enum GlueStatus glue_bank_from_checkpoints(const char *const *paths,
                                           size_t k,
                                           struct GlueBank **out);

/**
 * # Safety
 * `bank` must come from a `glue_bank_*` constructor and not be used afterwards.
 */
void glue_bank_free(struct GlueBank *bank);

/**
 * Number of experts, or 0 for a null handle.
 *
 * # Safety
 * `bank` must be null or a live handle.
 */
size_t glue_bank_k(const struct GlueBank *bank);

/**
 * Parameters per expert, or 0 for a null handle.
 *
 * # Safety
 * `bank` must be null or a live handle.
 */
size_t glue_bank_param_count(const struct GlueBank *bank);

/**
 * `theta = sum_i alpha_i theta_i`. `alpha` has `k` entries on the simplex;
 * `theta_out` has room for `param_count` values.
 *
 * # Safety
 * Pointers must reference arrays of the stated lengths.
 */
enum GlueStatus glue_bank_blend(const struct GlueBank *bank,
                                const double *alpha,
                                size_t k,
                                double *theta_out,
                                size_t p);

/**
 * Largest singular value of the `P x K` expert matrix.
 *
 * # Safety
 * `bank` must be a live handle and `out` writable.
 */
enum GlueStatus glue_bank_sigma_max(const struct GlueBank *bank, double *out);

/**
 * Numerically stable softmax of `beta` into `alpha_out`, both of length `k`.
 *
 * # Safety
 * Pointers must reference arrays of length `k`.
 */
enum GlueStatus glue_softmax(const double *beta, size_t k, double *alpha_out);

/**
 * Row-major `n x d` inputs with one class label per row.
 *
 * # Safety
 * `inputs` must hold `n * d` values and `labels` `n` values.
 */
enum GlueStatus glue_dataset_new(const double *inputs,
                                 size_t n,
                                 size_t d,
                                 const size_t *labels,
                                 struct GlueDataset **out);

/**
 * # Safety
 * `data` must come from [`glue_dataset_new`] and not be used afterwards.
 */
void glue_dataset_free(struct GlueDataset *data);

/**
 * Determine mixture coefficients for `bank` on `data` and write them to
 * `alpha_out` (`k` entries). For [`GlueMethod::Proxy`] `data` is the proxy
 * set. `options` may be null for defaults; `counters_out` may be null.
 *
 * # Safety
 * Handles must be live and pointers valid for the stated lengths.
 */
enum GlueStatus glue_learn_alpha(const struct GlueBank *bank,
                                 enum GlueMethod method,
                                 const struct GlueDataset *data,
                                 const struct GlueLearnOptions *options,
                                 double *alpha_out,
                                 size_t k,
                                 struct GlueCounters *counters_out);

/**
 * Accuracy and mean loss of the blended model on `data`.
 *
 * # Safety
 * Handles must be live and pointers valid for the stated lengths.
 */
enum GlueStatus glue_evaluate_blend(const struct GlueBank *bank,
                                    const double *alpha,
                                    size_t k,
                                    const struct GlueDataset *data,
                                    double *accuracy_out,
                                    double *loss_out);

/**
 * Per-step cost of a full-gradient step and of one SPSA pair.
 *
 * # Safety
 * `out` must be writable.
 */
enum GlueStatus glue_cost_model(double forward,
                                double gamma,
                                double c_mix,
                                double d_alpha,
                                struct GlueCostBreakdown *out);

/**
 * `((K-1)/(mK)) sigma_max^2 |grad_theta L|^2`.
 *
 * # Safety
 * `out` must be writable.
 */
enum GlueStatus glue_variance_bound(size_t k,
                                    size_t m,
                                    double sigma_max,
                                    double grad_theta_norm,
                                    double mu,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GLUE_H */
