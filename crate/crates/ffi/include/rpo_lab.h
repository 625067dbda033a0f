#ifndef RPO_LAB_H
#define RPO_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum RpoStatus {
  RPO_STATUS_OK = 0,
  RPO_STATUS_NULL_POINTER = 1,
  RPO_STATUS_INVALID_ARGUMENT = 2,
  RPO_STATUS_METRIC_KIND = 3,
  RPO_STATUS_NON_FINITE = 4,
  RPO_STATUS_SHAPE_MISMATCH = 5,
  RPO_STATUS_IDENTITY_FAILURE = 6,
  RPO_STATUS_INTERNAL = 7,
} RpoStatus;

/**
 * Distance metric selector.
 */
typedef enum RpoMetric {
  RPO_METRIC_SQ = 0,
  RPO_METRIC_BWD_BERNOULLI = 1,
  RPO_METRIC_SQ_NAIVE = 2,
  RPO_METRIC_SQLOO = 3,
  RPO_METRIC_BWD_CATEGORICAL = 4,
  RPO_METRIC_FWD_CATEGORICAL = 5,
} RpoMetric;

/**
 * Opaque position-factorized policy.
 */
typedef struct RpoPolicy RpoPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *rpo_last_error(void);

/**
 * Parses a metric name such as `"sqloo"` or `"bwd-categorical"`.
 *
 * # Safety
 * `name` must be a nul-terminated string; `out` must be writable.
 */
enum RpoStatus rpo_metric_from_name(const char *name, enum RpoMetric *out);

/**
 * Pair distance `D[a ‖ b]`; `b = +inf` selects the DPO limit.
 *
 * # Safety
 * `out` must be writable.
 */
enum RpoStatus rpo_distance_pair(enum RpoMetric metric, double a, double b, double *out);

/**
 * `∂D/∂a` of the pair distance.
 *
 * # Safety
 * `out` must be writable.
 */
enum RpoStatus rpo_distance_pair_grad(enum RpoMetric metric, double a, double b, double *out);

/**
 * Multi-response distance over `k` entries.
 *
 * # Safety
 * `a` and `b` must point to `k` doubles; `out` must be writable.
 */
enum RpoStatus rpo_distance_multi(enum RpoMetric metric,
                                  const double *a,
                                  const double *b,
                                  size_t k,
                                  double *out);

/**
 * `∂D/∂a_k` of the multi-response distance, written to `out[0..k]`.
 *
 * # Safety
 * `a`, `b` and `out` must point to `k` doubles.
 */
enum RpoStatus rpo_distance_multi_grad(enum RpoMetric metric,
                                       const double *a,
                                       const double *b,
                                       size_t k,
                                       double *out);

/**
 * Max-subtracted softmax of `n` logits.
 *
 * # Safety
 * `x` and `out` must point to `n` doubles.
 */
enum RpoStatus rpo_softmax(const double *x, size_t n, double *out);

/**
 * Online scales `S_k = ∂D/∂a_k` at `a = implicit`, `b = eta · explicit`.
 *
 * # Safety
 * `implicit`, `explicit` and `out` must point to `k` doubles.
 */
enum RpoStatus rpo_score_scales(enum RpoMetric metric,
                                const double *implicit,
                                const double *explicit_,
                                size_t k,
                                double eta,
                                double *out);

/**
 * Creates a policy from `contexts × max_len × vocab` row-major logits.
 *
 * # Safety
 * `logits` must point to `n` doubles; `out` must be writable.
 */
enum RpoStatus rpo_policy_new(size_t contexts,
                              size_t vocab,
                              size_t max_len,
                              const double *logits,
                              size_t n,
                              struct RpoPolicy **out);

/**
 * Reads a policy from its JSON checkpoint form.
 *
 * # Safety
 * `json` must be a nul-terminated string; `out` must be writable.
 */
enum RpoStatus rpo_policy_from_json(const char *json, struct RpoPolicy **out);

/**
 * Serializes a policy to JSON; release the string with [`rpo_string_free`].
 *
 * # Safety
 * `policy` must be a live handle; `out` must be writable.
 */
enum RpoStatus rpo_policy_to_json(const struct RpoPolicy *policy, char **out);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void rpo_string_free(char *s);

/**
 * Releases a policy handle.
 *
 * # Safety
 * `policy` must be null or a handle not yet freed.
 */
void rpo_policy_free(struct RpoPolicy *policy);

/**
 * Number of logits, `contexts × max_len × vocab`.
 *
 * # Safety
 * `policy` must be a live handle; `out` must be writable.
 */
enum RpoStatus rpo_policy_num_logits(const struct RpoPolicy *policy, size_t *out);

/**
 * Copies the logits into `out[0..n]`; `n` must equal the logit count.
 *
 * # Safety
 * `policy` must be a live handle; `out` must point to `n` doubles.
 */
enum RpoStatus rpo_policy_logits(const struct RpoPolicy *policy, double *out, size_t n);

/**
 * `log π(y | context)`.
 *
 * # Safety
 * `policy` must be a live handle; `tokens` must point to `len` values;
 * `out` must be writable.
 */
enum RpoStatus rpo_policy_log_prob(const struct RpoPolicy *policy,
                                   size_t context,
                                   const uint32_t *tokens,
                                   size_t len,
                                   double *out);

/**
 * Gradient of `log π(y | context)` with respect to that context's
 * `max_len × vocab` logit block, written to `out[0..n]`.
 *
 * # Safety
 * `policy` must be a live handle; `tokens` must point to `len` values;
 * `out` must point to `n` doubles.
 */
enum RpoStatus rpo_policy_log_prob_grad(const struct RpoPolicy *policy,
                                        size_t context,
                                        const uint32_t *tokens,
                                        size_t len,
                                        double *out,
                                        size_t n);

/**
 * Exact `KL[π(·|context) ‖ ref(·|context)]`.
 *
 * # Safety
 * Both handles must be live; `out` must be writable.
 */
enum RpoStatus rpo_policy_kl(const struct RpoPolicy *policy,
                             const struct RpoPolicy *reference,
                             size_t context,
                             double *out);

/**
 * Runs the identity suite; returns `IdentityFailure` when any identity
 * fails and writes the number of failures to `failures`.
 *
 * # Safety
 * `failures` must be null or writable.
 */
enum RpoStatus rpo_identity_check(size_t trials, uint64_t seed, size_t *failures);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RPO_LAB_H */
