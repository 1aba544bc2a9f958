#ifndef RPY_H
#define RPY_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RpyStatus {
  RPY_STATUS_OK = 0,
  RPY_STATUS_NULL_POINTER = 1,
  RPY_STATUS_PARSE = 2,
  RPY_STATUS_VALIDATION = 3,
  RPY_STATUS_DIMENSION = 4,
  RPY_STATUS_ASSUMPTION = 5,
  /**
   * The LP did not reach an optimum (or a result needs one).
   */
  RPY_STATUS_NOT_OPTIMAL = 6,
  RPY_STATUS_NUMERICAL = 7,
  RPY_STATUS_INVALID_ARGUMENT = 8,
  RPY_STATUS_PANIC = 9,
} RpyStatus;

/**
 * Fair-LP solution handle.
 */
typedef struct RpyFairSolution RpyFairSolution;

/**
 * Group pair handle.
 */
typedef struct RpyGroupPair RpyGroupPair;

/**
 * Policy handle.
 */
typedef struct RpyPolicy RpyPolicy;

/**
 * Exact disparity and both decomposition bounds (sup-norm witness).
 */
typedef struct RpyBounds {
  double delta_ret;
  double return0;
  double return1;
  double thm1_reward_gap;
  double thm1_policy;
  double thm1_visitation;
  double thm1_total;
  double thm2_reward_gap;
  double thm2_occupancy;
  double thm2_total;
} RpyBounds;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next `rpy_*` call on the same thread.
 */
const char *rpy_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rpy_version(void);

/**
 * Parses a group-pair JSON document.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` a writable pointer.
 */
enum RpyStatus rpy_pair_from_json(const char *json, struct RpyGroupPair **out);

/**
 * The two-state absorbing pair whose disparity is `c` for every policy pair.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum RpyStatus rpy_pair_prop1(double c, double gamma, struct RpyGroupPair **out);

/**
 * # Safety
 * `pair` must be null or a live handle; the out pointers must be writable.
 */
enum RpyStatus rpy_pair_dims(const struct RpyGroupPair *pair,
                             size_t *num_states,
                             size_t *num_actions);

/**
 * # Safety
 * `pair` must be null or a handle from this library, freed at most once.
 */
void rpy_pair_free(struct RpyGroupPair *pair);

/**
 * Builds a policy from `m * n` row-major probabilities.
 *
 * # Safety
 * `probs` must point to `num_states * num_actions` doubles.
 */
enum RpyStatus rpy_policy_new(const double *probs,
                              size_t num_states,
                              size_t num_actions,
                              struct RpyPolicy **out);

/**
 * # Safety
 * `policy` must be null or a handle from this library, freed at most once.
 */
void rpy_policy_free(struct RpyPolicy *policy);

/**
 * `|eta_0^{pi0} - eta_1^{pi1}|`.
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
enum RpyStatus rpy_return_disparity(const struct RpyGroupPair *pair,
                                    const struct RpyPolicy *pi0,
                                    const struct RpyPolicy *pi1,
                                    double *out);

/**
 * Exact disparity and both bounds with the sup-norm witness.
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
enum RpyStatus rpy_analyze(const struct RpyGroupPair *pair,
                           const struct RpyPolicy *pi0,
                           const struct RpyPolicy *pi1,
                           struct RpyBounds *out);

/**
 * Checks the sufficient condition for exact return parity when only the
 * transitions differ. Fails with `RPY_STATUS_ASSUMPTION` when the pair does
 * not share a state-only reward and initial distribution.
 *
 * # Safety
 * `pair` must be live; out pointers writable (`margin` may be null).
 */
enum RpyStatus rpy_check_prop2(const struct RpyGroupPair *pair, bool *holds, double *margin);

/**
 * Solves the return-parity-constrained LP. A solution handle is returned
 * even when the LP is not optimal; query it with `rpy_fair_is_optimal`.
 *
 * # Safety
 * `pair` must be live; `out` writable.
 */
enum RpyStatus rpy_solve_fair(const struct RpyGroupPair *pair,
                              double epsilon,
                              struct RpyFairSolution **out);

/**
 * # Safety
 * `sol` must be live; `out` writable.
 */
enum RpyStatus rpy_fair_is_optimal(const struct RpyFairSolution *sol, bool *out);

/**
 * # Safety
 * `sol` must be live; `out` writable.
 */
enum RpyStatus rpy_fair_objective(const struct RpyFairSolution *sol, double *out);

/**
 * Exact disparity of the recovered policies.
 *
 * # Safety
 * `sol` must be live; `out` writable.
 */
enum RpyStatus rpy_fair_achieved_disparity(const struct RpyFairSolution *sol, double *out);

/**
 * Parity prices `b0`, `b1` at the optimum.
 *
 * # Safety
 * `sol` must be live; out pointers writable.
 */
enum RpyStatus rpy_fair_prices(const struct RpyFairSolution *sol, double *b0, double *b1);

/**
 * Copies group `group`'s recovered policy (row-major, `len` must equal
 * `m * n`) into `buf`.
 *
 * # Safety
 * `sol` must be live; `buf` must have room for `len` doubles.
 */
enum RpyStatus rpy_fair_policy(const struct RpyFairSolution *sol,
                               size_t group,
                               double *buf,
                               size_t len);

/**
 * # Safety
 * `sol` must be null or a handle from this library, freed at most once.
 */
void rpy_fair_free(struct RpyFairSolution *sol);

/**
 * Unbiased squared MMD between `n0` and `n1` row-major points of dimension
 * `dim`, with an equal-weight mixture of RBF kernels
 * `exp(-|x - y|^2 / (2 b))`. Passing zero bandwidths selects the default
 * multiscale set.
 *
 * # Safety
 * Arrays must hold the stated number of doubles; `out` writable.
 */
enum RpyStatus rpy_mmd2_unbiased(const double *x0,
                                 size_t n0,
                                 const double *x1,
                                 size_t n1,
                                 size_t dim,
                                 const double *bandwidths,
                                 size_t num_bandwidths,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RPY_H */
