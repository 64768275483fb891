#ifndef LQMKV_H
#define LQMKV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

#define LQMKV_OK 0

#define LQMKV_ERR_PARSE 1

#define LQMKV_ERR_INVALID 2

#define LQMKV_ERR_SOLVER 3

#define LQMKV_ERR_VERDICT 4

#define LQMKV_ERR_NULL 5

#define LQMKV_ERR_PANIC 6

/**
 * Parsed problem.
 */
typedef struct LqmkvProblem LqmkvProblem;

/**
 * Solved problem: backward system, feedback law and value.
 */
typedef struct LqmkvSolution LqmkvSolution;

typedef struct LqmkvVerifyResult {
  int32_t pass;
  double value;
  double j_mc;
  double j_se;
} LqmkvVerifyResult;

typedef struct LqmkvResourceParams {
  double x0;
  double sigma;
  double delta;
  double epsilon;
  double eta;
  double c;
  double rho;
  double kappa;
  double pbar;
  double price_vol;
  double p0;
} LqmkvResourceParams;

typedef struct LqmkvResourceConstants {
  double k_eta;
  double lambda_eps;
  double k;
  double lambda;
  double y_const;
  double y_price;
  double xbar_infty;
  double lambda_eta;
} LqmkvResourceConstants;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; valid until the next
 * call on the same thread. Empty if no call has failed.
 */
const char *lqmkv_last_error(void);

/**
 * Parses a problem document (UTF-8 JSON).
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
int32_t lqmkv_problem_from_json(const char *json, struct LqmkvProblem **out);

/**
 * # Safety
 * `p` must come from [`lqmkv_problem_from_json`] or be null.
 */
void lqmkv_problem_free(struct LqmkvProblem *p);

/**
 * State and control dimensions.
 *
 * # Safety
 * All pointers must be valid.
 */
int32_t lqmkv_problem_dims(const struct LqmkvProblem *p, size_t *d, size_t *m);

/**
 * Solves the problem. `allow_unverified` != 0 proceeds past failed
 * existence checks.
 *
 * # Safety
 * `p` must be a live problem handle and `out` a valid pointer.
 */
int32_t lqmkv_solve(const struct LqmkvProblem *p,
                    size_t grid_steps,
                    int32_t allow_unverified,
                    struct LqmkvSolution **out);

/**
 * # Safety
 * `s` must come from [`lqmkv_solve`] or be null.
 */
void lqmkv_solution_free(struct LqmkvSolution *s);

/**
 * Optimal value V₀.
 *
 * # Safety
 * All pointers must be valid.
 */
int32_t lqmkv_solution_value(const struct LqmkvSolution *s, double *out);

/**
 * K(t) and Λ(t), each d×d row-major into buffers of at least `len`.
 *
 * # Safety
 * `k` and `lambda` must point to `len` writable doubles.
 */
int32_t lqmkv_solution_riccati(const struct LqmkvSolution *s,
                               double t,
                               double *k,
                               double *lambda,
                               size_t len);

/**
 * Feedback gains at t, each m×d row-major: α = gain·(x − x̄) +
 * gain_bar·x̄ + offset.
 *
 * # Safety
 * `gain` and `gain_bar` must point to `len` writable doubles.
 */
int32_t lqmkv_solution_gains(const struct LqmkvSolution *s,
                             double t,
                             double *gain,
                             double *gain_bar,
                             size_t len);

/**
 * Law bundle as JSON; free the string with [`lqmkv_string_free`].
 *
 * # Safety
 * `out` must be a valid pointer.
 */
int32_t lqmkv_solution_bundle_json(const struct LqmkvSolution *s, char **out);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void lqmkv_string_free(char *s);

/**
 * Martingale diagnostic. `worlds` = 0 uses one world; `perturb` != 0
 * runs the perturbation catalogue. Returns [`LQMKV_ERR_VERDICT`] with
 * `out` filled when a verdict fails.
 *
 * # Safety
 * All pointers must be valid handles or writable structs.
 */
int32_t lqmkv_verify(const struct LqmkvProblem *p,
                     const struct LqmkvSolution *s,
                     size_t particles,
                     size_t worlds,
                     double dt,
                     uint64_t seed,
                     int32_t perturb,
                     struct LqmkvVerifyResult *out);

/**
 * Default resource parameters.
 */
struct LqmkvResourceParams lqmkv_resource_default_params(void);

/**
 * Closed-form constants of the resource model.
 *
 * # Safety
 * Both pointers must be valid.
 */
int32_t lqmkv_resource_constants(const struct LqmkvResourceParams *params,
                                 struct LqmkvResourceConstants *out);

/**
 * Library version as a static string.
 */
const char *lqmkv_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LQMKV_H */
