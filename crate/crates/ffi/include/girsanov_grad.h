#ifndef GIRSANOV_GRAD_H
#define GIRSANOV_GRAD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Status codes returned by every fallible function.
 */
typedef enum GgStatus {
  GG_STATUS_OK = 0,
  GG_STATUS_NULL_POINTER = 1,
  GG_STATUS_INVALID_INPUT = 2,
  GG_STATUS_SIMULATION_DIVERGED = 3,
  GG_STATUS_DEGENERATE_ESTIMATE = 4,
  GG_STATUS_ESTIMATOR_UNUSABLE = 5,
  GG_STATUS_DEGENERATE_CONTROL = 6,
  GG_STATUS_INDEFINITE_HESSIAN = 7,
  GG_STATUS_CONFIG = 8,
  GG_STATUS_IO = 9,
  GG_STATUS_BUFFER_TOO_SMALL = 10,
  GG_STATUS_PANIC = 11,
} GgStatus;

typedef enum GgForm {
  GG_FORM_PLAIN = 0,
  GG_FORM_COMPENSATED = 1,
} GgForm;

typedef enum GgMethod {
  GG_METHOD_GD = 0,
  GG_METHOD_NEWTON = 1,
} GgMethod;

typedef enum GgTermination {
  GG_TERMINATION_GRADIENT_TOLERANCE = 0,
  GG_TERMINATION_MAX_ITERATIONS = 1,
  GG_TERMINATION_LINE_SEARCH_FAILURE = 2,
  GG_TERMINATION_HESSIAN_INDEFINITE_FALLBACK = 3,
} GgTermination;

/*
 Opaque problem handle.
 */
typedef struct GgProblem GgProblem;

/*
 Opaque handle to a set of simulated trajectory records.
 */
typedef struct GgRecords GgRecords;

/*
 Monte Carlo mean with its standard error.
 */
typedef struct GgEstimate {
  double mean;
  double std_error;
  size_t n_samples;
  double censored_fraction;
} GgEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *gg_version(void);

/*
 Last error message on this thread, or NULL. Free with [`gg_string_free`].
 */
char *gg_last_error(void);

/*
 # Safety
 `s` must be NULL or a string returned by this library.
 */
void gg_string_free(char *s);

/*
 Builds a builtin problem (`brownian-exit`, `double-well`, `quadratic`).

 # Safety
 `name` must be a valid C string and `out` a valid pointer.
 */
enum GgStatus gg_problem_builtin(const char *name,
                                 double b,
                                 double horizon,
                                 struct GgProblem **out);

/*
 Builds a problem from JSON text.

 # Safety
 `json` must be a valid C string and `out` a valid pointer.
 */
enum GgStatus gg_problem_from_json(const char *json, struct GgProblem **out);

/*
 # Safety
 `problem` must be NULL or a handle from this library, not yet freed.
 */
void gg_problem_free(struct GgProblem *problem);

/*
 Number of basis functions, or 0 for a NULL handle.

 # Safety
 `problem` must be NULL or a live handle.
 */
size_t gg_problem_basis_size(const struct GgProblem *problem);

/*
 # Safety
 `problem` must be a live handle.
 */
enum GgStatus gg_problem_set_lambda(struct GgProblem *problem, double lambda);

/*
 # Safety
 `problem` must be a live handle.
 */
enum GgStatus gg_problem_set_dt(struct GgProblem *problem, double dt);

/*
 # Safety
 `problem` must be a live handle.
 */
enum GgStatus gg_problem_set_t_max(struct GgProblem *problem, double t_max);

/*
 # Safety
 `problem` must be a live handle.
 */
enum GgStatus gg_problem_set_bridge(struct GgProblem *problem, bool bridge);

/*
 Simulates `n` trajectories under the control with coefficients `a`.

 # Safety
 `problem` must be a live handle, `a` must hold `a_len` doubles and `out`
 must be a valid pointer.
 */
enum GgStatus gg_simulate(const struct GgProblem *problem,
                          const double *a,
                          size_t a_len,
                          size_t n,
                          uint64_t seed,
                          struct GgRecords **out);

/*
 # Safety
 `records` must be NULL or a handle from [`gg_simulate`], not yet freed.
 */
void gg_records_free(struct GgRecords *records);

/*
 # Safety
 `records` must be a live handle and `out` a valid pointer.
 */
enum GgStatus gg_records_phi(const struct GgRecords *records, struct GgEstimate *out);

/*
 Gradient estimate; both buffers need `K` entries.

 # Safety
 `records` must be a live handle; the buffers must hold `len` doubles.
 */
enum GgStatus gg_records_gradient(const struct GgRecords *records,
                                  enum GgForm form,
                                  double *values,
                                  double *std_errors,
                                  size_t len);

/*
 Hessian estimate, row-major; both buffers need `K·K` entries.

 # Safety
 `records` must be a live handle; the buffers must hold `len` doubles.
 */
enum GgStatus gg_records_hessian(const struct GgRecords *records,
                                 enum GgForm form,
                                 double *values,
                                 double *std_errors,
                                 size_t len);

/*
 Runs gradient descent or Newton from `a0` with default settings apart
 from the arguments. The final iterate is written to `a_out`.

 # Safety
 `problem` must be a live handle; `a0` and `a_out` must hold `len`
 doubles; `iterations` and `termination` must be valid pointers.
 */
enum GgStatus gg_optimize(const struct GgProblem *problem,
                          enum GgMethod method,
                          const double *a0,
                          size_t len,
                          size_t n,
                          uint64_t seed,
                          size_t max_iter,
                          double grad_tol,
                          double *a_out,
                          size_t *iterations,
                          enum GgTermination *termination);

/*
 Closed-form exit probabilities of driftless Brownian motion from 0 on
 `(-2, b)`.

 # Safety
 `p_left` and `p_right` must be valid pointers.
 */
enum GgStatus gg_exit_law(double b, double *p_left, double *p_right);

/*
 `q(b) = 2b(b² + 2b − 2)`.
 */
double gg_q_polynomial(double b);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GIRSANOV_GRAD_H */
