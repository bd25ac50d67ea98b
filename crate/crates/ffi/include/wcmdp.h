#ifndef WCMDP_H
#define WCMDP_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum WcmdpStatus {
  WCMDP_STATUS_OK = 0,
  WCMDP_STATUS_NULL_POINTER = 1,
  WCMDP_STATUS_INVALID_UTF8 = 2,
  WCMDP_STATUS_INVALID_CONFIG = 3,
  WCMDP_STATUS_INVALID_PARAMS = 4,
  WCMDP_STATUS_OUT_OF_RANGE = 5,
  WCMDP_STATUS_SHAPE_MISMATCH = 6,
  WCMDP_STATUS_SOLVER_FAILED = 7,
  WCMDP_STATUS_BUFFER_TOO_SMALL = 8,
  WCMDP_STATUS_PANIC = 9,
} WcmdpStatus;

/*
 Analytic transition kernel for one model.
 */
typedef struct WcmdpKernel WcmdpKernel;

/*
 Validated system parameters and costs.
 */
typedef struct WcmdpModel WcmdpModel;

/*
 KKT-certified relaxed LP solution.
 */
typedef struct WcmdpSolution WcmdpSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failure on this thread; empty if none. The pointer
 stays valid until the next failing call on the same thread.
 */
const char *wcmdp_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *wcmdp_version(void);

/*
 Parses a JSON config (same keys as the CLI) into a model.

 # Safety
 `json` must be a NUL-terminated string; `out` must be writable.
 */
enum WcmdpStatus wcmdp_model_new(const char *json, struct WcmdpModel **out);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` must come from [`wcmdp_model_new`] and not be used afterwards.
 */
void wcmdp_model_free(struct WcmdpModel *model);

/*
 Horizon `T` and number of per-queue states `K + 1`.

 # Safety
 `model` must be a live handle; outputs must be writable.
 */
enum WcmdpStatus wcmdp_model_dims(const struct WcmdpModel *model, size_t *horizon, size_t *states);

/*
 Analytic kernel with geometric tail mass at most `tail_eps`.

 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum WcmdpStatus wcmdp_kernel_compute(const struct WcmdpModel *model,
                                      double tail_eps,
                                      struct WcmdpKernel **out);

/*
 `P(s' | s, a, b)`; zero for rows that admit into a full queue.

 # Safety
 `kernel` must be a live handle; `out` must be writable.
 */
enum WcmdpStatus wcmdp_kernel_prob(const struct WcmdpKernel *kernel,
                                   size_t s,
                                   size_t s_prime,
                                   size_t a,
                                   size_t b,
                                   double *out);

/*
 Releases a kernel. Null is ignored.

 # Safety
 `kernel` must come from [`wcmdp_kernel_compute`] and not be used afterwards.
 */
void wcmdp_kernel_free(struct WcmdpKernel *kernel);

/*
 Solves the relaxed LP plus `gamma_reg * ||y||^2` to a KKT certificate.

 # Safety
 `model` and `kernel` must be live handles for the same model; `out`
 must be writable.
 */
enum WcmdpStatus wcmdp_solve_lp(const struct WcmdpModel *model,
                                const struct WcmdpKernel *kernel,
                                double gamma_reg,
                                struct WcmdpSolution **out);

/*
 Unregularized objective, normalized acceptance and high-rate
 probabilities, and the largest KKT residual. Null outputs are skipped.

 # Safety
 `solution` must be a live handle; non-null outputs must be writable.
 */
enum WcmdpStatus wcmdp_solution_summary(const struct WcmdpSolution *solution,
                                        double *objective,
                                        double *pi_a_hat,
                                        double *pi_h_hat,
                                        double *kkt_max);

/*
 Copies `y` in `(t, s, a, b)` row-major order into `buf`, which must hold
 `T * (K + 1) * 4` values. `len` is the capacity of `buf`.

 # Safety
 `solution` must be a live handle; `buf` must be writable for `len` values.
 */
enum WcmdpStatus wcmdp_solution_copy_y(const struct WcmdpSolution *solution,
                                       double *buf,
                                       size_t len);

/*
 Releases a solution. Null is ignored.

 # Safety
 `solution` must come from [`wcmdp_solve_lp`] and not be used afterwards.
 */
void wcmdp_solution_free(struct WcmdpSolution *solution);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WCMDP_H */
