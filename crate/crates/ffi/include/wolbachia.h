#ifndef WOLBACHIA_H
#define WOLBACHIA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum WolStatus {
  WOL_STATUS_OK = 0,
  WOL_STATUS_NULL_POINTER = 1,
  WOL_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Parameters admit no coexistence state, so the reduced model is undefined.
   */
  WOL_STATUS_NO_COEXISTENCE = 3,
  /**
   * Newton failure, population collapse or another numerical breakdown.
   */
  WOL_STATUS_NUMERICAL = 4,
  WOL_STATUS_BUFFER_TOO_SMALL = 5,
  WOL_STATUS_PANIC = 6,
} WolStatus;

/**
 * Piecewise-constant control on a uniform grid.
 */
typedef struct WolControl WolControl;

/**
 * Biology plus scaling parameter.
 */
typedef struct WolModel WolModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *wol_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *wol_version(void);

/**
 * Model from birth rates `b1_0, b2_0`, death rates, cytoplasmic
 * incompatibility `s_h`, carrying capacity `k` and scaling `eps`.
 *
 * # Safety
 * `model` must be a valid pointer to writable storage for one handle.
 */
enum WolStatus wol_model_new(double b1_0,
                             double b2_0,
                             double d1,
                             double d2,
                             double s_h,
                             double k,
                             double eps,
                             struct WolModel **model);

/**
 * Reference biology (`b1_0 = 1, b2_0 = 0.9, d1 = 0.27, d2 = 0.3, s_h = 0.9, K = 1`).
 *
 * # Safety
 * `model` must be a valid pointer to writable storage for one handle.
 */
enum WolStatus wol_model_reference(double eps, struct WolModel **model);

/**
 * # Safety
 * `model` must be null or a handle from `wol_model_*` not yet freed.
 */
void wol_model_free(struct WolModel *model);

/**
 * Invasion threshold `theta` of the reduced equation.
 *
 * # Safety
 * `model` must be a live handle and `theta` writable.
 */
enum WolStatus wol_model_theta(const struct WolModel *model, double *theta);

/**
 * Budget threshold `C*(M)` separating late from early release.
 *
 * # Safety
 * `model` must be a live handle and `c_star` writable.
 */
enum WolStatus wol_model_c_star(const struct WolModel *model, double m, double *c_star);

/**
 * Control on `steps` equal cells of `[0, horizon]` from `steps` values.
 *
 * # Safety
 * `values` must point to `steps` readable doubles and `control` be writable.
 */
enum WolStatus wol_control_new(double horizon,
                               size_t steps,
                               const double *values,
                               struct WolControl **control);

/**
 * Closed-form optimum of the reduced problem for budget `c` and cap `m`.
 *
 * # Safety
 * `model` must be a live handle and `control` writable.
 */
enum WolStatus wol_control_reduced_optimum(const struct WolModel *model,
                                           double horizon,
                                           size_t steps,
                                           double c,
                                           double m,
                                           struct WolControl **control);

/**
 * # Safety
 * `control` must be null or a handle from `wol_control_*` not yet freed.
 */
void wol_control_free(struct WolControl *control);

/**
 * Number of cells, or 0 for a null handle.
 *
 * # Safety
 * `control` must be null or a live handle.
 */
size_t wol_control_len(const struct WolControl *control);

/**
 * `dt * sum(u)`.
 *
 * # Safety
 * `control` must be a live handle and `budget` writable.
 */
enum WolStatus wol_control_budget(const struct WolControl *control, double *budget);

/**
 * Copies the cell values into `buf`, which must hold `wol_control_len` doubles.
 *
 * # Safety
 * `control` must be a live handle and `buf` point to `len` writable doubles.
 */
enum WolStatus wol_control_values(const struct WolControl *control, double *buf, size_t len);

/**
 * Final `(n1, n2)` of the full system started at the wild equilibrium.
 *
 * # Safety
 * Handles must be live and `n1`, `n2` writable.
 */
enum WolStatus wol_simulate_full(const struct WolModel *model,
                                 const struct WolControl *control,
                                 double *n1,
                                 double *n2);

/**
 * Cost of `control` and, when `grad` is non-null, its gradient with
 * respect to the cell values. `reduced != 0` selects the scalar reduced
 * model instead of the full system.
 *
 * # Safety
 * Handles must be live, `cost` writable and `grad` null or `len` writable doubles.
 */
enum WolStatus wol_cost_and_gradient(const struct WolModel *model,
                                     const struct WolControl *control,
                                     int32_t reduced,
                                     double *cost,
                                     double *grad,
                                     size_t len);

/**
 * Projected-gradient optimum over `0 <= u <= m`, `dt sum(u) <= c` on a
 * `steps`-cell grid of `[0, horizon]`, from the standard starting controls.
 *
 * # Safety
 * `model` must be a live handle; `control` and `cost` writable.
 */
enum WolStatus wol_optimize(const struct WolModel *model,
                            double horizon,
                            size_t steps,
                            double c,
                            double m,
                            int32_t reduced,
                            size_t max_iter,
                            struct WolControl **control,
                            double *cost);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WOLBACHIA_H */
