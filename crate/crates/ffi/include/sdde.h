#ifndef SDDE_H
#define SDDE_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SddeStatus {
  SDDE_STATUS_OK = 0,
  SDDE_STATUS_INVALID_ARGUMENT = 1,
  SDDE_STATUS_NUMERIC_RANGE = 2,
  SDDE_STATUS_CONFIG = 3,
  SDDE_STATUS_IO = 4,
  SDDE_STATUS_NULL_POINTER = 5,
  SDDE_STATUS_PANIC = 6,
} SddeStatus;

typedef enum SddeTransferDirection {
  SDDE_TRANSFER_DIRECTION_SDDE_TO_SCHEME = 0,
  SDDE_TRANSFER_DIRECTION_SCHEME_TO_SDDE = 1,
} SddeTransferDirection;

/**
 * Simulated paths on the grid `k = -M..=K`.
 */
typedef struct SddeEnsembleHandle SddeEnsembleHandle;

/**
 * A truncation policy.
 */
typedef struct SddePolicyHandle SddePolicyHandle;

/**
 * An equation: coefficients, delay and initial segment.
 */
typedef struct SddeProblemHandle SddeProblemHandle;

/**
 * `out[i] = coefficient(x, y)[i]`; `x` and `y` have `dim` entries.
 */
typedef void (*SddeCoefficientCallback)(const double *x,
                                        const double *y,
                                        double *out,
                                        void *user_data);

/**
 * `out = ξ(u)` for `u` in `[-τ, 0]`.
 */
typedef void (*SddeInitialCallback)(double u, double *out, void *user_data);

/**
 * Result of [`sdde_transfer_constants`].
 */
typedef struct SddeTransferConstants {
  double window_t;
  double output_rate;
  double output_growth;
} SddeTransferConstants;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. Valid
 * until the next failing call on the same thread.
 */
const char *sdde_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sdde_version(void);

/**
 * Builds a registry problem (`"paper-example-2d"`, `"linear-scalar"`,
 * `"superlinear-blowup"`) with optional named scalar parameters.
 *
 * # Safety
 * `key` must be a NUL-terminated string; `names` and `values` must hold
 * `n_params` entries (each name NUL-terminated); `out` must be writable.
 */
enum SddeStatus sdde_problem_from_registry(const char *key,
                                           const char *const *names,
                                           const double *values,
                                           size_t n_params,
                                           struct SddeProblemHandle **out);

/**
 * Builds a problem from C callbacks. The drift writes `dim` values, the
 * diffusion a row-major `dim × noise_dim` matrix, the initial segment `dim`
 * values. The segment is declared `holder_exponent`-Hölder with constant
 * `holder_constant`.
 *
 * # Safety
 * `name` must be NUL-terminated. The callbacks and `user_data` must stay
 * valid until the problem and every ensemble built from it are freed, and
 * must be safe to call concurrently from several threads.
 */
enum SddeStatus sdde_problem_from_callbacks(const char *name,
                                            size_t dim,
                                            size_t noise_dim,
                                            double tau,
                                            SddeCoefficientCallback drift,
                                            SddeCoefficientCallback diffusion,
                                            SddeInitialCallback initial,
                                            void *user_data,
                                            double holder_exponent,
                                            double holder_constant,
                                            bool origin_fixed,
                                            struct SddeProblemHandle **out);

/**
 * # Safety
 * `problem` must come from a `sdde_problem_*` constructor or be null.
 */
void sdde_problem_free(struct SddeProblemHandle *problem);

/**
 * State dimension of `problem`, or 0 if it is null.
 *
 * # Safety
 * `problem` must be a live handle or null.
 */
size_t sdde_problem_dim(const struct SddeProblemHandle *problem);

/**
 * Noise dimension of `problem`, or 0 if it is null.
 *
 * # Safety
 * `problem` must be a live handle or null.
 */
size_t sdde_problem_noise_dim(const struct SddeProblemHandle *problem);

/**
 * `out = f(x, y)` with `dim` entries.
 *
 * # Safety
 * `x`, `y` and `out` must hold `dim` entries.
 */
enum SddeStatus sdde_problem_eval_drift(const struct SddeProblemHandle *problem,
                                        const double *x,
                                        const double *y,
                                        double *out);

/**
 * `out = g(x, y)`, row-major with `dim × noise_dim` entries.
 *
 * # Safety
 * `x` and `y` must hold `dim` entries, `out` `dim × noise_dim`.
 */
enum SddeStatus sdde_problem_eval_diffusion(const struct SddeProblemHandle *problem,
                                            const double *x,
                                            const double *y,
                                            double *out);

/**
 * Truncation policy with `μ(u) = h3·u^{(2+ρ)/2}` and `h(Δ) = h_hat·Δ^{-ε}`.
 *
 * # Safety
 * `out` must be writable.
 */
enum SddeStatus sdde_policy_new(double h3,
                                double rho,
                                double h_hat,
                                double epsilon,
                                struct SddePolicyHandle **out);

/**
 * # Safety
 * `policy` must come from [`sdde_policy_new`] or be null.
 */
void sdde_policy_free(struct SddePolicyHandle *policy);

/**
 * Radius `μ⁻¹(h(Δ))` of the truncation ball at step `delta`.
 *
 * # Safety
 * `policy` must be live and `out` writable.
 */
enum SddeStatus sdde_policy_truncation_radius(const struct SddePolicyHandle *policy,
                                              double delta,
                                              double *out);

/**
 * Threshold `h(Δ) = ĥ Δ^{-ε}` at step `delta`.
 *
 * # Safety
 * `policy` must be live and `out` writable.
 */
enum SddeStatus sdde_policy_h(const struct SddePolicyHandle *policy, double delta, double *out);

/**
 * Simulates `n_paths` paths with step `τ / m_sub` up to `horizon`. A null
 * `policy` selects the classical scheme.
 *
 * # Safety
 * `problem` must be live, `policy` live or null, `out` writable.
 */
enum SddeStatus sdde_simulate(const struct SddeProblemHandle *problem,
                              const struct SddePolicyHandle *policy,
                              size_t m_sub,
                              double horizon,
                              size_t n_paths,
                              uint64_t seed,
                              struct SddeEnsembleHandle **out);

/**
 * # Safety
 * `ensemble` must come from [`sdde_simulate`] or be null.
 */
void sdde_ensemble_free(struct SddeEnsembleHandle *ensemble);

/**
 * Number of paths, or 0 for a null handle.
 *
 * # Safety
 * `ensemble` must be live or null.
 */
size_t sdde_ensemble_n_paths(const struct SddeEnsembleHandle *ensemble);

/**
 * Stored grid points per path, `M + K + 1`, or 0 for a null handle.
 *
 * # Safety
 * `ensemble` must be live or null.
 */
size_t sdde_ensemble_points_per_path(const struct SddeEnsembleHandle *ensemble);

/**
 * Copies `X_k` of `path` (`dim` values) into `out`; `k` ranges over
 * `-M..=K`.
 *
 * # Safety
 * `ensemble` must be live and `out` hold `dim` entries.
 */
enum SddeStatus sdde_ensemble_state(const struct SddeEnsembleHandle *ensemble,
                                    size_t path,
                                    int64_t k,
                                    double *out);

/**
 * Whether `path` was flagged as blown up (classical scheme only).
 *
 * # Safety
 * `ensemble` must be live and `out` writable.
 */
enum SddeStatus sdde_ensemble_flagged(const struct SddeEnsembleHandle *ensemble,
                                      size_t path,
                                      bool *out);

/**
 * Strong errors `Ê|x_ref(T) - x_Δ(T)|^q̄` for each of `n_deltas` steps
 * against the reference step `τ / reference_m_sub`, on coupled paths.
 * `errors` and `std_errors` receive values in descending order of Δ;
 * `fitted_order` receives the strong order, or NaN with fewer than two
 * positive errors.
 *
 * # Safety
 * `deltas`, `errors` and `std_errors` must hold `n_deltas` entries;
 * `fitted_order` must be writable.
 */
enum SddeStatus sdde_strong_error(const struct SddeProblemHandle *problem,
                                  const struct SddePolicyHandle *policy,
                                  const double *deltas,
                                  size_t n_deltas,
                                  size_t reference_m_sub,
                                  double q_bar,
                                  size_t n_paths,
                                  double horizon,
                                  uint64_t seed,
                                  double *errors,
                                  double *std_errors,
                                  double *fitted_order);

/**
 * Rate `r/2`, window `T` and growth `2^{p+1} G C* e^{rT/2}` carried across
 * the equation/scheme boundary.
 *
 * # Safety
 * `out` must be writable.
 */
enum SddeStatus sdde_transfer_constants(enum SddeTransferDirection direction,
                                        double rate,
                                        double growth,
                                        double p,
                                        double tau,
                                        double c_star,
                                        struct SddeTransferConstants *out);

/**
 * Whether `2^p C α + 2^p H e^{-γ(T-2τ)} ≤ e^{-γT/2}` holds.
 *
 * # Safety
 * `out` must be writable.
 */
enum SddeStatus sdde_check_transfer_condition(double c_of_t,
                                              double alpha_of_delta,
                                              double p,
                                              double growth,
                                              double rate,
                                              double window_t,
                                              double tau,
                                              bool *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SDDE_H */
