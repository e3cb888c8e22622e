#ifndef MFSDE_H
#define MFSDE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MfsdeStatus {
  MFSDE_STATUS_OK = 0,
  MFSDE_STATUS_NULL_POINTER = 1,
  MFSDE_STATUS_INVALID_ARGUMENT = 2,
  MFSDE_STATUS_NUMERICAL_FAILURE = 3,
  MFSDE_STATUS_IO = 4,
  MFSDE_STATUS_PANIC = 5,
} MfsdeStatus;

// Interaction evaluation used by [`mfsde_ensemble_simulate`].
typedef enum MfsdeMode {
  MFSDE_MODE_INTERPOLATE = 0,
  MFSDE_MODE_EXACT = 1,
} MfsdeMode;

typedef struct MfsdeDensity MfsdeDensity;

typedef struct MfsdeEnsemble MfsdeEnsemble;

typedef struct MfsdeProblem MfsdeProblem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL-terminated,
// truncated to `len`). Returns the length needed including the NUL, or 0 if
// there is no message.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
uintptr_t mfsde_last_error_message(char *buf, uintptr_t len);

// Library version as a static NUL-terminated string.
const char *mfsde_version(void);

// Built-in example problem 1, 2 or 3.
//
// # Safety
// `out` must be a valid pointer.
enum MfsdeStatus mfsde_problem_builtin(uint32_t id, struct MfsdeProblem **out);

// # Safety
// `problem` must be valid and `dim` writable.
enum MfsdeStatus mfsde_problem_dim(const struct MfsdeProblem *problem, uintptr_t *dim);

// # Safety
// `problem` must come from this library and not be used afterwards.
void mfsde_problem_free(struct MfsdeProblem *problem);

// Solves the Fokker-Planck equation on `(-alpha, alpha)^d` with `2m + 1`
// nodes per axis and `n_steps` time steps up to the problem's horizon.
//
// # Safety
// `problem` must be valid and `out` writable.
enum MfsdeStatus mfsde_solve_fp(const struct MfsdeProblem *problem,
                                double alpha,
                                uintptr_t m,
                                uintptr_t n_steps,
                                struct MfsdeDensity **out);

// Reads a density written by [`mfsde_density_write`] or the CLI (binary, or CSV by `.csv` extension).
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum MfsdeStatus mfsde_density_read(const char *path,
                                    struct MfsdeDensity **out);

// # Safety
// `density` must be valid and `path` a NUL-terminated string.
enum MfsdeStatus mfsde_density_write(const struct MfsdeDensity *density, const char *path);

// # Safety
// `density` must come from this library and not be used afterwards.
void mfsde_density_free(struct MfsdeDensity *density);

// Number of time levels (`n_steps + 1`) and of nodes per level.
//
// # Safety
// `density` must be valid; the out pointers writable.
enum MfsdeStatus mfsde_density_shape(const struct MfsdeDensity *density,
                                     uintptr_t *levels,
                                     uintptr_t *nodes);

// Copies the node values of level `n` in lexicographic node order.
//
// # Safety
// `buf` must point to `len` writable doubles.
enum MfsdeStatus mfsde_density_copy_level(const struct MfsdeDensity *density,
                                          uintptr_t n,
                                          double *buf,
                                          uintptr_t len);

// # Safety
// `density` must be valid and `mass` writable.
enum MfsdeStatus mfsde_density_mass(const struct MfsdeDensity *density, uintptr_t n, double *mass);

// Mean (`d` values) and row-major covariance (`d * d` values) of level `n`.
//
// # Safety
// `mean` and `cov` must hold `mean_len` and `cov_len` doubles.
enum MfsdeStatus mfsde_density_moments(const struct MfsdeDensity *density,
                                       uintptr_t n,
                                       double *mean,
                                       uintptr_t mean_len,
                                       double *cov,
                                       uintptr_t cov_len);

// Piecewise-constant density value at time `t` and point `x` (`x_len` = d).
//
// # Safety
// `x` must hold `x_len` doubles and `value` be writable.
enum MfsdeStatus mfsde_density_eval(const struct MfsdeDensity *density,
                                    double t,
                                    const double *x,
                                    uintptr_t x_len,
                                    double *value);

// Euler-Maruyama ensemble of `paths` paths with `n_steps` steps. `density`
// supplies the interaction term and may be null only for problems without one.
//
// # Safety
// `problem` must be valid, `density` valid or null, `out` writable.
enum MfsdeStatus mfsde_ensemble_simulate(const struct MfsdeProblem *problem,
                                         const struct MfsdeDensity *density,
                                         enum MfsdeMode mode,
                                         uintptr_t paths,
                                         uintptr_t n_steps,
                                         uint64_t seed,
                                         struct MfsdeEnsemble **out);

// # Safety
// `ensemble` must be valid; the out pointers writable.
enum MfsdeStatus mfsde_ensemble_shape(const struct MfsdeEnsemble *ensemble,
                                      uintptr_t *paths,
                                      uintptr_t *dim);

// Final states, path-major (`paths * dim` values).
//
// # Safety
// `buf` must point to `len` writable doubles.
enum MfsdeStatus mfsde_ensemble_copy_final(const struct MfsdeEnsemble *ensemble,
                                           double *buf,
                                           uintptr_t len);

// # Safety
// `ensemble` must come from this library and not be used afterwards.
void mfsde_ensemble_free(struct MfsdeEnsemble *ensemble);

// RMS endpoint distance between two ensembles driven by the same Brownian paths.
//
// # Safety
// Both ensembles must be valid and `error` writable.
enum MfsdeStatus mfsde_strong_error(const struct MfsdeEnsemble *coarse,
                                    const struct MfsdeEnsemble *fine,
                                    double *error);

// Observed orders `log2(e[i+1] / e[i])` for errors at doubling resolutions,
// finest first. Writes `len - 1` values to `orders`.
//
// # Safety
// `errors` and `resolutions` must hold `len` doubles, `orders` `len - 1`.
enum MfsdeStatus mfsde_estimate_orders(const double *errors,
                                       const double *resolutions,
                                       uintptr_t len,
                                       double *orders);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MFSDE_H */
