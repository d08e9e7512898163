#ifndef FRACCTL_H
#define FRACCTL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FracStatus {
  FRAC_STATUS_OK = 0,
  FRAC_STATUS_NULL_POINTER = 1,
  FRAC_STATUS_INVALID_ARGUMENT = 2,
  FRAC_STATUS_CONFIG = 3,
  FRAC_STATUS_NUMERICAL = 4,
  FRAC_STATUS_BUFFER_TOO_SMALL = 5,
  FRAC_STATUS_PANIC = 6,
} FracStatus;

typedef enum FracVerdict {
  FRAC_VERDICT_PASS = 0,
  FRAC_VERDICT_FAIL = 1,
  FRAC_VERDICT_INCONCLUSIVE = 2,
} FracVerdict;

/**
 * Level-2 lift of a piecewise-linear path.
 */
typedef struct FracLift FracLift;

/**
 * Sampled path on a dyadic grid.
 */
typedef struct FracPath FracPath;

/**
 * Parsed controlled system.
 */
typedef struct FracSystem FracSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or NULL. The pointer stays valid until
 * the next failing call on the same thread.
 */
const char *frac_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *frac_version(void);

/**
 * Samples `dim` independent fBm components on `2^levels + 1` points of
 * `[0, horizon]`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum FracStatus frac_fbm_sample(double hurst,
                                size_t dim,
                                uint32_t levels,
                                double horizon,
                                uint64_t seed,
                                struct FracPath **out);

/**
 * # Safety
 * `path` must be NULL or a handle from this library not yet freed.
 */
void frac_path_free(struct FracPath *path);

/**
 * Number of grid points and components.
 *
 * # Safety
 * `path` must be a live handle; `points` and `dim` must be NULL or writable.
 */
enum FracStatus frac_path_shape(const struct FracPath *path, size_t *points, size_t *dim);

/**
 * Copies the time-major values (`points × dim`).
 *
 * # Safety
 * `path` must be a live handle, `buf` must hold `cap` doubles, `len` NULL or writable.
 */
enum FracStatus frac_path_values(const struct FracPath *path, double *buf, size_t cap, size_t *len);

/**
 * Level-2 lift of the path, read as piecewise linear between grid points.
 *
 * # Safety
 * `path` must be a live handle and `out` writable.
 */
enum FracStatus frac_lift_new(const struct FracPath *path, struct FracLift **out);

/**
 * # Safety
 * `lift` must be NULL or a handle from this library not yet freed.
 */
void frac_lift_free(struct FracLift *lift);

/**
 * Second level over grid points `s ≤ t`, row-major `dim × dim`.
 *
 * # Safety
 * `lift` must be a live handle, `buf` must hold `cap` doubles, `len` NULL or writable.
 */
enum FracStatus frac_lift_second(const struct FracLift *lift,
                                 size_t s,
                                 size_t t,
                                 double *buf,
                                 size_t cap,
                                 size_t *len);

/**
 * Largest entry of the Chen defect at grid times `s ≤ u ≤ t`.
 *
 * # Safety
 * `lift` must be a live handle and `out` writable.
 */
enum FracStatus frac_lift_chen_defect(const struct FracLift *lift,
                                      double s,
                                      double u,
                                      double t,
                                      double *out);

/**
 * Parses a system description (TOML text).
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` writable.
 */
enum FracStatus frac_system_from_toml(const char *toml, struct FracSystem **out);

/**
 * Loads a bundled preset by name.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` writable.
 */
enum FracStatus frac_system_preset(const char *name, struct FracSystem **out);

/**
 * # Safety
 * `sys` must be NULL or a handle from this library not yet freed.
 */
void frac_system_free(struct FracSystem *sys);

/**
 * State, control, Brownian and observation dimensions.
 *
 * # Safety
 * `sys` must be a live handle; the outputs must be NULL or writable.
 */
enum FracStatus frac_system_dims(const struct FracSystem *sys,
                                 size_t *n,
                                 size_t *d,
                                 size_t *k1,
                                 size_t *k2);

/**
 * `Γ_t = exp(K_t)` for the system's fBm coefficient family along `driver`
 * (one component per generator), row-major `n × n`.
 *
 * # Safety
 * `sys` and `driver` must be live handles, `buf` must hold `cap` doubles.
 */
enum FracStatus frac_gamma_cbhd(const struct FracSystem *sys,
                                const struct FracPath *driver,
                                double t,
                                double *buf,
                                size_t cap,
                                size_t *len);

/**
 * Monte-Carlo expected cost under a constant control (`d` values),
 * simulated under the physical measure with trapezoidal quadrature.
 *
 * # Safety
 * `sys` must be a live handle, `control` must hold `d` doubles, outputs writable.
 */
enum FracStatus frac_expected_cost(const struct FracSystem *sys,
                                   const double *control,
                                   size_t samples,
                                   uint32_t level,
                                   uint64_t seed,
                                   double *mean,
                                   double *se);

/**
 * Maximum-principle check of the LQ-optimal open-loop control plus
 * `shift` on a linear-quadratic system. `fix_omega2 < 0` leaves the fBm
 * random per sample (allowed only without an fBm part).
 *
 * # Safety
 * `sys` must be a live handle; `verdict`, `worst_estimate`, `worst_tol` must be writable.
 */
enum FracStatus frac_mp_check_lq(const struct FracSystem *sys,
                                 double shift,
                                 size_t samples,
                                 uint32_t level,
                                 uint64_t seed,
                                 int64_t fix_omega2,
                                 enum FracVerdict *verdict,
                                 double *worst_estimate,
                                 double *worst_tol);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FRACCTL_H */
