#ifndef EXTVAE_H
#define EXTVAE_H

#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum ExtvaeStatus {
  EXTVAE_STATUS_OK = 0,
  // A required pointer was null.
  EXTVAE_STATUS_NULL_POINTER = 1,
  // An argument is outside its domain or inconsistent with another.
  EXTVAE_STATUS_INVALID_ARGUMENT = 2,
  // Malformed or unreadable input data.
  EXTVAE_STATUS_DATA = 3,
  // An optimizer, sampler or quadrature failed.
  EXTVAE_STATUS_NUMERICAL = 4,
  EXTVAE_STATUS_PANIC = 5,
} ExtvaeStatus;

// Scale tag of a field.
typedef enum ExtvaeScale {
  EXTVAE_SCALE_RAW = 0,
  EXTVAE_SCALE_UNIFORM = 1,
  EXTVAE_SCALE_FRECHET = 2,
} ExtvaeScale;

// Opaque field: replicates by sites.
typedef struct ExtvaeField ExtvaeField;

// Opaque trained or initialized emulator.
typedef struct ExtvaeModel ExtvaeModel;

// Opaque set of 2-D site coordinates.
typedef struct ExtvaeSites ExtvaeSites;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next call into the library on the same thread.
const char *extvae_last_error(void);

// Library version as a static nul-terminated string.
const char *extvae_version(void);

// Sites from `n` interleaved `(x, y)` pairs.
//
// # Safety
// `xy` must point to `2 n` doubles; `out` must be writable.
enum ExtvaeStatus extvae_sites_new(const double *xy, size_t n, struct ExtvaeSites **out);

// # Safety
// `sites` must come from this library or be null.
void extvae_sites_free(struct ExtvaeSites *sites);

// # Safety
// `sites` must be a live handle or null.
size_t extvae_sites_len(const struct ExtvaeSites *sites);

// Field from `n_t * n_sites` replicate-major values.
//
// # Safety
// `values` must point to `n_t * len(sites)` doubles.
enum ExtvaeStatus extvae_field_new(const double *values,
                                   size_t n_t,
                                   const struct ExtvaeSites *sites,
                                   enum ExtvaeScale scale,
                                   struct ExtvaeField **out);

// Simulates design `model` (1-5 for I-V) with latent stability `alpha`.
//
// # Safety
// `sites` must be a live handle; `out` must be writable.
enum ExtvaeStatus extvae_simulate(uint32_t model,
                                  double alpha,
                                  const struct ExtvaeSites *sites,
                                  size_t n_t,
                                  uint64_t seed,
                                  struct ExtvaeField **out);

// Reads a long-format CSV field (`t,site_id,x,y,value`).
//
// # Safety
// `csv_path` must be a nul-terminated string.
enum ExtvaeStatus extvae_field_read_csv(const char *csv_path,
                                        enum ExtvaeScale scale,
                                        struct ExtvaeField **out);

// # Safety
// `field` must be a live handle and `csv_path` a nul-terminated string.
enum ExtvaeStatus extvae_field_write_csv(const struct ExtvaeField *field, const char *csv_path);

// # Safety
// `field` must come from this library or be null.
void extvae_field_free(struct ExtvaeField *field);

// Writes the replicate and site counts.
//
// # Safety
// All pointers must be valid.
enum ExtvaeStatus extvae_field_shape(const struct ExtvaeField *field, size_t *n_t, size_t *n_sites);

// Copies the replicate-major values into `out`, which holds `len` doubles.
//
// # Safety
// `out` must point to `len` writable doubles.
enum ExtvaeStatus extvae_field_values(const struct ExtvaeField *field, double *out, size_t len);

// Draws `n` variables from the exponentially tilted positive-stable law
// with stability `alpha` and tilt `theta`.
//
// # Safety
// `out` must point to `n` writable doubles.
enum ExtvaeStatus extvae_sample_tilted_ps(double alpha,
                                          double theta,
                                          uint64_t seed,
                                          size_t n,
                                          double *out);

// Maximum-likelihood GEV fit; writes `mu`, `sigma`, `xi` to `params[0..3]`
// and their standard errors to `se[0..3]` when `se` is not null.
//
// # Safety
// `series` must hold `n` doubles, `params` 3 writable doubles.
enum ExtvaeStatus extvae_fit_gev(const double *series, size_t n, double *params, double *se);

// Empirical `χ_h(u)` with its 95% envelope at `n_u` thresholds. The field
// must be on the uniform scale.
//
// # Safety
// `u` must hold `n_u` doubles and each output `n_u` writable doubles.
enum ExtvaeStatus extvae_empirical_chi(const struct ExtvaeField *field,
                                       double h,
                                       double tol,
                                       const double *u,
                                       size_t n_u,
                                       double *estimate,
                                       double *lower,
                                       double *upper);

// CRPS of an ensemble of `n` members against observation `y`.
//
// # Safety
// `ensemble` must hold `n` doubles and `out` be writable.
enum ExtvaeStatus extvae_crps_ensemble(const double *ensemble, size_t n, double y, double *out);

// Initializes an emulator on `field` with a regular `n x n` grid of knots
// over `[0, 10]^2` with the given radius, then runs at most `max_iters`
// training iterations (0 skips training).
//
// # Safety
// `field` must be a live handle; `out` must be writable.
enum ExtvaeStatus extvae_model_train(const struct ExtvaeField *field,
                                     size_t knots_per_side,
                                     double radius,
                                     size_t max_iters,
                                     uint64_t seed,
                                     struct ExtvaeModel **out);

// Loads a model saved by [`extvae_model_save`] or the command line.
//
// # Safety
// `json_path` must be a nul-terminated string; `out` must be writable.
enum ExtvaeStatus extvae_model_load(const char *json_path, struct ExtvaeModel **out);

// # Safety
// `model` must be a live handle and `json_path` a nul-terminated string.
enum ExtvaeStatus extvae_model_save(const struct ExtvaeModel *model, const char *json_path);

// Number of knots of the model, 0 for a null handle.
//
// # Safety
// `model` must be a live handle or null.
size_t extvae_model_n_knots(const struct ExtvaeModel *model);

// Emulates `draws` ensembles conditioned on the replicates of `field`.
//
// # Safety
// Handles must be live; `out` must be writable.
enum ExtvaeStatus extvae_emulate(const struct ExtvaeModel *model,
                                 const struct ExtvaeField *field,
                                 size_t draws,
                                 uint64_t seed,
                                 struct ExtvaeField **out);

// # Safety
// `model` must come from this library or be null.
void extvae_model_free(struct ExtvaeModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EXTVAE_H */
