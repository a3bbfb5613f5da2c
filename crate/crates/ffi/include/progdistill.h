#ifndef PROGDISTILL_H
#define PROGDISTILL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PdLossWeighting {
  PD_LOSS_WEIGHTING_SNR = 0,
  PD_LOSS_WEIGHTING_TRUNCATED_SNR = 1,
  PD_LOSS_WEIGHTING_SNR_PLUS_ONE = 2,
} PdLossWeighting;

typedef enum PdStatus {
  PD_STATUS_OK = 0,
  PD_STATUS_NULL_POINTER = 1,
  PD_STATUS_DOMAIN = 2,
  PD_STATUS_ZERO_SNR = 3,
  PD_STATUS_SHAPE = 4,
  PD_STATUS_DIVERGENCE = 5,
  PD_STATUS_CONFIG = 6,
  PD_STATUS_IO = 7,
  PD_STATUS_CHECKPOINT = 8,
  PD_STATUS_INVALID_STRING = 9,
  PD_STATUS_PANIC = 10,
} PdStatus;

/**
 * Opaque model handle.
 */
typedef struct PdModel PdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread; empty after a successful call. The
 * pointer stays valid until the next library call on the same thread.
 */
const char *pd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pd_version(void);

/**
 * Load a checkpoint file into a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PdStatus pd_model_load(const char *path, struct PdModel **out);

/**
 * Release a handle; null is ignored.
 *
 * # Safety
 * `model` must come from [`pd_model_load`] and not be used afterwards.
 */
void pd_model_free(struct PdModel *model);

/**
 * Data dimension of the model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum PdStatus pd_model_dim(const struct PdModel *model, size_t *out);

/**
 * `x_hat` for `rows` latents `z` (rows x dim) at times `t` (one per row).
 *
 * # Safety
 * `z` and `out` must hold `rows * dim` doubles, `t` must hold `rows`.
 */
enum PdStatus pd_model_predict_x(const struct PdModel *model,
                                 const double *z,
                                 const double *t,
                                 size_t rows,
                                 bool use_ema,
                                 double *out);

/**
 * Draw `count` samples with `sampler` (e.g. "ddim", "ancestral:0.5") on an
 * `steps`-step grid. `out` receives `count * dim` doubles.
 *
 * # Safety
 * `sampler` must be NUL-terminated; `out` must hold `count * dim` doubles.
 */
enum PdStatus pd_model_sample(const struct PdModel *model,
                              const char *sampler,
                              size_t steps,
                              size_t count,
                              uint64_t seed,
                              bool use_ema,
                              double *out);

/**
 * Schedule coefficients and log-SNR at `t` (log-SNR is +/-infinity at the endpoints).
 *
 * # Safety
 * Output pointers must be valid; any may be null to skip it.
 */
enum PdStatus pd_alpha_sigma(double t, double *alpha, double *sigma, double *log_snr);

/**
 * Loss weight at log-SNR `lambda` (infinite values select the endpoint limits).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum PdStatus pd_loss_weight(double lambda, enum PdLossWeighting weighting, double *out);

/**
 * One DDIM step `t -> s` of a `dim`-vector given the denoiser output `x_hat`.
 *
 * # Safety
 * `z`, `x_hat` and `out` must hold `dim` doubles.
 */
enum PdStatus pd_ddim_step(const double *z,
                           const double *x_hat,
                           size_t dim,
                           double t,
                           double s,
                           double *out);

/**
 * Energy distance between `na` and `nb` samples of dimension `dim`.
 *
 * # Safety
 * `a` must hold `na * dim` doubles, `b` `nb * dim`; `out` must be valid.
 */
enum PdStatus pd_energy_distance(const double *a,
                                 size_t na,
                                 const double *b,
                                 size_t nb,
                                 size_t dim,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROGDISTILL_H */
