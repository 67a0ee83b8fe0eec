#ifndef SMA_DPSGD_H
#define SMA_DPSGD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SmaStatus {
  SMA_STATUS_OK = 0,
  SMA_STATUS_INVALID_ARGUMENT = 1,
  SMA_STATUS_NULL_POINTER = 2,
  SMA_STATUS_NUMERICAL = 3,
  SMA_STATUS_STATE = 4,
  SMA_STATUS_IO = 5,
  SMA_STATUS_PANIC = 6,
} SmaStatus;

// Opaque privacy ledger handle.
typedef struct SmaLedger SmaLedger;

// Opaque trainer handle.
typedef struct SmaTrainer SmaTrainer;

// Training settings for a synthetic-data trainer.
typedef struct SmaTrainerConfig {
  double beta;
  double alpha;
  size_t window_k;
  double learning_rate;
  double q;
  double rho_min;
  double rho_max;
  double c_lambda;
  double gamma_ema;
  double tau_warm;
  double xi_max;
  double eps_num;
  size_t min_tail;
  uint64_t seed;
  // Synthetic examples, input dimension and classes.
  size_t n;
  size_t d;
  size_t classes;
  // 0 for logistic regression, 1 for one hidden tanh layer.
  int architecture;
  size_t hidden;
  double clip_norm;
  double sigma;
} SmaTrainerConfig;

// Per-step summary returned by `sma_trainer_step`.
typedef struct SmaStepInfo {
  uint64_t step;
  size_t batch_size;
  double mean_d_eff;
  double mean_memory_ratio;
  double epsilon_joint;
  double epsilon_marginal;
} SmaStepInfo;

// Spectral diagnostics of one weight matrix.
typedef struct SmaSpectralResult {
  // NaN when the fit is invalid.
  double rho;
  double deviation;
  double tempering;
  size_t tail_size;
  int valid;
} SmaSpectralResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`). Returns the full message length.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t sma_last_error_message(char *buf, size_t len);

// Fills `cfg` with the library defaults.
//
// # Safety
// `cfg` must be null or valid for writes.
enum SmaStatus sma_trainer_config_default(struct SmaTrainerConfig *cfg);

// Builds a trainer on synthetic Gaussian-blob data.
//
// # Safety
// `cfg` must point to a valid config and `handle` be valid for writes.
enum SmaStatus sma_trainer_new(const struct SmaTrainerConfig *cfg, struct SmaTrainer **handle);

// # Safety
// `handle` must be null or come from `sma_trainer_new` and not be used afterwards.
void sma_trainer_free(struct SmaTrainer *handle);

// Runs one private step; `epsilon_*` are reported at `delta`.
//
// # Safety
// `handle` must be a live trainer and `info` null or valid for writes.
enum SmaStatus sma_trainer_step(struct SmaTrainer *handle, double delta, struct SmaStepInfo *info);

// Loss and accuracy on the training data.
//
// # Safety
// `handle` must be a live trainer; `loss` and `accuracy` valid for writes.
enum SmaStatus sma_trainer_evaluate(const struct SmaTrainer *handle,
                                    double *loss,
                                    double *accuracy);

// Number of parameter groups.
//
// # Safety
// `handle` must be a live trainer or null (returns 0).
size_t sma_trainer_num_groups(const struct SmaTrainer *handle);

// Copies group `group`'s flat parameters (weights row-major, then bias)
// into `buf`. `count` receives the parameter count; pass a null `buf` to
// query it.
//
// # Safety
// `buf` must be null or hold `len` writable doubles; `count` valid for writes.
enum SmaStatus sma_trainer_group_params(const struct SmaTrainer *handle,
                                        size_t group,
                                        double *buf,
                                        size_t len,
                                        size_t *count);

// Creates an empty ledger over orders `lo..=hi`. `marginal` nonzero tags it
// as the marginal diagnostic.
//
// # Safety
// `handle` must be valid for writes.
enum SmaStatus sma_ledger_new(uint32_t lo, uint32_t hi, int marginal, struct SmaLedger **handle);

// # Safety
// `handle` must be null or come from `sma_ledger_new` and not be used afterwards.
void sma_ledger_free(struct SmaLedger *handle);

// Adds one subsampled Gaussian step.
//
// # Safety
// `handle` must be a live ledger.
enum SmaStatus sma_ledger_compose(struct SmaLedger *handle, double q, double sigma_eff);

// Best `ε` over the ledger's orders at `delta`.
//
// # Safety
// `handle` must be a live ledger; `epsilon` and `order` null or valid for writes.
enum SmaStatus sma_ledger_epsilon(const struct SmaLedger *handle,
                                  double delta,
                                  double *epsilon,
                                  uint32_t *order);

// RDP of one Poisson-subsampled Gaussian step at an integer order.
//
// # Safety
// `result` must be valid for writes.
enum SmaStatus sma_rdp_subsampled_gaussian(uint32_t order, double q, double sigma, double *result);

// `1 / (β·sqrt(Σ σ_g⁻²))`.
//
// # Safety
// `sigmas` must hold `n` doubles; `result` valid for writes.
enum SmaStatus sma_sigma_eff_joint(double beta, const double *sigmas, size_t n, double *result);

// Power-law exponent from eigenvalues.
//
// # Safety
// `eigs` must hold `n` doubles; `result` valid for writes.
enum SmaStatus sma_fit_powerlaw(const double *eigs,
                                size_t n,
                                size_t min_tail,
                                struct SmaSpectralResult *result);

// Exponent, interval deviation and tempering of a row-major `rows×cols` matrix.
//
// # Safety
// `weights` must hold `rows*cols` doubles; `result` valid for writes.
enum SmaStatus sma_spectral_fit(const double *weights,
                                size_t rows,
                                size_t cols,
                                double rho_min,
                                double rho_max,
                                double c_lambda,
                                size_t min_tail,
                                struct SmaSpectralResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SMA_DPSGD_H */
