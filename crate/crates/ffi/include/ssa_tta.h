#ifndef SSA_TTA_H
#define SSA_TTA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible function.
 */
typedef enum {
  SSA_STATUS_OK = 0,
  SSA_STATUS_CONFIG_ERROR = 1,
  SSA_STATUS_DIVERGENCE = 2,
  SSA_STATUS_IO_ERROR = 3,
  SSA_STATUS_DIMENSION_ERROR = 4,
  SSA_STATUS_NUMERICAL_ERROR = 5,
  SSA_STATUS_NULL_ARGUMENT = 6,
  SSA_STATUS_INVALID_UTF8 = 7,
  SSA_STATUS_PANIC = 8,
} SsaStatus;

/**
 * Opaque regression model handle.
 */
typedef struct SsaModel SsaModel;

/**
 * Opaque source-statistics handle (feature moments + subspace).
 */
typedef struct SsaSourceStats SsaSourceStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *ssa_last_error_message(void);

/**
 * Creates an MLP regressor (Linear → BatchNorm → ReLU blocks + linear head).
 * Returns NULL on invalid arguments.
 */
SsaModel *ssa_model_new_mlp(uintptr_t d_in,
                            const uintptr_t *hidden,
                            uintptr_t n_hidden,
                            uint64_t init_seed);

void ssa_model_free(SsaModel *model);

void ssa_stats_free(SsaSourceStats *stats);

/**
 * Number of feature dimensions (last hidden width).
 */
uintptr_t ssa_model_feature_dim(const SsaModel *model);

/**
 * Predicts `rows` outputs into `out`. `use_batch_stats != 0` normalizes with
 * the incoming batch (requires rows >= 2), otherwise running statistics.
 */
SsaStatus ssa_model_predict(SsaModel *model,
                            const double *x,
                            uintptr_t rows,
                            uintptr_t cols,
                            int32_t use_batch_stats,
                            double *out);

/**
 * Supervised source training (Adam on MSE), then captures feature statistics
 * and the significant subspace. `k = 0` means "full numeric rank". On
 * success `*out_stats` owns the captured statistics.
 */
SsaStatus ssa_train_source(SsaModel *model,
                           const double *x,
                           const double *y,
                           uintptr_t rows,
                           uintptr_t cols,
                           uintptr_t epochs,
                           double lr,
                           uintptr_t batch_size,
                           uint64_t seed,
                           uintptr_t k,
                           SsaSourceStats **out_stats);

/**
 * Detected subspace size K.
 */
uintptr_t ssa_stats_subspace_k(const SsaSourceStats *stats);

/**
 * Offline significant-subspace alignment on unlabeled target rows,
 * updating only normalization affine parameters. A recorded divergence
 * returns `Divergence` with the reason in the last-error message.
 */
SsaStatus ssa_run_tta(SsaModel *model,
                      const SsaSourceStats *stats,
                      const double *x,
                      uintptr_t rows,
                      uintptr_t cols,
                      uintptr_t k,
                      double lr,
                      uintptr_t batch_size,
                      uintptr_t epochs,
                      uint64_t seed);

/**
 * Closed-form KL divergence between two univariate Gaussians.
 */
SsaStatus ssa_gaussian_kl(double mu1, double var1, double mu2, double var2, double *out);

/**
 * Saves model + statistics as a versioned JSON checkpoint.
 */
SsaStatus ssa_checkpoint_save(const SsaModel *model, const SsaSourceStats *stats, const char *path);

/**
 * Loads a checkpoint saved by `ssa_checkpoint_save` or the CLI.
 */
SsaStatus ssa_checkpoint_load(const char *path, SsaModel **out_model, SsaSourceStats **out_stats);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SSA_TTA_H */
