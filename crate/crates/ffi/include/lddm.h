#ifndef LDDM_H
#define LDDM_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum LddmStatus {
  LDDM_STATUS_OK = 0,
  LDDM_STATUS_INVALID_ARGUMENT = 1,
  LDDM_STATUS_SHAPE_MISMATCH = 2,
  LDDM_STATUS_DEGENERATE_SCHEDULE = 3,
  LDDM_STATUS_DEGENERATE_INPUT = 4,
  LDDM_STATUS_NUMERICAL_OVERFLOW = 5,
  LDDM_STATUS_CAPACITY = 6,
  LDDM_STATUS_PARSE = 7,
  LDDM_STATUS_IO = 8,
  LDDM_STATUS_INTERNAL = 9,
  LDDM_STATUS_NULL_POINTER = 10,
  LDDM_STATUS_BUFFER_TOO_SMALL = 11,
  LDDM_STATUS_PANIC = 12,
} LddmStatus;

/**
 * A trained model restored from a checkpoint (EMA weights).
 */
typedef struct LddmModel LddmModel;

/**
 * A training run in progress.
 */
typedef struct LddmTrainer LddmTrainer;

/**
 * Loss terms of one training step.
 */
typedef struct LddmLoss {
  double data_term;
  double latent_term;
  double total;
  double lambda_latent;
} LddmLoss;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *lddm_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *lddm_last_error(void);

/**
 * Load a checkpoint written by training.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum LddmStatus lddm_model_load(const char *path, struct LddmModel **out);

/**
 * # Safety
 * `model` must come from [`lddm_model_load`] and not be used afterwards.
 */
void lddm_model_free(struct LddmModel *model);

/**
 * Sequence length, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t lddm_model_seq_len(const struct LddmModel *model);

/**
 * Vocabulary size including the mask token, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t lddm_model_vocab(const struct LddmModel *model);

/**
 * 0 = MDLM, 1 = FUJI, 2 = SEQ; -1 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
int32_t lddm_model_family(const struct LddmModel *model);

/**
 * Draw `n` sequences with `budget` data steps (`latent_steps` for the SEQ
 * latent chain) into `out_tokens`, row-major `n * seq_len`.
 *
 * # Safety
 * `model` must be a live handle, `out_tokens` valid for `capacity` writes
 * and `out_nfe` null or valid.
 */
enum LddmStatus lddm_model_sample(const struct LddmModel *model,
                                  size_t n,
                                  size_t budget,
                                  size_t latent_steps,
                                  uint64_t seed,
                                  uint32_t *out_tokens,
                                  size_t capacity,
                                  size_t *out_nfe);

/**
 * Create a trainer from configuration text (`key = value` lines).
 *
 * # Safety
 * `config` must be a valid C string and `out` a valid pointer.
 */
enum LddmStatus lddm_trainer_new(const char *config, struct LddmTrainer **out);

/**
 * # Safety
 * `trainer` must come from [`lddm_trainer_new`] and not be used afterwards.
 */
void lddm_trainer_free(struct LddmTrainer *trainer);

/**
 * One optimizer update.
 *
 * # Safety
 * `trainer` must be a live handle; `out_loss` null or valid.
 */
enum LddmStatus lddm_trainer_step(struct LddmTrainer *trainer, struct LddmLoss *out_loss);

/**
 * Updates performed so far, or 0 for a null handle.
 *
 * # Safety
 * `trainer` must be null or a live handle.
 */
size_t lddm_trainer_steps_done(const struct LddmTrainer *trainer);

/**
 * Per-token validation NELBO of the EMA weights.
 *
 * # Safety
 * `trainer` must be a live handle and `out_nelbo` valid.
 */
enum LddmStatus lddm_trainer_evaluate(const struct LddmTrainer *trainer,
                                      size_t mc_draws,
                                      double *out_nelbo);

/**
 * Write a checkpoint loadable with [`lddm_model_load`].
 *
 * # Safety
 * `trainer` must be a live handle and `path` a valid C string.
 */
enum LddmStatus lddm_trainer_save(const struct LddmTrainer *trainer, const char *path);

/**
 * `n` sawtooth sequences, row-major `n * seq_len` bits.
 *
 * # Safety
 * `out_tokens` must be valid for `capacity` writes.
 */
enum LddmStatus lddm_sawtooth_sample(size_t n,
                                     size_t seq_len,
                                     size_t periods,
                                     double floor,
                                     uint64_t seed,
                                     uint32_t *out_tokens,
                                     size_t capacity);

/**
 * Sliced Wasserstein distance between two `rows x cols` row-major samples.
 *
 * # Safety
 * `a` and `b` must be valid for `rows * cols` reads and `out` valid.
 */
enum LddmStatus lddm_sliced_wasserstein(const double *a,
                                        const double *b,
                                        size_t rows,
                                        size_t cols,
                                        size_t dirs,
                                        uint64_t seed,
                                        double *out);

/**
 * Factorization bound (nats) of a target given as a probability table over
 * clean sequences, under the linear mask schedule with `steps` steps.
 *
 * # Safety
 * `q0` must be valid for `len` reads and `out` valid.
 */
enum LddmStatus lddm_factorization_bound(const double *q0,
                                         size_t len,
                                         size_t seq_len,
                                         size_t vocab,
                                         size_t steps,
                                         double *out);

/**
 * Sampling grid from `steps` down to 0 with `budget` intervals, written in
 * decreasing order; `out_len` receives `budget + 1` or fewer entries.
 *
 * # Safety
 * `out` must be valid for `capacity` writes and `out_len` valid.
 */
enum LddmStatus lddm_time_grid(size_t steps,
                               size_t budget,
                               size_t *out,
                               size_t capacity,
                               size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LDDM_H */
