#ifndef CONFU_H
#define CONFU_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Values for the `split` arguments.
 */
#define CONFU_SPLIT_TRAIN 0

#define CONFU_SPLIT_TEST 1

typedef enum ConfuStatus {
  CONFU_STATUS_OK = 0,
  CONFU_STATUS_NULL_POINTER = 1,
  /**
   * Bad config, bad argument, or an unsupported retrieval mode.
   */
  CONFU_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Training diverged or a computation hit a numerical domain error.
   */
  CONFU_STATUS_NUMERICAL = 3,
  CONFU_STATUS_IO = 4,
  /**
   * A caller buffer is too small; the required length was written back.
   */
  CONFU_STATUS_BUFFER_TOO_SMALL = 5,
  CONFU_STATUS_INTERNAL = 6,
} ConfuStatus;

/**
 * Train and test splits generated from one config.
 */
typedef struct ConfuDataset ConfuDataset;

/**
 * A trained (or freshly initialized) model plus its training trace.
 */
typedef struct ConfuModel ConfuModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *confu_version(void);

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next library call on the same thread.
 */
const char *confu_last_error_message(void);

/**
 * Exact total correlation (nats) of one XOR coordinate.
 *
 * # Safety
 * See the crate-level pointer rules.
 */
enum ConfuStatus confu_tc_exact(double p_hat, double *out);

/**
 * # Safety
 * See the crate-level pointer rules.
 */
enum ConfuStatus confu_dataset_generate(const char *config_json, struct ConfuDataset **out);

/**
 * # Safety
 * `ds` must be NULL or a handle from this library that is not used again.
 */
void confu_dataset_free(struct ConfuDataset *ds);

/**
 * # Safety
 * See the crate-level pointer rules.
 */
enum ConfuStatus confu_dataset_shape(const struct ConfuDataset *ds,
                                     uint32_t split,
                                     size_t *rows,
                                     size_t *dim);

/**
 * Copies modality `modality` (1, 2 or 3) row-major into `buf`. With a short
 * or NULL buffer, writes the required element count to `len` and returns
 * `CONFU_STATUS_BUFFER_TOO_SMALL`.
 *
 * # Safety
 * See the crate-level pointer rules.
 */
enum ConfuStatus confu_dataset_copy_block(const struct ConfuDataset *ds,
                                          uint32_t split,
                                          uint32_t modality,
                                          double *buf,
                                          size_t *len);

/**
 * Initializes and trains a model on the dataset's train split using the
 * `model` and `train` sections of `config_json`. Its `xor` section must
 * match the one the dataset was generated from.
 *
 * # Safety
 * See the crate-level pointer rules.
 */
enum ConfuStatus confu_model_train(const char *config_json,
                                   const struct ConfuDataset *ds,
                                   struct ConfuModel **out);

/**
 * Retrieval score of `model` on the dataset's test split. `spec_json` is one
 * retrieval spec, e.g. `{"target": 2, "queries": [1, 3]}`; NULL uses the
 * default X2-from-(X1, X3) accuracy over 500 pools of 32.
 *
 * # Safety
 * See the crate-level pointer rules.
 */
enum ConfuStatus confu_model_evaluate(const struct ConfuModel *model,
                                      const struct ConfuDataset *ds,
                                      const char *spec_json,
                                      double *out);

/**
 * Final training loss, or NaN for a model that was loaded rather than trained.
 *
 * # Safety
 * See the crate-level pointer rules.
 */
enum ConfuStatus confu_model_final_loss(const struct ConfuModel *model, double *out);

/**
 * # Safety
 * See the crate-level pointer rules.
 */
enum ConfuStatus confu_model_save(const struct ConfuModel *model, const char *path);

/**
 * # Safety
 * See the crate-level pointer rules.
 */
enum ConfuStatus confu_model_load(const char *path, struct ConfuModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from this library that is not used again.
 */
void confu_model_free(struct ConfuModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONFU_H */
