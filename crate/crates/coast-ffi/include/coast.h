#ifndef COAST_H
#define COAST_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every API entry point.
 */
typedef enum CoastStatus {
  COAST_STATUS_OK = 0,
  COAST_STATUS_NULL_ARGUMENT = 1,
  COAST_STATUS_INVALID_ARGUMENT = 2,
  COAST_STATUS_IO_ERROR = 3,
  COAST_STATUS_CORRUPT_DATA = 4,
  COAST_STATUS_INTERNAL_ERROR = 5,
} CoastStatus;

/**
 * Opaque trained-model handle.
 */
typedef struct CoastModel CoastModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message for the calling thread into `buf` (truncated
 * to `cap - 1` bytes, always NUL-terminated) and return the full message
 * length in bytes.
 */
size_t coast_last_error_message(char *buf, size_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *coast_version(void);

/**
 * Generate the benchmark datasets described by `config_json` (NULL for the
 * defaults) into `out_dir`.
 */
enum CoastStatus coast_generate_data(const char *config_json, const char *out_dir);

/**
 * Run the adversarial warm-up stage on a dataset directory and write the
 * resulting checkpoint.
 */
enum CoastStatus coast_run_warmup(const char *config_json,
                                  const char *data_dir,
                                  const char *out_checkpoint);

/**
 * Run the self-training stage from a warm-up checkpoint; checkpoints and the
 * metrics CSV land in `out_dir`.
 */
enum CoastStatus coast_run_selftrain(const char *config_json,
                                     const char *data_dir,
                                     const char *in_checkpoint,
                                     const char *out_dir);

/**
 * Load a checkpoint into an opaque model handle. `config_json` (NULL for
 * defaults) supplies the architecture section the checkpoint was trained
 * with. The handle must be released with `coast_model_free`.
 */
enum CoastStatus coast_model_load(const char *checkpoint_path,
                                  const char *config_json,
                                  struct CoastModel **out_model);

/**
 * Release a model handle. NULL is a no-op.
 */
void coast_model_free(struct CoastModel *model);

/**
 * Number of semantic classes the model predicts, or -1 on NULL.
 */
int32_t coast_model_num_classes(const struct CoastModel *model);

/**
 * Number of target domains the model was trained against, or -1 on NULL.
 */
int32_t coast_model_num_targets(const struct CoastModel *model);

/**
 * Segment one image. `image` holds `3*height*width` doubles in channel-major
 * order with values in [0,1]; `out_labels` receives `height*width` class
 * ids. `head` selects a domain-specific classifier by index, or the
 * domain-agnostic classifier when negative (the inference default, since the
 * domain of a test image is unknown).
 */
enum CoastStatus coast_model_predict(const struct CoastModel *model,
                                     const double *image,
                                     size_t height,
                                     size_t width,
                                     int32_t head,
                                     uint8_t *out_labels);

/**
 * Evaluate a model over a dataset directory and write the average mIoU
 * across that directory's labeled evaluation sets to `out_avg_miou`.
 * `unseen_only` restricts scoring to the held-out domain.
 */
enum CoastStatus coast_evaluate(const struct CoastModel *model,
                                const char *data_dir,
                                bool unseen_only,
                                double *out_avg_miou);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COAST_H */
