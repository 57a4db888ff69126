#ifndef HSSEG_H
#define HSSEG_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result codes. Values 1-3 match the command-line exit codes.
 */
typedef enum HssegStatus {
  HSSEG_STATUS_OK = 0,
  HSSEG_STATUS_INVALID_ARGUMENT = 1,
  HSSEG_STATUS_DATA_ERROR = 2,
  HSSEG_STATUS_NUMERIC_ERROR = 3,
  HSSEG_STATUS_NULL_POINTER = 4,
  HSSEG_STATUS_PANIC = 5,
} HssegStatus;

/**
 * Trained network plus its configuration.
 */
typedef struct HssegModel HssegModel;

/**
 * Dense CRF settings; `method` is 0 = auto, 1 = naive, 2 = lattice.
 */
typedef struct HssegCrfParams {
  double w_appearance;
  double w_smoothness;
  double sigma_alpha;
  double sigma_beta;
  double sigma_gamma;
  size_t iterations;
  uint32_t method;
} HssegCrfParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *hsseg_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hsseg_version(void);

/**
 * Writes a synthetic dataset of `n` images to `out_dir`.
 *
 * # Safety
 * `out_dir` must be a valid NUL-terminated string.
 */
enum HssegStatus hsseg_generate_dataset(const char *out_dir,
                                        size_t n,
                                        uint64_t seed,
                                        size_t num_classes,
                                        size_t size);

/**
 * Trains on the dataset in `data_dir` with the config text `config`
 * (may be NULL for defaults). Artifacts go to `out_dir` when it is not NULL.
 *
 * # Safety
 * String arguments must be NULL or valid NUL-terminated strings; `out_model`
 * must be a valid pointer. The returned model is released with [`hsseg_model_free`].
 */
enum HssegStatus hsseg_train(const char *data_dir,
                             const char *config,
                             const char *out_dir,
                             struct HssegModel **out_model);

/**
 * Loads a checkpoint written by training.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out_model` a valid pointer.
 */
enum HssegStatus hsseg_model_load(const char *path, struct HssegModel **out_model);

/**
 * # Safety
 * `model` and `path` must be valid.
 */
enum HssegStatus hsseg_model_save(const struct HssegModel *model, const char *path);

/**
 * Releases a model; NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void hsseg_model_free(struct HssegModel *model);

/**
 * Side length of the square images the model accepts, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or valid.
 */
size_t hsseg_model_input_size(const struct HssegModel *model);

/**
 * Number of foreground classes, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or valid.
 */
size_t hsseg_model_num_classes(const struct HssegModel *model);

/**
 * Segments an interleaved 8-bit RGB image of `width * height` pixels into
 * `labels` (`width * height` bytes, 0 = background). `class_scores`, when
 * not NULL, receives one sigmoid score per foreground class.
 *
 * # Safety
 * Buffers must be valid for the stated lengths.
 */
enum HssegStatus hsseg_infer(const struct HssegModel *model,
                             const uint8_t *rgb,
                             size_t width,
                             size_t height,
                             bool apply_filter,
                             bool apply_crf,
                             uint8_t *labels,
                             size_t labels_len,
                             double *class_scores,
                             size_t class_scores_len);

/**
 * Evaluates on a split (`"train"`, `"val"` or `"all"`) of the dataset in `data_dir`.
 *
 * # Safety
 * Strings must be valid; `miou` and `pca` must be valid pointers.
 */
enum HssegStatus hsseg_evaluate(const struct HssegModel *model,
                                const char *data_dir,
                                const char *split,
                                bool apply_filter,
                                bool apply_crf,
                                double *miou,
                                double *pca);

/**
 * Default CRF settings.
 */
struct HssegCrfParams hsseg_crf_default_params(void);

/**
 * Mean-field inference. `probs` is `labels * height * width` values
 * (label-major) forming a distribution per pixel; `rgb` is interleaved 8-bit
 * color. The marginals are written to `q_out` in the same layout.
 *
 * # Safety
 * Buffers must be valid for the stated sizes.
 */
enum HssegStatus hsseg_crf_mean_field(const double *probs,
                                      size_t labels,
                                      size_t height,
                                      size_t width,
                                      const uint8_t *rgb,
                                      const struct HssegCrfParams *params,
                                      double *q_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HSSEG_H */
