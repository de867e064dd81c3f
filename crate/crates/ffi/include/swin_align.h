#ifndef SWIN_ALIGN_H
#define SWIN_ALIGN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SaStatus {
  SA_STATUS_OK = 0,
  SA_STATUS_NULL_POINTER = 1,
  SA_STATUS_INVALID_ARGUMENT = 2,
  SA_STATUS_IO = 3,
  SA_STATUS_FORMAT = 4,
  SA_STATUS_CONFIG = 5,
  SA_STATUS_DIMENSION = 6,
  SA_STATUS_CONTRACT = 7,
  SA_STATUS_RUNTIME = 8,
  SA_STATUS_PANIC = 9,
} SaStatus;

// Opaque handle to a loaded model and its parameters.
typedef struct SaModel SaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *sa_version(void);

// Message of the most recent failure on this thread, or an empty string.
// The pointer stays valid until the next failing call on this thread.
const char *sa_last_error_message(void);

// Loads the config and checkpoint of a run directory.
//
// # Safety
// `run_dir` must be a NUL-terminated UTF-8 path and `out` a writable
// pointer. On success `*out` owns a handle to release with
// [`sa_model_free`].
enum SaStatus sa_model_open(const char *run_dir, struct SaModel **out);

// # Safety
// `model` must be null or a handle from [`sa_model_open`] not yet freed.
void sa_model_free(struct SaModel *model);

// Expected image height, width and channel count. Each out pointer may be
// null.
//
// # Safety
// `model` must be a live handle; non-null out pointers must be writable.
enum SaStatus sa_model_input_shape(const struct SaModel *model,
                                   size_t *height,
                                   size_t *width,
                                   size_t *channels);

// Number of grades and values per image written by [`sa_model_predict`]:
// one probability per grade, or a single regression estimate.
//
// # Safety
// `model` must be a live handle; non-null out pointers must be writable.
enum SaStatus sa_model_output_shape(const struct SaModel *model,
                                    size_t *grades,
                                    size_t *output_width);

// Side length of the square activation map from [`sa_model_gradcam`].
//
// # Safety
// `model` must be a live handle and `side` writable.
enum SaStatus sa_model_map_side(const struct SaModel *model, size_t *side);

// Classifies `count` images. `outputs` receives `count · output_width`
// values and `grades`, when non-null, `count` decided grades.
//
// # Safety
// `images` must hold `count · H · W · C` doubles, `outputs` room for
// `outputs_len` doubles and a non-null `grades` room for `count` values.
enum SaStatus sa_model_predict(const struct SaModel *model,
                               const double *images,
                               size_t count,
                               double *outputs,
                               size_t outputs_len,
                               size_t *grades);

// Activation map for one image and grade, written row-major into `map`
// (`side · side` values, see [`sa_model_map_side`]).
//
// # Safety
// `image` must hold `H · W · C` doubles and `map` room for `map_len`.
enum SaStatus sa_model_gradcam(const struct SaModel *model,
                               const double *image,
                               size_t grade,
                               double *map,
                               size_t map_len);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SWIN_ALIGN_H */
