#ifndef M2V_H
#define M2V_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum M2vStatus {
  M2V_STATUS_OK = 0,
  M2V_STATUS_NULL_POINTER = 1,
  M2V_STATUS_INVALID_ARGUMENT = 2,
  M2V_STATUS_DATA = 3,
  M2V_STATUS_NUMERICAL = 4,
  M2V_STATUS_BUFFER_TOO_SMALL = 5,
  M2V_STATUS_PANIC = 6,
} M2vStatus;

// Opaque encoder: a configuration plus one parameter table.
typedef struct M2vEncoder M2vEncoder;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer is
// valid until the next call on the same thread.
const char *m2v_last_error(void);

// Library version as a static NUL-terminated string.
const char *m2v_version(void);

// Loads the student (`use_teacher == 0`) or teacher parameters of an
// `M2V1` checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum M2vStatus m2v_encoder_load(const char *path, int32_t use_teacher, struct M2vEncoder **out);

// Randomly initialized desk-scale encoder.
//
// # Safety
// `out` must be a writable pointer.
enum M2vStatus m2v_encoder_init_desk(uint64_t seed, struct M2vEncoder **out);

// Releases an encoder; NULL is ignored.
//
// # Safety
// `enc` must come from one of the constructors and not be used afterwards.
void m2v_encoder_free(struct M2vEncoder *enc);

// Hidden width, transformer depth and target top-K of an encoder.
//
// # Safety
// `enc` must be a live handle; each out pointer may be NULL.
enum M2vStatus m2v_encoder_dims(const struct M2vEncoder *enc,
                                size_t *hidden,
                                size_t *layers,
                                size_t *top_k);

// Number of frames produced for `samples` input samples.
//
// # Safety
// `enc` must be a live handle and `frames` writable.
enum M2vStatus m2v_encoder_output_length(const struct M2vEncoder *enc,
                                         size_t samples,
                                         size_t *frames);

// Frame-level features of one tap (`0` conv output, `i` layer `i`,
// `0x100 + k` mean of the last `k` layers) for a raw waveform, which is
// normalized to zero mean and unit variance first. Writes `frames × hidden`
// row-major floats into `out`; when `capacity` is too small nothing is
// written, `needed` receives the required count and
// `M2V_STATUS_BUFFER_TOO_SMALL` is returned.
//
// # Safety
// `samples` must point to `n` floats, `out` to `capacity` writable floats,
// and `frames` / `needed` must be writable (either may be NULL).
enum M2vStatus m2v_encoder_features(const struct M2vEncoder *enc,
                                    const float *samples,
                                    size_t n,
                                    uint32_t tap_id,
                                    float *out,
                                    size_t capacity,
                                    size_t *frames,
                                    size_t *needed);

// Area under the ROC curve; `labels` are 0/1 bytes.
//
// # Safety
// `scores` and `labels` must point to `n` elements, `out` must be writable.
enum M2vStatus m2v_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

// Average precision; `labels` are 0/1 bytes.
//
// # Safety
// `scores` and `labels` must point to `n` elements, `out` must be writable.
enum M2vStatus m2v_average_precision(const double *scores,
                                     const uint8_t *labels,
                                     size_t n,
                                     double *out);

// Coefficient of determination.
//
// # Safety
// `y` and `y_hat` must point to `n` elements, `out` must be writable.
enum M2vStatus m2v_r2(const double *y, const double *y_hat, size_t n, double *out);

// Weighted key score of one estimate; classes are `tonic + 12·minor`.
//
// # Safety
// `out` must be writable.
enum M2vStatus m2v_key_weighted_score(uint32_t reference, uint32_t estimate, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* M2V_H */
