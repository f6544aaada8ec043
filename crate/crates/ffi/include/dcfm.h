#ifndef DCFM_H
#define DCFM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Keyframe policy for [`DcfmSchedule`].
 */
typedef enum DcfmPolicy {
  DcfmPolicy_Fixed = 0,
  DcfmPolicy_Adaptive = 1,
} DcfmPolicy;

/**
 * How a non-key frame between two keyframes is predicted.
 */
typedef enum DcfmMode {
  /**
   * Previous keyframe only.
   */
  DcfmMode_P = 0,
  /**
   * Average of the previous and next keyframe predictions.
   */
  DcfmMode_B = 1,
} DcfmMode;

/**
 * Result codes. Zero is success.
 */
typedef enum DcfmStatus {
  DcfmStatus_Ok = 0,
  DcfmStatus_NullPointer = 1,
  DcfmStatus_InvalidArgument = 2,
  DcfmStatus_Io = 3,
  DcfmStatus_Numeric = 4,
  DcfmStatus_Panic = 5,
} DcfmStatus;

/**
 * Opaque confusion matrix.
 */
typedef struct DcfmConfusion DcfmConfusion;

/**
 * Opaque trained model.
 */
typedef struct DcfmModel DcfmModel;

/**
 * Keyframe schedule. `k` is used by the fixed policy, `min_k` and
 * `threshold` by the adaptive one.
 */
typedef struct DcfmSchedule {
  enum DcfmPolicy policy;
  uint32_t k;
  uint32_t min_k;
  double threshold;
  uint32_t first_key;
  enum DcfmMode mode;
} DcfmSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *dcfm_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dcfm_version(void);

/**
 * Default schedule: fixed policy, K = 2, mode B.
 */
struct DcfmSchedule dcfm_schedule_default(void);

/**
 * Loads a model file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum DcfmStatus dcfm_model_load(const char *path, struct DcfmModel **out);

/**
 * Releases a model. Null is accepted.
 *
 * # Safety
 * `model` must come from [`dcfm_model_load`] and not be used afterwards.
 */
void dcfm_model_free(struct DcfmModel *model);

/**
 * Number of output classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t dcfm_model_num_classes(const struct DcfmModel *model);

/**
 * Segments a clip of `num_frames` interleaved 8-bit RGB frames stored back
 * to back in `rgb` (`num_frames * height * width * 3` bytes). Writes one
 * class index per pixel to `labels_out` (`num_frames * height * width`
 * bytes) and, if `is_key_out` is not null, 1 or 0 per frame marking
 * keyframes.
 *
 * # Safety
 * All non-null pointers must reference buffers of the sizes above.
 */
enum DcfmStatus dcfm_run_video(const struct DcfmModel *model,
                               const uint8_t *rgb,
                               size_t num_frames,
                               size_t height,
                               size_t width,
                               const struct DcfmSchedule *schedule,
                               uint8_t *labels_out,
                               uint8_t *is_key_out);

/**
 * Mean absolute difference between two interleaved RGB frames, the score
 * the adaptive policy compares against its threshold.
 *
 * # Safety
 * `a` and `b` must each hold `height * width * 3` bytes; `out` must be writable.
 */
enum DcfmStatus dcfm_frame_score(const uint8_t *a,
                                 const uint8_t *b,
                                 size_t height,
                                 size_t width,
                                 double *out);

/**
 * New empty confusion matrix, or null unless `num_classes` is in 1..=255.
 */
struct DcfmConfusion *dcfm_confusion_new(uint32_t num_classes);

/**
 * Releases a confusion matrix. Null is accepted.
 *
 * # Safety
 * `cm` must come from [`dcfm_confusion_new`] and not be used afterwards.
 */
void dcfm_confusion_free(struct DcfmConfusion *cm);

/**
 * Adds one `height x width` prediction/ground-truth pair. Ground-truth
 * value 255 is ignored.
 *
 * # Safety
 * `pred` and `gt` must each hold `height * width` bytes.
 */
enum DcfmStatus dcfm_confusion_accumulate(struct DcfmConfusion *cm,
                                          const uint8_t *pred,
                                          const uint8_t *gt,
                                          size_t height,
                                          size_t width);

/**
 * Mean IoU over classes present in the accumulated ground truth.
 *
 * # Safety
 * `cm` must be a live handle and `out` writable.
 */
enum DcfmStatus dcfm_confusion_miou(const struct DcfmConfusion *cm, double *out);

/**
 * Frequency-weighted IoU.
 *
 * # Safety
 * `cm` must be a live handle and `out` writable.
 */
enum DcfmStatus dcfm_confusion_wiou(const struct DcfmConfusion *cm, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DCFM_H */
