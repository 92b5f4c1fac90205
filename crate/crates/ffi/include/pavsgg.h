#ifndef PAVSGG_H
#define PAVSGG_H

#include <stdint.h>
#include <stddef.h>

// Result code of every exported function.
typedef enum PavsggStatus {
  PAVSGG_STATUS_OK = 0,
  PAVSGG_STATUS_NULL_POINTER = 1,
  PAVSGG_STATUS_INVALID_ARGUMENT = 2,
  PAVSGG_STATUS_DATA = 3,
  PAVSGG_STATUS_IO = 4,
  PAVSGG_STATUS_PANIC = 5,
} PavsggStatus;

// Opaque attention map.
typedef struct PavsggAttention PavsggAttention;

// Opaque video clip.
typedef struct PavsggClip PavsggClip;

// Opaque trained model.
typedef struct PavsggModel PavsggModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer
// stays valid until the next call into this library on the same thread.
const char *pavsgg_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *pavsgg_version(void);

// Releases a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void pavsgg_string_free(char *s);

// Intersection over union of two `[x1, y1, x2, y2]` boxes.
//
// # Safety
// `a` and `b` must point to four doubles; `out` must be writable.
enum PavsggStatus pavsgg_iou(const double *a, const double *b, double *out);

// Product score `conf_s * conf_o * pc * pa`; `pa` is ignored when
// `pa_enabled` is zero.
//
// # Safety
// `out` must be writable.
enum PavsggStatus pavsgg_composite_score(double conf_s,
                                         double conf_o,
                                         double pc,
                                         double pa,
                                         int32_t pa_enabled,
                                         double *out);

// Copies `height * width` row-major values into a new attention map.
//
// # Safety
// `values` must point to `len` doubles; `out` must be writable.
enum PavsggStatus pavsgg_attention_new(size_t height,
                                       size_t width,
                                       const double *values,
                                       size_t len,
                                       struct PavsggAttention **out);

// # Safety
// `map` must come from [`pavsgg_attention_new`] and not be freed twice.
void pavsgg_attention_free(struct PavsggAttention *map);

// Reliability `r` of an attention map.
//
// # Safety
// `map` must be a live handle; `out` must be writable.
enum PavsggStatus pavsgg_reliability(const struct PavsggAttention *map, double *out);

// Grounding score of a `[x1, y1, x2, y2]` box under an attention map.
// Boxes are in image pixels; the map covers the whole image whatever its
// grid size.
//
// # Safety
// `map` must be a live handle, `bbox` must point to four doubles and
// `out` must be writable.
enum PavsggStatus pavsgg_grounding_score(const struct PavsggAttention *map,
                                         const double *bbox,
                                         double *out);

// Generates one synthetic clip. `config_json` may be NULL for defaults.
//
// # Safety
// `config_json` must be NULL or a NUL-terminated string; `out` must be
// writable.
enum PavsggStatus pavsgg_clip_generate(const char *config_json,
                                       uint64_t clip_seed,
                                       struct PavsggClip **out);

// Parses a clip document.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum PavsggStatus pavsgg_clip_from_json(const char *json, struct PavsggClip **out);

// Serializes a clip; release the result with [`pavsgg_string_free`].
//
// # Safety
// `clip` must be a live handle; `out` must be writable.
enum PavsggStatus pavsgg_clip_to_json(const struct PavsggClip *clip, char **out);

// Number of frames in a clip.
//
// # Safety
// `clip` must be a live handle; `out` must be writable.
enum PavsggStatus pavsgg_clip_frame_count(const struct PavsggClip *clip, size_t *out);

// # Safety
// `clip` must come from this library and not be freed twice.
void pavsgg_clip_free(struct PavsggClip *clip);

// Loads a checkpoint directory written by `pavsgg train`.
//
// # Safety
// `dir` must be a NUL-terminated path; `out` must be writable.
enum PavsggStatus pavsgg_model_load(const char *dir, struct PavsggModel **out);

// # Safety
// `model` must come from [`pavsgg_model_load`] and not be freed twice.
void pavsgg_model_free(struct PavsggModel *model);

// Ranked triplets of frame `t` as a JSON array of
// `{subject, object, predicate, score}`. `with_constraint` selects the
// protocol; `pa_enabled` and `pam` toggle affinity scoring and gating.
//
// # Safety
// `model` and `clip` must be live handles; `out` must be writable.
enum PavsggStatus pavsgg_model_rank(const struct PavsggModel *model,
                                    const struct PavsggClip *clip,
                                    size_t t,
                                    int32_t with_constraint,
                                    int32_t pa_enabled,
                                    int32_t pam,
                                    char **out);

// Evaluates a model on a split directory and returns the report JSON.
// `config_json` may be NULL for defaults.
//
// # Safety
// `model` must be a live handle, `split_dir` a NUL-terminated path,
// `config_json` NULL or NUL-terminated, and `out` writable.
enum PavsggStatus pavsgg_model_evaluate(const struct PavsggModel *model,
                                        const char *split_dir,
                                        const char *config_json,
                                        char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PAVSGG_H */
