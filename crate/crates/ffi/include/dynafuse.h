/* C interface for the dynafuse engine. */

#ifndef DYNAFUSE_H
#define DYNAFUSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Error codes returned by every fallible function.
 */
#define DF_OK 0

#define DF_ERR_INVALID_ARGUMENT 1

#define DF_ERR_SHAPE_MISMATCH 2

#define DF_ERR_CONFIG 3

#define DF_ERR_DIVERGED 4

#define DF_ERR_IO 5

#define DF_ERR_SERDE 6

#define DF_ERR_NULL_POINTER 7

#define DF_ERR_UTF8 8

#define DF_ERR_PANIC 99

/**
 * Opaque trained-model handle.
 */
typedef struct DfModel DfModel;

/**
 * Opaque scene handle.
 */
typedef struct DfScene DfScene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Most recent error message for this thread; valid until the next call.
 */
const char *df_last_error_message(void);

/**
 * Generate a synthetic scene with the default desk-scale configuration.
 *
 * # Safety
 * `out` must be a valid pointer to a `*mut DfScene` slot.
 */
int32_t df_scene_generate(uint64_t seed, struct DfScene **out);

/**
 * Number of ground-truth boxes in a scene; -1 on a null handle.
 *
 * # Safety
 * `scene` must be null or a live handle from `df_scene_generate`.
 */
int64_t df_scene_box_count(const struct DfScene *scene);

/**
 * Serialize a scene to JSON; the returned string must be released with
 * `df_string_free`.
 *
 * # Safety
 * `scene` must be a live handle; `out` a valid slot.
 */
int32_t df_scene_to_json(const struct DfScene *scene, char **out);

/**
 * Release a scene handle. Null is a no-op.
 *
 * # Safety
 * `scene` must be null or a handle not yet freed.
 */
void df_scene_free(struct DfScene *scene);

/**
 * Train a model from a JSON training configuration (`"{}"` for the
 * defaults, or any subset of the `TrainConfig` fields).
 *
 * # Safety
 * `config_json` must be a valid C string; `out` a valid slot.
 */
int32_t df_train(const char *config_json, struct DfModel **out);

/**
 * Evaluate a model on its own validation scene set; writes toy mAP.
 *
 * # Safety
 * `model` must be a live handle; `out_map` a valid slot.
 */
int32_t df_model_eval(const struct DfModel *model, double *out_map);

/**
 * Serialize a model checkpoint to JSON; release with `df_string_free`.
 *
 * # Safety
 * `model` must be a live handle; `out` a valid slot.
 */
int32_t df_model_to_json(const struct DfModel *model, char **out);

/**
 * Rebuild a model handle from checkpoint JSON.
 *
 * # Safety
 * `json` must be a valid C string; `out` a valid slot.
 */
int32_t df_model_from_json(const char *json, struct DfModel **out);

/**
 * Release a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void df_model_free(struct DfModel *model);

/**
 * Release a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must be null or a string produced by a `*_to_json` call.
 */
void df_string_free(char *s);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* DYNAFUSE_H */
