/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef SCENE_REID_H
#define SCENE_REID_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Which half of a dataset to address.
 */
typedef enum SrSplit {
  SR_SPLIT_TRAIN = 0,
  SR_SPLIT_TEST = 1,
} SrSplit;

/**
 * Result code of every call.
 */
typedef enum SrStatus {
  SR_STATUS_OK = 0,
  SR_STATUS_NULL_POINTER = 1,
  SR_STATUS_INVALID_ARGUMENT = 2,
  SR_STATUS_CONFIG = 3,
  SR_STATUS_DATASET = 4,
  SR_STATUS_CHECKPOINT = 5,
  SR_STATUS_PROTOCOL = 6,
  SR_STATUS_NUMERICAL = 7,
  SR_STATUS_SHAPE = 8,
  SR_STATUS_IO = 9,
  /**
   * A Rust panic was caught at the boundary.
   */
  SR_STATUS_INTERNAL = 10,
} SrStatus;

/**
 * Parsed configuration.
 */
typedef struct SrConfig SrConfig;

/**
 * Synthetic scenes plus the settings and seed that produced them.
 */
typedef struct SrDataset SrDataset;

/**
 * Model parameters with optimizer and matching state.
 */
typedef struct SrTrainer SrTrainer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *sr_last_error_message(void);

/**
 * Clears the stored error message.
 */
void sr_clear_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sr_version(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library or be null.
 */
void sr_string_free(char *s);

/**
 * Small built-in profile that trains in seconds.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum SrStatus sr_config_desk(struct SrConfig **out);

/**
 * Parses and validates a TOML config.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SrStatus sr_config_from_toml(const char *toml, struct SrConfig **out);

/**
 * Serializes a config to TOML; free the result with [`sr_string_free`].
 *
 * # Safety
 * `cfg` must be a live handle and `out` a valid pointer.
 */
enum SrStatus sr_config_to_toml(const struct SrConfig *cfg, char **out);

/**
 * Number of dimensions of the final representation.
 *
 * # Safety
 * `cfg` must be a live handle and `out` a valid pointer.
 */
enum SrStatus sr_config_embedding_dim(const struct SrConfig *cfg, size_t *out);

/**
 * # Safety
 * `cfg` must come from this library or be null.
 */
void sr_config_free(struct SrConfig *cfg);

/**
 * Renders the synthetic dataset described by the config's data section.
 *
 * # Safety
 * `cfg` must be a live handle and `out` a valid pointer.
 */
enum SrStatus sr_dataset_generate(const struct SrConfig *cfg,
                                  uint64_t seed,
                                  struct SrDataset **out);

/**
 * Loads a dataset directory written by [`sr_dataset_save`] or the CLI.
 *
 * # Safety
 * `dir` must be a NUL-terminated path and `out` a valid pointer.
 */
enum SrStatus sr_dataset_load(const char *dir, struct SrDataset **out);

/**
 * # Safety
 * `ds` must be a live handle and `dir` a NUL-terminated path.
 */
enum SrStatus sr_dataset_save(const struct SrDataset *ds, const char *dir);

/**
 * Scene and person-box counts of one split.
 *
 * # Safety
 * `ds` must be a live handle; the outputs must be valid pointers.
 */
enum SrStatus sr_dataset_counts(const struct SrDataset *ds,
                                enum SrSplit split,
                                size_t *scenes,
                                size_t *persons);

/**
 * # Safety
 * `ds` must come from this library or be null.
 */
void sr_dataset_free(struct SrDataset *ds);

/**
 * Fresh model and training state for a dataset.
 *
 * # Safety
 * `cfg` and `ds` must be live handles and `out` a valid pointer.
 */
enum SrStatus sr_trainer_new(const struct SrConfig *cfg,
                             const struct SrDataset *ds,
                             uint64_t seed,
                             struct SrTrainer **out);

/**
 * Trains one epoch and reports its mean loss.
 *
 * # Safety
 * `t` and `ds` must be live handles; `loss` may be null.
 */
enum SrStatus sr_trainer_run_epoch(struct SrTrainer *t, const struct SrDataset *ds, double *loss);

/**
 * Epochs completed so far.
 *
 * # Safety
 * `t` must be a live handle and `out` a valid pointer.
 */
enum SrStatus sr_trainer_epoch(const struct SrTrainer *t, size_t *out);

/**
 * Standard-protocol mAP and top-1 on the test split.
 *
 * # Safety
 * `t` and `ds` must be live handles; the outputs must be valid pointers.
 */
enum SrStatus sr_trainer_evaluate(const struct SrTrainer *t,
                                  const struct SrDataset *ds,
                                  double *map,
                                  double *top1);

/**
 * Writes the final representations of the persons in one test scene, row
 * major, into `buf`. `rows` receives the person count even when `cap` is too
 * small, in which case the call fails with `SR_STATUS_INVALID_ARGUMENT`.
 *
 * # Safety
 * `t` and `ds` must be live handles, `buf` must hold `cap` doubles, and
 * `rows` must be a valid pointer.
 */
enum SrStatus sr_trainer_embed_test_scene(const struct SrTrainer *t,
                                          const struct SrDataset *ds,
                                          size_t scene,
                                          double *buf,
                                          size_t cap,
                                          size_t *rows);

/**
 * # Safety
 * `t` must be a live handle and `path` a NUL-terminated path.
 */
enum SrStatus sr_trainer_save(const struct SrTrainer *t, const char *path);

/**
 * Loads a checkpoint. When `expected` is not null the stored config must equal it.
 *
 * # Safety
 * `path` must be a NUL-terminated path, `expected` a live handle or null, and
 * `out` a valid pointer.
 */
enum SrStatus sr_trainer_load(const char *path,
                              const struct SrConfig *expected,
                              struct SrTrainer **out);

/**
 * # Safety
 * `t` must come from this library or be null.
 */
void sr_trainer_free(struct SrTrainer *t);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCENE_REID_H */
