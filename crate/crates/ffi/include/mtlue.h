#ifndef MTLUE_H
#define MTLUE_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Status codes returned by every fallible call.
 */
typedef enum MtlueStatus {
  MTLUE_STATUS_OK = 0,
  MTLUE_STATUS_NULL_POINTER = 1,
  MTLUE_STATUS_INVALID_UTF8 = 2,
  /*
   Bad configuration or argument (validation, parse or JSON errors).
   */
  MTLUE_STATUS_INVALID_INPUT = 3,
  MTLUE_STATUS_IO = 4,
  /*
   The requested artifact already exists and would be overwritten.
   */
  MTLUE_STATUS_ALREADY_EXISTS = 5,
  MTLUE_STATUS_NOT_FOUND = 6,
  MTLUE_STATUS_RUNTIME = 7,
  MTLUE_STATUS_PANIC = 8,
} MtlueStatus;

/*
 Experiment configuration handle.
 */
typedef struct MtlueConfig MtlueConfig;

/*
 Experiment report handle.
 */
typedef struct MtlueReport MtlueReport;

/*
 Geometry of the class-wise patch grid.
 */
typedef struct MtluePatchGrid {
  size_t n;
  size_t patch_h;
  size_t patch_w;
} MtluePatchGrid;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *mtlue_version(void);

/*
 Message for the last failed call on this thread, or NULL. Valid until the next call.
 */
const char *mtlue_last_error(void);

/*
 Releases a string returned by this library. NULL is ignored.

 # Safety
 `s` must come from this library and not have been freed already.
 */
void mtlue_string_free(char *s);

/*
 Parses and validates a JSON experiment configuration.

 # Safety
 `json` must be a NUL-terminated string; `out` must be writable.
 */
enum MtlueStatus mtlue_config_from_json(const char *json, struct MtlueConfig **out);

/*
 Reads and validates a JSON experiment configuration file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MtlueStatus mtlue_config_from_file(const char *path, struct MtlueConfig **out);

/*
 Overrides the master seed.

 # Safety
 `cfg` must be a live config handle.
 */
enum MtlueStatus mtlue_config_set_seed(struct MtlueConfig *cfg, uint64_t seed);

/*
 Sets the directory artifacts are written to; NULL disables persistence.

 # Safety
 `cfg` must be a live config handle; `dir` must be NULL or a NUL-terminated string.
 */
enum MtlueStatus mtlue_config_set_output_dir(struct MtlueConfig *cfg, const char *dir);

/*
 Serializes the configuration to JSON.

 # Safety
 `cfg` must be a live config handle; `out` must be writable.
 */
enum MtlueStatus mtlue_config_to_json(const struct MtlueConfig *cfg, char **out);

/*
 Content hash of the configuration (hex SHA-256, output directory excluded).

 # Safety
 `cfg` must be a live config handle; `out` must be writable.
 */
enum MtlueStatus mtlue_config_hash(const struct MtlueConfig *cfg, char **out);

/*
 Releases a config handle. NULL is ignored.

 # Safety
 `cfg` must come from this library and not have been freed already.
 */
void mtlue_config_free(struct MtlueConfig *cfg);

/*
 Runs a full experiment: craft, poison, train victims and evaluate.

 # Safety
 `cfg` must be a live config handle; `out` must be writable.
 */
enum MtlueStatus mtlue_run_experiment(const struct MtlueConfig *cfg, struct MtlueReport **out);

/*
 Full report as JSON.

 # Safety
 `report` must be a live report handle; `out` must be writable.
 */
enum MtlueStatus mtlue_report_json(const struct MtlueReport *report, char **out);

/*
 Average test accuracy of a victim. With `baseline` nonzero the clean-baseline victim of the
 same id is used.

 # Safety
 `report` must be a live report handle; `victim` a NUL-terminated string; `out` writable.
 */
enum MtlueStatus mtlue_report_victim_accuracy(const struct MtlueReport *report,
                                              const char *victim,
                                              int32_t baseline,
                                              double *out);

/*
 Largest absolute perturbation value the attack produced.

 # Safety
 `report` must be a live report handle; `out` must be writable.
 */
enum MtlueStatus mtlue_report_max_abs_delta(const struct MtlueReport *report, double *out);

/*
 Releases a report handle. NULL is ignored.

 # Safety
 `report` must come from this library and not have been freed already.
 */
void mtlue_report_free(struct MtlueReport *report);

/*
 Patch grid used by class-wise patterns for `tasks` tasks on `h`×`w` images.

 # Safety
 `out` must be writable.
 */
enum MtlueStatus mtlue_patch_grid(size_t tasks, size_t h, size_t w, struct MtluePatchGrid *out);

/*
 Target class used by targeted attacks for label `y` of a `classes`-way task.

 # Safety
 `out` must be writable.
 */
enum MtlueStatus mtlue_target_label(size_t y, size_t classes, size_t *out);

/*
 Runs the gradient-check suite; reports how many checks ran and passed.

 # Safety
 `total` and `passed` must be writable.
 */
enum MtlueStatus mtlue_gradcheck(uint64_t seed, size_t *total, size_t *passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MTLUE_H */
