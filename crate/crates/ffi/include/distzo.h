#ifndef DISTZO_H
#define DISTZO_H

/* Generated by cbindgen from crates/ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Values 2, 3 and 4 match the CLI exit codes.
typedef enum DzStatus {
  DZ_STATUS_OK = 0,
  DZ_STATUS_INTERNAL = 1,
  DZ_STATUS_CONFIG = 2,
  DZ_STATUS_NUMERIC = 3,
  DZ_STATUS_FABRIC = 4,
  DZ_STATUS_DIMENSION = 5,
  DZ_STATUS_PROTOCOL = 6,
  DZ_STATUS_OUT_OF_MEMORY = 7,
  DZ_STATUS_IO = 8,
  DZ_STATUS_CONSISTENCY = 9,
  DZ_STATUS_SIMULATION = 10,
  DZ_STATUS_LAYOUT = 11,
  DZ_STATUS_NULL_POINTER = 12,
  DZ_STATUS_UTF8 = 13,
  DZ_STATUS_SCHEDULE = 14,
} DzStatus;

// Opaque model handle.
typedef struct DzModel DzModel;

// One training iteration as seen through the C ABI.
typedef struct DzStep {
  uint64_t iter;
  uint64_t seed;
  double loss_pos;
  double loss_neg;
  double g;
} DzStep;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message on this thread, or null. Valid until the next failing
// call on the same thread; do not free.
const char *dz_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *dz_version(void);

// Build a model from a JSON `ModelConfig` and an init seed.
//
// # Safety
// `config_json` must be a NUL-terminated string; `out` must be writable.
enum DzStatus dz_model_new(const char *config_json, uint64_t init_seed, struct DzModel **out);

// Release a model. Null is ignored.
//
// # Safety
// `model` must come from this library and not be freed twice.
void dz_model_free(struct DzModel *model);

// # Safety
// `model` must be a live handle; `out` must be writable.
enum DzStatus dz_model_param_count(const struct DzModel *model, size_t *out);

// Order-sensitive hash of every parameter's bits.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum DzStatus dz_model_checksum(const struct DzModel *model, uint64_t *out);

// Loss on a synthetic batch of `batch_size` rows.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum DzStatus dz_model_loss(const struct DzModel *model,
                            size_t batch_size,
                            uint64_t data_seed,
                            double *out);

// One in-place MeZO iteration on a synthetic batch.
//
// # Safety
// `model` must be a live handle not used concurrently; `out` must be
// writable.
enum DzStatus dz_mezo_step(struct DzModel *model,
                           double epsilon,
                           double lr,
                           size_t batch_size,
                           uint64_t data_seed,
                           uint64_t seed,
                           uint64_t iter,
                           struct DzStep *out);

// Central-difference projected gradient from two losses.
//
// # Safety
// `out` must be writable.
enum DzStatus dz_zo_grad(double loss_pos, double loss_neg, double epsilon, double *out);

// # Safety
// `model` must be a live handle; `path` a NUL-terminated string.
enum DzStatus dz_model_save(const struct DzModel *model, const char *path);

// Load a checkpoint of either precision.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum DzStatus dz_model_load(const char *path, struct DzModel **out);

// Simulated makespan of the sliced upload of `params` parameters across
// `devices` devices with a shared host link.
//
// # Safety
// `out` must be writable.
enum DzStatus dz_comm_sliced_upload_makespan(double host_bw,
                                             double peer_bw,
                                             double latency,
                                             size_t devices,
                                             size_t params,
                                             double *out);

// Run a JSON run config and return the report as a JSON string, to be
// released with [`dz_string_free`]. Nothing is written to disk.
//
// # Safety
// `config_json` must be a NUL-terminated string; `out` must be writable.
enum DzStatus dz_run_config(const char *config_json, char **out);

// Release a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void dz_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DISTZO_H */
