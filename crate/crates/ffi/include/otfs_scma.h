#ifndef OTFS_SCMA_H
#define OTFS_SCMA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum OtfsStatus {
  OTFS_STATUS_OK = 0,
  OTFS_STATUS_NULL_POINTER = 1,
  OTFS_STATUS_INVALID_ARGUMENT = 2,
  OTFS_STATUS_INVALID_CONFIG = 3,
  OTFS_STATUS_INVALID_CODEBOOK = 4,
  OTFS_STATUS_DIMENSION = 5,
  OTFS_STATUS_COMPLEXITY_CAP = 6,
  OTFS_STATUS_NUMERICAL = 7,
  OTFS_STATUS_IO = 8,
  OTFS_STATUS_PANIC = 9,
} OtfsStatus;

// Codebook set.
typedef struct OtfsCodebook OtfsCodebook;

// Simulation configuration.
typedef struct OtfsConfig OtfsConfig;

// BER curve produced by [`otfs_run`].
typedef struct OtfsResult OtfsResult;

// One simulated `(P, SNR)` point.
typedef struct OtfsBerPoint {
  uint32_t paths;
  double snr_db;
  uint64_t frames;
  uint64_t bit_errors;
  uint64_t total_bits;
  double ber;
  double mean_iterations;
} OtfsBerPoint;

// Shape of a codebook set.
typedef struct OtfsCodebookInfo {
  uint32_t users;
  uint32_t resources;
  uint32_t alphabet;
  uint32_t dv;
  uint32_t df;
  double overloading;
} OtfsCodebookInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *otfs_version(void);

// Message of the last failing call on this thread, or NULL if none.
// The pointer stays valid until the next failing call on the same thread.
const char *otfs_last_error(void);

// Releases a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void otfs_string_free(char *s);

// Default configuration (8x8 downlink OTFS-SCMA).
//
// # Safety
// `out` must be a valid pointer to writable storage for a handle.
enum OtfsStatus otfs_config_new(struct OtfsConfig **out);

// Parses and validates a JSON configuration.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum OtfsStatus otfs_config_from_json(const char *json, struct OtfsConfig **out);

// Serializes a configuration to JSON; free the result with [`otfs_string_free`].
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum OtfsStatus otfs_config_to_json(const struct OtfsConfig *cfg, char **out);

// Sets the number of frames per SNR point.
//
// # Safety
// `cfg` must be a live handle.
enum OtfsStatus otfs_config_set_frames(struct OtfsConfig *cfg, uint64_t frames);

// Sets the run seed.
//
// # Safety
// `cfg` must be a live handle.
enum OtfsStatus otfs_config_set_seed(struct OtfsConfig *cfg, uint64_t seed);

// Replaces the SNR grid with `len` values in dB.
//
// # Safety
// `cfg` must be a live handle; `snr_db` must point to `len` doubles.
enum OtfsStatus otfs_config_set_snr(struct OtfsConfig *cfg, const double *snr_db, uintptr_t len);

// Releases a configuration. NULL is ignored.
//
// # Safety
// `cfg` must come from this library and not have been freed.
void otfs_config_free(struct OtfsConfig *cfg);

// Runs the Monte Carlo simulation described by `cfg`.
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum OtfsStatus otfs_run(const struct OtfsConfig *cfg, struct OtfsResult **out);

// Number of points in a result.
//
// # Safety
// `result` must be a live handle or NULL (which yields 0).
uintptr_t otfs_result_len(const struct OtfsResult *result);

// Copies point `index` of a result into `out`.
//
// # Safety
// `result` must be a live handle; `out` must be writable.
enum OtfsStatus otfs_result_point(const struct OtfsResult *result,
                                  uintptr_t index,
                                  struct OtfsBerPoint *out);

// Renders a result as CSV; free the string with [`otfs_string_free`].
//
// # Safety
// `result` must be a live handle; `out` must be writable.
enum OtfsStatus otfs_result_csv(const struct OtfsResult *result, char **out);

// Releases a result. NULL is ignored.
//
// # Safety
// `result` must come from this library and not have been freed.
void otfs_result_free(struct OtfsResult *result);

// The built-in six-user, four-resource codebook set.
//
// # Safety
// `out` must be writable.
enum OtfsStatus otfs_codebook_default(struct OtfsCodebook **out);

// Loads and validates a codebook JSON file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum OtfsStatus otfs_codebook_load(const char *path, struct OtfsCodebook **out);

// Dimensions of a codebook set.
//
// # Safety
// `cb` must be a live handle; `out` must be writable.
enum OtfsStatus otfs_codebook_info(const struct OtfsCodebook *cb, struct OtfsCodebookInfo *out);

// Noise variance matching an `E_b/N_0` in dB for this codebook.
//
// # Safety
// `cb` must be a live handle; `out` must be writable.
enum OtfsStatus otfs_noise_from_snr(const struct OtfsCodebook *cb, double snr_db, double *out);

// Releases a codebook. NULL is ignored.
//
// # Safety
// `cb` must come from this library and not have been freed.
void otfs_codebook_free(struct OtfsCodebook *cb);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OTFS_SCMA_H */
