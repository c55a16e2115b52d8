/* C interface to the scorelab sampling laboratory. */

#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every C-ABI call.
typedef enum ScorelabStatus {
  SCORELAB_STATUS_OK = 0,
  SCORELAB_STATUS_NULL_ARGUMENT = 1,
  SCORELAB_STATUS_INVALID_UTF8 = 2,
  SCORELAB_STATUS_CONFIG_ERROR = 3,
  SCORELAB_STATUS_RUN_FAILURE = 4,
  SCORELAB_STATUS_BUFFER_TOO_SMALL = 5,
  SCORELAB_STATUS_PANIC = 6,
} ScorelabStatus;

// Opaque experiment configuration handle.
typedef struct ScorelabConfig ScorelabConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static nul-terminated string.
const char *scorelab_version(void);

// Copies the last error message of the calling thread into `buf`
// (truncating if needed) and returns the full length including the
// terminating nul. `buf` may be null to query the length.
size_t scorelab_last_error(char *buf, size_t cap);

// Parses a JSON experiment config into a new handle.
//
// # Safety
// `json` must be a valid nul-terminated string and `out` a valid
// pointer; the returned handle must be released with
// `scorelab_config_free`.
enum ScorelabStatus scorelab_config_parse_json(const char *json, struct ScorelabConfig **out);

// Loads a config from a file path.
//
// # Safety
// As for `scorelab_config_parse_json`.
enum ScorelabStatus scorelab_config_load(const char *path, struct ScorelabConfig **out);

// Releases a config handle. Null is ignored.
//
// # Safety
// `cfg` must have come from this library and not been freed before.
void scorelab_config_free(struct ScorelabConfig *cfg);

// Overrides the master seed.
//
// # Safety
// `cfg` must be a live handle.
enum ScorelabStatus scorelab_config_set_seed(struct ScorelabConfig *cfg, uint64_t seed);

// Runs the config's pipeline, writing the CSV and summary under
// `out_dir`. `exit_code` (optional) receives 0 when every assertion
// row passed and 1 otherwise.
//
// # Safety
// `cfg` must be a live handle and `out_dir` a valid string.
enum ScorelabStatus scorelab_run(const struct ScorelabConfig *cfg,
                                 const char *out_dir,
                                 int32_t *exit_code);

// Reports the sample matrix shape the config would produce (rows =
// paths, cols = state dimension).
//
// # Safety
// `cfg` must be a live handle; `rows`/`cols` must be valid pointers.
enum ScorelabStatus scorelab_sample_dims(const struct ScorelabConfig *cfg,
                                         size_t *rows,
                                         size_t *cols);

// Runs the reverse sampler and fills `buf` with the final states in
// row-major order. `len` is the capacity of `buf` in doubles; the
// written shape is returned through `rows`/`cols`.
//
// # Safety
// `cfg` must be a live handle and `buf` must point to at least `len`
// doubles.
enum ScorelabStatus scorelab_sample(const struct ScorelabConfig *cfg,
                                    double *buf,
                                    size_t len,
                                    size_t *rows,
                                    size_t *cols);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
