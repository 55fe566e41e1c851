#ifndef MRSIM_H
#define MRSIM_H

/* C interface to the mean-reflected SDE toolkit.
 *
 * Handles are opaque; every fallible call returns an mrsim_status and, on
 * failure, leaves a description in mrsim_last_error() (per thread). Strings
 * returned through char** outputs are owned by the caller and released with
 * mrsim_string_free. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define MRSIM_API __declspec(dllexport)
#else
#define MRSIM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mrsim_status {
    MRSIM_OK = 0,
    MRSIM_ERR_INVALID_ARGUMENT = 1,
    MRSIM_ERR_DIMENSION_MISMATCH = 2,
    MRSIM_ERR_STABILITY = 3,
    MRSIM_ERR_NUMERICAL = 4,
    MRSIM_ERR_ROOT_FIND = 5,
    MRSIM_ERR_REGRESSION = 6,
    MRSIM_ERR_CONFIG = 7,
    MRSIM_ERR_IO = 8,
    MRSIM_ERR_INTERNAL = 9
} mrsim_status;

typedef struct mrsim_config mrsim_config;
typedef struct mrsim_result mrsim_result;

MRSIM_API const char* mrsim_version(void);
MRSIM_API const char* mrsim_status_string(mrsim_status status);
/* Message of the last failure on the calling thread ("" when none). */
MRSIM_API const char* mrsim_last_error(void);
MRSIM_API void mrsim_string_free(char* s);

/* Thread count from MR_SIM_THREADS (1 when unset). */
MRSIM_API uint32_t mrsim_default_threads(void);

/* ---- run configurations (JSON, schema mrsim.config/1) */
MRSIM_API mrsim_status mrsim_config_parse(const char* json, mrsim_config** out);
MRSIM_API mrsim_status mrsim_config_load(const char* path, mrsim_config** out);
/* "dotted.key=value"; the value is read as JSON when possible, else as a string. */
MRSIM_API mrsim_status mrsim_config_set(mrsim_config* cfg, const char* assignment);
MRSIM_API mrsim_status mrsim_config_set_command(mrsim_config* cfg, const char* command);
MRSIM_API mrsim_status mrsim_config_set_seed(mrsim_config* cfg, uint64_t seed);
/* Checks every field; on failure the last error lists all offending fields. */
MRSIM_API mrsim_status mrsim_config_validate(const mrsim_config* cfg);
/* Configuration as JSON with defaults filled in when it validates. */
MRSIM_API mrsim_status mrsim_config_json(const mrsim_config* cfg, char** out);
MRSIM_API void mrsim_config_free(mrsim_config* cfg);

/* ---- experiments
 * Runs the configured command and writes summary.json plus its artifacts into
 * out_dir. threads = 0 falls back to MR_SIM_THREADS. When `out` is non-null it
 * receives a result handle even on failure (carrying the error record). */
MRSIM_API mrsim_status mrsim_run(const mrsim_config* cfg, const char* out_dir, uint32_t threads, mrsim_result** out);
MRSIM_API mrsim_status mrsim_result_status(const mrsim_result* res);
MRSIM_API mrsim_status mrsim_result_summary(const mrsim_result* res, char** out);
/* Numeric entry of the results block by dotted path, e.g. "K_T" or "X_T.mean.0". */
MRSIM_API mrsim_status mrsim_result_number(const mrsim_result* res, const char* path, double* out);
MRSIM_API void mrsim_result_free(mrsim_result* res);

/* ---- numerical kernels on row-major point clouds */
/* Exact W2 between two equal-size clouds of n_points x dim. */
MRSIM_API mrsim_status mrsim_wasserstein2(const double* a, const double* b, size_t n_points, size_t dim, double* out);
/* Empirical-measure rate eps_N in dimension d; p <= 0 selects the i.i.d. case. */
MRSIM_API mrsim_status mrsim_eps_n_reference(double n, size_t d, double p, double* out);

#ifdef __cplusplus
}
#endif

#endif /* MRSIM_H */
