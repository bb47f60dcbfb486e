/* C API for the bits library: opaque handles, integer status codes, and
 * string reports. Status values double as CLI exit codes. All functions are
 * thread-compatible; the per-thread last-error buffer holds the message for
 * the most recent failing call on that thread. */

#ifndef BITS_CAPI_H
#define BITS_CAPI_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define BITS_API __declspec(dllexport)
#else
#define BITS_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum bits_status {
    BITS_OK = 0,
    BITS_ERR_FAIL = 1,    /* generic failure / verification failures */
    BITS_ERR_CONFIG = 2,  /* config parse error, unknown key, bad flag */
    BITS_ERR_DATA = 3,    /* dataset / file format problems */
    BITS_ERR_NUMERIC = 4, /* numerical divergence */
    BITS_ERR_INVALID = 5  /* precondition violation */
} bits_status;

BITS_API const char* bits_version(void);

/* Message and detail code of the last error on this thread. */
BITS_API const char* bits_last_error(void);
BITS_API int bits_last_error_detail(void);

/* Worker-thread cap for numeric kernels; <= 1 means single-threaded.
 * Results are bitwise identical for every value. */
BITS_API void bits_set_threads(int n);

/* Frees any string returned through a char** out-parameter. */
BITS_API void bits_string_free(char* s);

/* ------------------------------------------------------------------ */
/* configuration handles                                               */
/* ------------------------------------------------------------------ */

typedef struct bits_config bits_config;

BITS_API bits_status bits_config_create(bits_config** out);
BITS_API bits_status bits_config_load(const char* path, bits_config** out);
BITS_API bits_status bits_config_set(bits_config* cfg, const char* key, const char* value);
/* Returns the effective value of one key. */
BITS_API bits_status bits_config_get(const bits_config* cfg, const char* key, char** value_out);
/* Sorted `key = value` lines for every key. */
BITS_API bits_status bits_config_echo(const bits_config* cfg, char** text_out);
BITS_API void bits_config_free(bits_config* cfg);

/* ------------------------------------------------------------------ */
/* datasets                                                            */
/* ------------------------------------------------------------------ */

typedef struct bits_dataset bits_dataset;

BITS_API bits_status bits_dataset_open(const char* path, bits_dataset** out);
/* spec_kv: comma-separated "image_size=32,samples_per_combination=10";
 * NULL or "" keeps the defaults. */
BITS_API bits_status bits_dataset_synthetic(const char* spec_kv, uint64_t seed,
                                            bits_dataset** out);
BITS_API bits_status bits_dataset_save(const bits_dataset* ds, const char* path);
BITS_API bits_status bits_dataset_info(const bits_dataset* ds, uint32_t* n, uint32_t* h,
                                       uint32_t* w, uint32_t* c);
BITS_API void bits_dataset_free(bits_dataset* ds);

/* ------------------------------------------------------------------ */
/* commands                                                            */
/* ------------------------------------------------------------------ */

/* Runs training per the config (keys `dataset`, `out_dir`, `resume_from`).
 * Writes metrics.jsonl, checkpoints and config.echo under out_dir. */
BITS_API bits_status bits_train(const bits_config* cfg);

/* Continued self-supervised training from a checkpoint; honors the config
 * key `reset_at_start`. */
BITS_API bits_status bits_finetune(const bits_config* cfg, const char* checkpoint);

/* task: "knn" | "probe" | "retrieval". Options come from the config keys
 * (k, temp, split, eval_seed, metric, bits, branch, probe_epochs, probe_lr).
 * On success *json_out holds the JSON report. */
BITS_API bits_status bits_eval(const char* checkpoint, const char* dataset, const char* task,
                               const bits_config* options, char** json_out);

/* what: "spectrum" | "entropy" | "bits" | "mi". Writes reports (JSON/CSV and
 * exported codes) under out_dir and returns the primary JSON report. */
BITS_API bits_status bits_analyze(const char* checkpoint, const char* dataset, const char* what,
                                  const bits_config* options, const char* out_dir,
                                  char** json_out);

/* Runs the oracle/gradient verification suite. *report_out receives the
 * pass/fail table; returns BITS_OK iff every check passed. inject_fault is
 * a test hook (see the library docs); pass NULL normally. */
BITS_API bits_status bits_verify(const char* inject_fault, char** report_out);

#ifdef __cplusplus
}
#endif

#endif /* BITS_CAPI_H */
