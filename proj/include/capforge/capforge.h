#ifndef CAPFORGE_CAPFORGE_H
#define CAPFORGE_CAPFORGE_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define CF_API __declspec(dllexport)
#else
#define CF_API __attribute__((visibility("default")))
#endif

/* Status codes double as process exit codes for the command-line tool. */
typedef enum cf_status {
  CF_OK = 0,
  CF_ERR_IO = 1,
  CF_ERR_CONFIG = 2,
  CF_ERR_DATA = 3, /* bad input, unparsable text, or violated data invariant */
  CF_ERR_TRAINING = 4,
  CF_ERR_METRIC = 5,
  CF_ERR_INTERNAL = 6
} cf_status;

/* Fluency flag bits. */
#define CF_FLAG_REPEATED_NGRAM 1u
#define CF_FLAG_INCOMPLETE_ENDING 2u
#define CF_FLAG_TOO_SHORT 4u
#define CF_FLAG_NO_CONTENT_WORD 8u

CF_API const char* cf_version(void);

/* Message of the last failed call on this thread; empty if none. */
CF_API const char* cf_last_error(void);

/* Frees strings returned through char** out-parameters. */
CF_API void cf_string_free(char* s);

/* ---- pipeline ---- */

typedef struct cf_pipeline cf_pipeline;
typedef void (*cf_log_fn)(const char* line, void* user);

/* config_path may be NULL for the built-in defaults. */
CF_API cf_status cf_pipeline_create(const char* config_path, cf_pipeline** out);
CF_API void cf_pipeline_free(cf_pipeline* p);

/* Dotted key, e.g. "train.lr". Validation happens at run time. */
CF_API cf_status cf_pipeline_set(cf_pipeline* p, const char* key, const char* value);
CF_API cf_status cf_pipeline_set_seed(cf_pipeline* p, uint64_t seed);
CF_API cf_status cf_pipeline_set_jobs(cf_pipeline* p, int jobs);
CF_API cf_status cf_pipeline_set_logger(cf_pipeline* p, cf_log_fn fn, void* user);

CF_API cf_status cf_pipeline_config_json(const cf_pipeline* p, char** out);
CF_API cf_status cf_pipeline_config_hash(const cf_pipeline* p, char** out);

/* stage: synth-data, rvq, train, generate, rerank, evaluate, report or all. */
CF_API cf_status cf_pipeline_run(cf_pipeline* p, const char* stage);

/* Comparison table over report files (n_inputs == 0: this run's reports).
 * Either output may be NULL. */
CF_API cf_status cf_pipeline_report(cf_pipeline* p, const char* const* inputs, size_t n_inputs,
                                    int allow_hash_mismatch, char** table_text, char** table_json);

/* ---- codec ---- */

typedef struct cf_codec cf_codec;

/* Fits a residual quantizer on one row-major n_frames x dim sequence.
 * n_q / codebook_size of 0 keep the preset's values. */
CF_API cf_status cf_codec_fit(const double* frames, size_t n_frames, size_t dim, const char* preset, int n_q,
                              int codebook_size, uint64_t seed, cf_codec** out);
CF_API cf_status cf_codec_load(const char* path, cf_codec** out);
CF_API cf_status cf_codec_save(const cf_codec* c, const char* path);
CF_API cf_status cf_codec_info(const cf_codec* c, int* n_q, int* codebook_size, int* dim);

/* codes is n_q x n_frames, level-major. */
CF_API cf_status cf_codec_encode(const cf_codec* c, const double* frames, size_t n_frames, int32_t* codes);
CF_API cf_status cf_codec_decode(const cf_codec* c, const int32_t* codes, size_t n_frames, double* frames);
CF_API void cf_codec_free(cf_codec* c);

/* ---- metrics ---- */

/* Input rows {item_id, candidate, references}. Writes the report to
 * output_path when non-NULL; report_json may be NULL. */
CF_API cf_status cf_evaluate_jsonl(const char* input_path, const char* output_path, char** report_json);

/* Fluency flags of a caption under the built-in event vocabulary. */
CF_API cf_status cf_fluency_flags(const char* caption, unsigned* flags);

#ifdef __cplusplus
}
#endif

#endif
