#ifndef QMOE_QMOE_H
#define QMOE_QMOE_H

/*
 * C interface to the qmoe library: dictionary generation and I/O, ternary
 * matrix encode/decode, fused decompress + matrix-vector product, rate
 * accounting and end-to-end layer compression runs.
 *
 * All objects are opaque handles owned by the caller and released with the
 * matching *_free function. Every fallible call returns a qmoe_status; on
 * failure qmoe_last_error() describes the problem (per thread).
 */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(QMOE_BUILDING_LIBRARY)
#    define QMOE_API __declspec(dllexport)
#  else
#    define QMOE_API __declspec(dllimport)
#  endif
#else
#  define QMOE_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum qmoe_status {
  QMOE_OK = 0,
  QMOE_ERR_INVALID_ARGUMENT = 1,
  QMOE_ERR_CORRUPT_DATA = 2,
  QMOE_ERR_DICTIONARY_MISMATCH = 3,
  QMOE_ERR_IO = 4,
  QMOE_ERR_NUMERICAL = 5,
  QMOE_ERR_INTERNAL = 6
} qmoe_status;

typedef enum qmoe_grid_mode { QMOE_TERNARY = 0, QMOE_TWO_BIT = 1 } qmoe_grid_mode;

typedef struct qmoe_dict qmoe_dict;
typedef struct qmoe_matrix qmoe_matrix;         /* quantized codes + per-row min/max */
typedef struct qmoe_compressed qmoe_compressed; /* encoded matrix */
typedef struct qmoe_checkpoint qmoe_checkpoint; /* sequence of encoded matrices */
typedef struct qmoe_config qmoe_config;
typedef struct qmoe_run qmoe_run;

typedef struct qmoe_rate_report {
  uint64_t parameters;
  uint64_t payload_bits;
  uint64_t metadata_bits;
  uint64_t original_bits;
  double rate;
  double bits_per_parameter;
} qmoe_rate_report;

QMOE_API const char* qmoe_last_error(void);
QMOE_API const char* qmoe_version(void);

/* Dictionary */
QMOE_API qmoe_status qmoe_dict_generate(double p0, qmoe_dict** out);
QMOE_API qmoe_status qmoe_dict_load(const char* path, qmoe_dict** out);
QMOE_API qmoe_status qmoe_dict_save(const qmoe_dict* dict, const char* path);
QMOE_API uint64_t qmoe_dict_hash(const qmoe_dict* dict);
QMOE_API double qmoe_dict_p0(const qmoe_dict* dict);
/* Two 32-bit decode words for `codeword`. */
QMOE_API void qmoe_dict_decode_words(const qmoe_dict* dict, uint16_t codeword, uint32_t words[2]);
QMOE_API void qmoe_dict_free(qmoe_dict* dict);

/* Quantized matrices. `codes` is rows*cols row-major; `minmax` is rows*2
 * brain-float bit patterns (w_min, w_max per row). */
QMOE_API qmoe_status qmoe_matrix_create(qmoe_grid_mode mode, size_t rows, size_t cols, const uint8_t* codes,
                                        const uint16_t* minmax, qmoe_matrix** out);
QMOE_API qmoe_status qmoe_matrix_sample(double p0, size_t rows, size_t cols, uint64_t seed, qmoe_matrix** out);
QMOE_API size_t qmoe_matrix_rows(const qmoe_matrix* m);
QMOE_API size_t qmoe_matrix_cols(const qmoe_matrix* m);
QMOE_API qmoe_grid_mode qmoe_matrix_mode(const qmoe_matrix* m);
QMOE_API const uint8_t* qmoe_matrix_codes(const qmoe_matrix* m);
QMOE_API const uint16_t* qmoe_matrix_minmax(const qmoe_matrix* m);
QMOE_API qmoe_status qmoe_matrix_sparsity(const qmoe_matrix* m, double* out);
/* Appends a raw dump ("QMOERAW1") of each matrix to `path` (truncating first). */
QMOE_API qmoe_status qmoe_matrix_write_raw(const char* path, const qmoe_matrix* const* mats, size_t count);
QMOE_API void qmoe_matrix_free(qmoe_matrix* m);

/* Codec */
QMOE_API qmoe_status qmoe_encode(const qmoe_matrix* m, const qmoe_dict* dict, qmoe_compressed** out);
QMOE_API qmoe_status qmoe_decompress(const qmoe_compressed* c, const qmoe_dict* dict, qmoe_matrix** out);
/* y[r] += row_r . x with brain-float output rounding; nx == cols, ny == rows. */
QMOE_API qmoe_status qmoe_matvec(const qmoe_compressed* c, const qmoe_dict* dict, const float* x, size_t nx, float* y,
                                 size_t ny, unsigned workers);
QMOE_API qmoe_status qmoe_rate(const qmoe_compressed* c, qmoe_rate_report* out);
QMOE_API size_t qmoe_compressed_rows(const qmoe_compressed* c);
QMOE_API size_t qmoe_compressed_cols(const qmoe_compressed* c);
QMOE_API size_t qmoe_compressed_codeword_count(const qmoe_compressed* c);
QMOE_API const uint16_t* qmoe_compressed_codewords(const qmoe_compressed* c);
QMOE_API uint64_t qmoe_compressed_dict_hash(const qmoe_compressed* c);
QMOE_API void qmoe_compressed_free(qmoe_compressed* c);

/* Checkpoint container: one or more "QMOE0001" matrices back to back. */
QMOE_API qmoe_status qmoe_checkpoint_write(const char* path, const qmoe_compressed* const* mats, size_t count);
QMOE_API qmoe_status qmoe_checkpoint_open(const char* path, qmoe_checkpoint** out);
QMOE_API size_t qmoe_checkpoint_count(const qmoe_checkpoint* ck);
/* Borrowed; valid until the checkpoint is freed. */
QMOE_API const qmoe_compressed* qmoe_checkpoint_get(const qmoe_checkpoint* ck, size_t index);
QMOE_API void qmoe_checkpoint_free(qmoe_checkpoint* ck);

QMOE_API qmoe_status qmoe_theoretical_limit(double p0, double* out);

/* Run configuration (key = value text; see README). */
QMOE_API qmoe_status qmoe_config_default(qmoe_config** out);
QMOE_API qmoe_status qmoe_config_load(const char* path, qmoe_config** out);
QMOE_API qmoe_status qmoe_config_parse(const char* text, qmoe_config** out);
QMOE_API qmoe_status qmoe_config_set(qmoe_config* cfg, const char* key, const char* value);
/* Serialized form; the returned string lives until the next call on `cfg`. */
QMOE_API const char* qmoe_config_serialize(qmoe_config* cfg);
QMOE_API void qmoe_config_free(qmoe_config* cfg);

/* Layer compression run. `dict` may be NULL for two-bit runs. */
QMOE_API qmoe_status qmoe_run_compress(const qmoe_config* cfg, const qmoe_dict* dict, qmoe_run** out);
QMOE_API size_t qmoe_run_expert_count(const qmoe_run* run);
QMOE_API size_t qmoe_run_fallbacks(const qmoe_run* run);
QMOE_API int qmoe_run_fallback_threshold_exceeded(const qmoe_run* run);
QMOE_API double qmoe_run_mean_objective(const qmoe_run* run);
QMOE_API double qmoe_run_sparsity(const qmoe_run* run);
/* Encoded expert (ternary runs) or NULL; borrowed. */
QMOE_API const qmoe_compressed* qmoe_run_compressed(const qmoe_run* run, size_t expert);
/* Quantized expert; borrowed. */
QMOE_API const qmoe_matrix* qmoe_run_matrix(const qmoe_run* run, size_t expert);
QMOE_API const char* qmoe_run_report_text(const qmoe_run* run);
QMOE_API const char* qmoe_run_report_json(const qmoe_run* run);
QMOE_API void qmoe_run_free(qmoe_run* run);

#ifdef __cplusplus
}
#endif

#endif /* QMOE_QMOE_H */
