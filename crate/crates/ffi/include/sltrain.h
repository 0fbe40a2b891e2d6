#ifndef SLTRAIN_H
#define SLTRAIN_H

#include <stddef.h>
#include <stdint.h>

typedef enum SltStatus {
  SLT_STATUS_OK = 0,
  SLT_STATUS_NULL_POINTER = 1,
  SLT_STATUS_INVALID_ARGUMENT = 2,
  SLT_STATUS_SHAPE_MISMATCH = 3,
  SLT_STATUS_IO = 4,
  SLT_STATUS_FORMAT = 5,
  SLT_STATUS_CONFIG = 6,
  SLT_STATUS_NUMERICAL_FAILURE = 7,
  SLT_STATUS_PANIC = 8,
} SltStatus;

// One sparse-plus-low-rank linear layer.
typedef struct SltLayer SltLayer;

// A model restored from a checkpoint.
typedef struct SltModel SltModel;

// Number counts fed to the memory estimator.
typedef struct SltMemoryBreakdown {
  uint64_t bf16_param_count;
  uint64_t int64_count;
  uint64_t trainable_count;
  uint64_t extra_optimizer_bf16;
} SltMemoryBreakdown;

// Bytes and rounded gigabytes (hundredths of 1e9 bytes).
typedef struct SltMemoryReport {
  uint64_t param_bytes;
  uint64_t optimizer_bytes;
  uint64_t total_bytes;
  uint64_t param_centi_g;
  uint64_t optimizer_centi_g;
  uint64_t total_centi_g;
} SltMemoryReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call on the same thread.
const char *slt_last_error(void);

// Library version as a static string.
const char *slt_version(void);

// Creates a `d x p` layer with rank `r` and density `delta`.
//
// # Safety
// `out` must be writable.
enum SltStatus slt_layer_new(size_t d,
                             size_t p,
                             size_t r,
                             double delta,
                             double alpha,
                             uint64_t seed,
                             struct SltLayer **out);

// # Safety
// `layer` must come from `slt_layer_new` and not be used afterwards.
void slt_layer_free(struct SltLayer *layer);

// Output rows, input columns, rank and number of sparse entries.
//
// # Safety
// `layer` must be valid; output pointers must be writable.
enum SltStatus slt_layer_shape(const struct SltLayer *layer,
                               size_t *d,
                               size_t *p,
                               size_t *r,
                               size_t *nnz);

// `Z = W X` with `X` of shape `p x n` and `Z` of shape `d x n`.
//
// # Safety
// `x` must hold `p * n` values and `z` room for `d * n`.
enum SltStatus slt_layer_forward(const struct SltLayer *layer,
                                 const double *x,
                                 size_t n,
                                 double *z);

// Gradients for cotangent `dz` (`d x n`): `db` (`d x r`), `da` (`r x p`),
// `dv` (`nnz`, support order) and `dx` (`p x n`).
//
// # Safety
// Every buffer must have the documented length.
enum SltStatus slt_layer_backward(const struct SltLayer *layer,
                                  const double *x,
                                  const double *dz,
                                  size_t n,
                                  double *db,
                                  double *da,
                                  double *dv,
                                  double *dx);

// Writes the dense `d x p` weight.
//
// # Safety
// `w` must have room for `d * p` values.
enum SltStatus slt_layer_densify(const struct SltLayer *layer, double *w);

// Restores the model stored in a checkpoint file.
//
// # Safety
// `path` must be a nul-terminated UTF-8 string; `out` must be writable.
enum SltStatus slt_model_load(const char *path, struct SltModel **out);

// # Safety
// `model` must come from `slt_model_load` and not be used afterwards.
void slt_model_free(struct SltModel *model);

// Vocabulary size and total trainable numbers.
//
// # Safety
// `model` must be valid; output pointers must be writable.
enum SltStatus slt_model_info(const struct SltModel *model, size_t *vocab, size_t *trainable);

// Perplexity over a token stream of at least two ids.
//
// # Safety
// `tokens` must hold `len` ids; `ppl` must be writable.
enum SltStatus slt_model_perplexity(const struct SltModel *model,
                                    const uint32_t *tokens,
                                    size_t len,
                                    double *ppl);

// Memory of parameters and Adam state under the bf16 convention.
//
// # Safety
// `counts` must be readable and `out` writable.
enum SltStatus slt_estimate_memory(const struct SltMemoryBreakdown *counts,
                                   struct SltMemoryReport *out);

// Counts for sparse-plus-low-rank pretraining of the `(d, p)` pairs in
// `shapes` (`2 * n_shapes` values) plus `non_adapted` dense numbers.
//
// # Safety
// `shapes` must hold `2 * n_shapes` values and `out` be writable.
enum SltStatus slt_count_sltrain(const size_t *shapes,
                                 size_t n_shapes,
                                 uint64_t non_adapted,
                                 size_t r,
                                 double delta,
                                 struct SltMemoryBreakdown *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SLTRAIN_H */
