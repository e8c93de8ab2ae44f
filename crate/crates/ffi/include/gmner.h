#ifndef GMNER_H
#define GMNER_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GmnerStatus {
  GMNER_STATUS_OK = 0,
  GMNER_STATUS_NULL_POINTER = 1,
  GMNER_STATUS_INVALID_UTF8 = 2,
  GMNER_STATUS_INVALID_ARGUMENT = 3,
  GMNER_STATUS_DIM_MISMATCH = 4,
  GMNER_STATUS_IO = 5,
  GMNER_STATUS_FORMAT = 6,
  GMNER_STATUS_NOT_FOUND = 7,
  GMNER_STATUS_BUFFER_TOO_SMALL = 8,
  GMNER_STATUS_PANIC = 9,
} GmnerStatus;

// Opaque CRF model.
typedef struct GmnerCrf GmnerCrf;

// Opaque embedding store.
typedef struct GmnerStore GmnerStore;

// Axis-aligned box in pixel coordinates, `min` inclusive and `max` exclusive.
typedef struct GmnerBox {
  int32_t x_min;
  int32_t y_min;
  int32_t x_max;
  int32_t y_max;
} GmnerBox;

typedef struct GmnerPrf {
  double precision;
  double recall;
  double f1;
  size_t gold;
  size_t pred;
  size_t correct;
} GmnerPrf;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. Valid until the
// next gmner call on the same thread.
const char *gmner_last_error(void);

// Library version as a static NUL-terminated string.
const char *gmner_version(void);

// Loads a checkpoint and its JSON sidecar.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum GmnerStatus gmner_crf_load(const char *path, struct GmnerCrf **out);

// Builds a model from a flat parameter vector: emission weights (L×D),
// emission bias (L), transitions (L×L, from-major), start (L), end (L).
//
// # Safety
// `params` must hold `n_params` doubles; `out` must be writable.
enum GmnerStatus gmner_crf_from_params(size_t labels,
                                       size_t dim,
                                       const double *params,
                                       size_t n_params,
                                       struct GmnerCrf **out);

// Releases a CRF handle; null is ignored.
//
// # Safety
// `h` must come from a gmner constructor and not be freed twice.
void gmner_crf_free(struct GmnerCrf *h);

// Label count, or 0 for a null handle.
//
// # Safety
// `h` must be null or a live handle.
size_t gmner_crf_labels(const struct GmnerCrf *h);

// Feature dimension, or 0 for a null handle.
//
// # Safety
// `h` must be null or a live handle.
size_t gmner_crf_dim(const struct GmnerCrf *h);

// Best label path for a row-major `n_tokens × dim` embedding buffer.
//
// # Safety
// `emb` must hold `n_tokens × dim` doubles, `out_labels` room for
// `n_tokens` entries; `out_score` may be null.
enum GmnerStatus gmner_crf_viterbi(const struct GmnerCrf *h,
                                   const double *emb,
                                   size_t n_tokens,
                                   uint32_t *out_labels,
                                   double *out_score);

// Posterior marginals, written row-major as `n_tokens × labels`.
//
// # Safety
// `emb` must hold `n_tokens × dim` doubles, `out` `n_tokens × labels`.
enum GmnerStatus gmner_crf_marginals(const struct GmnerCrf *h,
                                     const double *emb,
                                     size_t n_tokens,
                                     double *out);

// Log partition function of the sequence.
//
// # Safety
// `emb` must hold `n_tokens × dim` doubles; `out` must be writable.
enum GmnerStatus gmner_crf_log_partition(const struct GmnerCrf *h,
                                         const double *emb,
                                         size_t n_tokens,
                                         double *out);

// Opens an embedding store (binary or JSON lines).
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum GmnerStatus gmner_store_load(const char *path, struct GmnerStore **out);

// Releases a store handle; null is ignored.
//
// # Safety
// `h` must come from [`gmner_store_load`] and not be freed twice.
void gmner_store_free(struct GmnerStore *h);

// Vector dimension, or 0 for a null handle.
//
// # Safety
// `h` must be null or a live handle.
size_t gmner_store_dim(const struct GmnerStore *h);

// Number of stored vectors, or 0 for a null handle.
//
// # Safety
// `h` must be null or a live handle.
size_t gmner_store_len(const struct GmnerStore *h);

// Copies the vector stored under `key` into `out`.
//
// # Safety
// `key` must be NUL-terminated; `out` must have room for `cap` doubles.
enum GmnerStatus gmner_store_get(const struct GmnerStore *h,
                                 const char *key,
                                 double *out,
                                 size_t cap);

// Cosine similarity of two stored vectors.
//
// # Safety
// Keys must be NUL-terminated; `out` must be writable.
enum GmnerStatus gmner_store_cosine(const struct GmnerStore *h,
                                    const char *a,
                                    const char *b,
                                    double *out);

// Cosine similarity of two length-`n` vectors; zero-norm input is an error.
//
// # Safety
// `a` and `b` must hold `n` doubles; `out` must be writable.
enum GmnerStatus gmner_cosine(const double *a, const double *b, size_t n, double *out);

// Shannon entropy (nats) of one probability row.
//
// # Safety
// `row` must hold `n` doubles; `out` must be writable.
enum GmnerStatus gmner_token_entropy(const double *row, size_t n, double *out);

// Intersection over union; 0 when the union is empty.
double gmner_iou(struct GmnerBox a, struct GmnerBox b);

// Indices of the `k` largest scores, best first; ties go to the lower index.
//
// # Safety
// `scores` must hold `n` doubles, `out` room for `k` entries.
enum GmnerStatus gmner_topk(const double *scores, size_t n, size_t k, size_t *out);

// Scores a predictions file against a gold dataset. `types` lists the
// schema's entity types; `text_only` ignores regions.
//
// # Safety
// Paths and every entry of `types` must be NUL-terminated strings; `types`
// must hold `n_types` pointers; `out` must be writable.
enum GmnerStatus gmner_eval_files(const char *gold_path,
                                  const char *pred_path,
                                  const char *const *types,
                                  size_t n_types,
                                  bool text_only,
                                  struct GmnerPrf *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GMNER_H */
