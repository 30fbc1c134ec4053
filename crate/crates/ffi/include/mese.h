#ifndef MESE_H
#define MESE_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum MeseStatus {
  MESE_STATUS_OK = 0,
  MESE_STATUS_NULL_POINTER = 1,
  MESE_STATUS_INVALID_ARGUMENT = 2,
  MESE_STATUS_CONFIG = 3,
  MESE_STATUS_PARSE = 4,
  MESE_STATUS_IO = 5,
  MESE_STATUS_SHAPE = 6,
  MESE_STATUS_UNDEFINED = 7,
  MESE_STATUS_BUFFER_TOO_SMALL = 8,
  MESE_STATUS_RUNTIME = 9,
  MESE_STATUS_PANIC = 10,
} MeseStatus;

// A loaded or generated corpus.
typedef struct MeseCorpus MeseCorpus;

// Per-entity distributions of one model over one corpus, ready for
// expansion.
typedef struct MeseIndex MeseIndex;

// A trained model.
typedef struct MeseModel MeseModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next call into this library on the same thread.
const char *mese_last_error(void);

// # Safety
// `dir` must be a nul-terminated string and `out` writable.
enum MeseStatus mese_corpus_load(const char *dir, struct MeseCorpus **out);

// Synthetic corpus with default settings. `sibling_pairs` and
// `token_overlap` control the hard-negative classes.
//
// # Safety
// `out` must be writable.
enum MeseStatus mese_corpus_generate(uint64_t seed,
                                     size_t sibling_pairs,
                                     double token_overlap,
                                     struct MeseCorpus **out);

// # Safety
// `corpus` must come from this library and not be used afterwards.
void mese_corpus_free(struct MeseCorpus *corpus);

// # Safety
// `corpus` must be a live handle and `out` writable.
enum MeseStatus mese_corpus_entity_count(const struct MeseCorpus *corpus, size_t *out);

// # Safety
// `corpus` must be a live handle and `out` writable.
enum MeseStatus mese_corpus_query_count(const struct MeseCorpus *corpus, size_t *out);

// Copies the seeds of query `index` into `seeds` and stores their count
// in `out_len`. Fails with `BufferTooSmall` (after setting `out_len`)
// when `capacity` is too small.
//
// # Safety
// `seeds` must hold `capacity` elements; `out_len` must be writable.
enum MeseStatus mese_corpus_query_seeds(const struct MeseCorpus *corpus,
                                        size_t index,
                                        size_t *seeds,
                                        size_t capacity,
                                        size_t *out_len);

// # Safety
// `path` must be a nul-terminated string and `out` writable.
enum MeseStatus mese_model_load(const char *path, struct MeseModel **out);

// # Safety
// `model` must come from this library and not be used afterwards.
void mese_model_free(struct MeseModel *model);

// Entity distributions of `model` over `corpus` with both modalities.
//
// # Safety
// Handles must be live and `out` writable.
enum MeseStatus mese_index_build(const struct MeseModel *model,
                                 const struct MeseCorpus *corpus,
                                 struct MeseIndex **out);

// # Safety
// `index` must come from this library and not be used afterwards.
void mese_index_free(struct MeseIndex *index);

// Expands `seeds` to `target_size` entities. Ids go to `out_ids` and,
// when `out_scores` is non-null, scores to `out_scores`, both best first.
// `out_len` receives the list length.
//
// # Safety
// `seeds` must hold `n_seeds` elements, `out_ids` (and `out_scores` if
// non-null) `capacity` elements.
enum MeseStatus mese_expand(const struct MeseIndex *index,
                            const size_t *seeds,
                            size_t n_seeds,
                            size_t target_size,
                            bool ensemble,
                            size_t *out_ids,
                            double *out_scores,
                            size_t capacity,
                            size_t *out_len);

// P@K of `ranked` against the ground-truth set `gt`.
//
// # Safety
// Arrays must hold the stated number of elements; `out` must be writable.
enum MeseStatus mese_precision_at_k(const size_t *ranked,
                                    size_t n_ranked,
                                    const size_t *gt,
                                    size_t n_gt,
                                    size_t k,
                                    double *out);

// AP@K of `ranked` against the ground-truth set `gt`.
//
// # Safety
// Arrays must hold the stated number of elements; `out` must be writable.
enum MeseStatus mese_average_precision_at_k(const size_t *ranked,
                                            size_t n_ranked,
                                            const size_t *gt,
                                            size_t n_gt,
                                            size_t k,
                                            double *out);

// Fleiss' κ of a row-major `items × categories` count table.
//
// # Safety
// `table` must hold `items * categories` elements; `out` must be writable.
enum MeseStatus mese_fleiss_kappa(const size_t *table,
                                  size_t items,
                                  size_t categories,
                                  size_t raters,
                                  double *out);

// Diversity of `n` row-major embeddings of width `dim`.
//
// # Safety
// `embeddings` must hold `n * dim` elements; `out` must be writable.
enum MeseStatus mese_diversity(const double *embeddings, size_t n, size_t dim, double *out);

// Image score α·(image·text) + (1−α)·max over objects of
// cos(object, typical). All vectors have width `dim` and unit norm;
// `objects` is row-major with `n_objects` rows and may be null when
// `n_objects` is 0.
//
// # Safety
// Arrays must hold the stated number of elements; `out` must be writable.
enum MeseStatus mese_score_image(const double *clip_image,
                                 const double *objects,
                                 size_t n_objects,
                                 const double *clip_text,
                                 const double *typical_image,
                                 size_t dim,
                                 double alpha,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MESE_H */
