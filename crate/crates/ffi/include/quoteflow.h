#ifndef QUOTEFLOW_H
#define QUOTEFLOW_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum QfDiscount {
  QF_DISCOUNT_IDENTITY = 0,
  QF_DISCOUNT_SQRT = 1,
  QF_DISCOUNT_LOG1P = 2,
} QfDiscount;

typedef enum QfSelection {
  QF_SELECTION_EXCESS_OF_MASS = 0,
  QF_SELECTION_LEAF = 1,
} QfSelection;

typedef enum QfStatus {
  QF_STATUS_OK = 0,
  QF_STATUS_NULL_POINTER = 1,
  QF_STATUS_INVALID_ARGUMENT = 2,
  QF_STATUS_IO = 3,
  QF_STATUS_PARSE = 4,
  QF_STATUS_CONFIG = 5,
  QF_STATUS_MISSING_ARTIFACT = 6,
  QF_STATUS_INTERNAL = 7,
  QF_STATUS_PANIC = 8,
} QfStatus;

typedef enum QfVariant {
  QF_VARIANT_MAIN_TEXT = 0,
  QF_VARIANT_SUPPLEMENT = 1,
  QF_VARIANT_FIGURE2 = 2,
} QfVariant;

/**
 * Loaded, validated corpus. Create with [`qf_corpus_load`], release with
 * [`qf_corpus_free`].
 */
typedef struct QfCorpus QfCorpus;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *qf_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next quoteflow call on the same thread.
 */
const char *qf_last_error(void);

/**
 * Loads records (JSONL) and outlets (JSONL) with default ingest options.
 *
 * # Safety
 * Both paths must be NUL-terminated strings; `out` must be writable.
 */
enum QfStatus qf_corpus_load(const char *records_path,
                             const char *outlets_path,
                             struct QfCorpus **out);

/**
 * Releases a corpus. NULL is ignored.
 *
 * # Safety
 * `corpus` must come from [`qf_corpus_load`] and not be freed already.
 */
void qf_corpus_free(struct QfCorpus *corpus);

/**
 * Number of records; 0 for NULL.
 *
 * # Safety
 * `corpus` must be NULL or a live handle.
 */
size_t qf_corpus_len(const struct QfCorpus *corpus);

/**
 * Number of outlets; 0 for NULL.
 *
 * # Safety
 * `corpus` must be NULL or a live handle.
 */
size_t qf_corpus_outlet_count(const struct QfCorpus *corpus);

/**
 * Salience of one quote for a follower from its counts.
 *
 * # Safety
 * `out` must be writable.
 */
enum QfStatus qf_salience_from_counts(size_t s_q,
                                      size_t n_j,
                                      size_t n_after,
                                      enum QfVariant variant,
                                      enum QfDiscount g1,
                                      enum QfDiscount g2,
                                      double *out);

/**
 * Log-exposures `s^(h)` for hops `1..=n_hop`.
 *
 * `adjacency` is `n * n` row-major; `z` has `n` entries. `out` receives
 * `n_hop * n` values, hop-major.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum QfStatus qf_exposures(const double *adjacency,
                           size_t n,
                           const double *z,
                           size_t n_hop,
                           double *out);

/**
 * HDBSCAN on `n` points of dimension `dim` (row-major).
 *
 * `labels` receives the cluster of each point or -1 for noise;
 * `probabilities` (may be NULL) the membership strengths.
 *
 * # Safety
 * Buffers must hold the stated number of elements; `n_clusters` must be
 * writable.
 */
enum QfStatus qf_hdbscan(const double *points,
                         size_t n,
                         size_t dim,
                         size_t min_cluster_size,
                         size_t min_samples,
                         enum QfSelection selection,
                         int64_t *labels,
                         double *probabilities,
                         size_t *n_clusters);

/**
 * Runs a pipeline stage (`"ingest"`, ..., `"report"`, `"simulate"` or
 * `"all"`) from a JSON config. `executed` (may be NULL) receives the number
 * of stages that ran rather than being served from cache.
 *
 * # Safety
 * Strings must be NUL-terminated.
 */
enum QfStatus qf_pipeline_run(const char *config_path,
                              const char *stage,
                              int force,
                              size_t *executed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QUOTEFLOW_H */
