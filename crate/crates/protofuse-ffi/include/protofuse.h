#ifndef PROTOFUSE_H
#define PROTOFUSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every FFI entry point.
typedef enum PfStatus {
  PF_OK = 0,
  PF_NULL_POINTER = 1,
  PF_ARGUMENT_ERROR = 2,
  PF_DATA_ERROR = 3,
  PF_CONVERGENCE_ERROR = 4,
  PF_VERIFICATION_FAILURE = 5,
  PF_UTF8_ERROR = 6,
  PF_PANIC = 7,
} PfStatus;

// Opaque handle to a fitted prototype bank.
typedef struct PfPrototypeBank PfPrototypeBank;

// Opaque handle to a slide summary.
typedef struct PfSlideSummary PfSlideSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static string; do not free.
const char *pf_version(void);

// Last error message for this thread, or NULL when the last call succeeded.
// The caller owns the returned string and must release it with
// `pf_string_free`.
char *pf_last_error_message(void);

// Release a string returned by this library.
//
// # Safety
// `s` must be a pointer previously returned by a protofuse FFI function and
// not yet freed; NULL is ignored.
void pf_string_free(char *s);

// Fit a K-means prototype bank over row-major `points` (n x dim).
//
// # Safety
// `points` must reference n*dim readable doubles and `out` a writable slot.
enum PfStatus pf_bank_fit_kmeans(const double *points,
                                 uintptr_t n,
                                 uintptr_t dim,
                                 uintptr_t prototype_count,
                                 uint64_t seed,
                                 struct PfPrototypeBank **out);

// Load a bank from its CSV serialization.
//
// # Safety
// `path` must be a NUL-terminated string; `out` a writable slot.
enum PfStatus pf_bank_load_csv(const char *path, struct PfPrototypeBank **out);

// Write a bank to CSV.
//
// # Safety
// `bank` must be a live handle; `path` a NUL-terminated string.
enum PfStatus pf_bank_save_csv(const struct PfPrototypeBank *bank, const char *path);

// Number of prototypes in the bank (0 for NULL).
//
// # Safety
// `bank` must be NULL or a live handle.
uintptr_t pf_bank_count(const struct PfPrototypeBank *bank);

// Embedding dimension of the bank (0 for NULL).
//
// # Safety
// `bank` must be NULL or a live handle.
uintptr_t pf_bank_dim(const struct PfPrototypeBank *bank);

// Copy the centroid matrix (count x dim, row-major) into `out`.
//
// # Safety
// `out` must reference `len` writable doubles with len >= count*dim.
enum PfStatus pf_bank_centroids(const struct PfPrototypeBank *bank, double *out, uintptr_t len);

// Index of the prototype closest to `z` (squared L2, lowest index on ties).
//
// # Safety
// `z` must reference `dim` readable doubles; `out_index` a writable slot.
enum PfStatus pf_bank_nearest(const struct PfPrototypeBank *bank,
                              const double *z,
                              uintptr_t dim,
                              uintptr_t *out_index);

// Release a bank handle.
//
// # Safety
// `bank` must be NULL or a live handle; it is invalid afterwards.
void pf_bank_free(struct PfPrototypeBank *bank);

// GMM aggregation against the bank; summary rows are [pi, mu, sigma].
//
// # Safety
// `patches` must reference n*dim readable doubles; `out` a writable slot.
enum PfStatus pf_aggregate_gmm(const struct PfPrototypeBank *bank,
                               const double *patches,
                               uintptr_t n,
                               uintptr_t dim,
                               uintptr_t em_iters,
                               struct PfSlideSummary **out);

// Hard-clustering aggregation (empty prototypes emit their centroid).
//
// # Safety
// Same contracts as `pf_aggregate_gmm`.
enum PfStatus pf_aggregate_hc(const struct PfPrototypeBank *bank,
                              const double *patches,
                              uintptr_t n,
                              uintptr_t dim,
                              struct PfSlideSummary **out);

// Entropic-OT aggregation. `epsilon <= 0` selects the default
// (0.1 x mean cost); marginals are checked to `marginal_tol`.
//
// # Safety
// Same contracts as `pf_aggregate_gmm`.
enum PfStatus pf_aggregate_ot(const struct PfPrototypeBank *bank,
                              const double *patches,
                              uintptr_t n,
                              uintptr_t dim,
                              double epsilon,
                              uintptr_t max_iters,
                              double marginal_tol,
                              struct PfSlideSummary **out);

// Final-iteration GMM responsibilities q(c|z_i), row-major n x count.
//
// # Safety
// `out` must reference `len >= n*count` writable doubles.
enum PfStatus pf_gmm_posteriors(const struct PfPrototypeBank *bank,
                                const double *patches,
                                uintptr_t n,
                                uintptr_t dim,
                                uintptr_t em_iters,
                                double *out,
                                uintptr_t len);

// Row count of a summary (0 for NULL).
//
// # Safety
// `summary` must be NULL or a live handle.
uintptr_t pf_summary_count(const struct PfSlideSummary *summary);

// Per-row width of a summary (2*dim+1 for GMM, dim otherwise; 0 for NULL).
//
// # Safety
// `summary` must be NULL or a live handle.
uintptr_t pf_summary_dim(const struct PfSlideSummary *summary);

// Copy the summary matrix (count x dim, row-major) into `out`.
//
// # Safety
// `out` must reference `len >= count*dim` writable doubles.
enum PfStatus pf_summary_rows(const struct PfSlideSummary *summary, double *out, uintptr_t len);

// Release a summary handle.
//
// # Safety
// `summary` must be NULL or a live handle; it is invalid afterwards.
void pf_summary_free(struct PfSlideSummary *summary);

// Negative Cox partial log-likelihood (Breslow ties). `events[i]` nonzero
// means death observed.
//
// # Safety
// `scores`, `times`, `events` must each reference n readable elements;
// `out` a writable double.
enum PfStatus pf_cox_loss(const double *scores,
                          const double *times,
                          const uint8_t *events,
                          uintptr_t n,
                          double *out);

// Analytic gradient of the Cox loss with respect to the scores.
//
// # Safety
// As `pf_cox_loss`; `out` must reference n writable doubles.
enum PfStatus pf_cox_gradient(const double *scores,
                              const double *times,
                              const uint8_t *events,
                              uintptr_t n,
                              double *out);

// Harrell concordance index (ties weight one half).
//
// # Safety
// As `pf_cox_loss`.
enum PfStatus pf_concordance_index(const double *scores,
                                   const double *times,
                                   const uint8_t *events,
                                   uintptr_t n,
                                   double *out);

// Two-group log-rank test; chi-square statistic and 1-df p-value.
//
// # Safety
// Each times/events pair must reference the stated number of elements;
// `out_chi_sq` and `out_p` must be writable.
enum PfStatus pf_logrank_test(const double *times_a,
                              const uint8_t *events_a,
                              uintptr_t n_a,
                              const double *times_b,
                              const uint8_t *events_b,
                              uintptr_t n_b,
                              double *out_chi_sq,
                              double *out_p);

// Numerical check of the OT / cross-attention equivalence on caller-supplied
// token and projection matrices (all row-major: z_g is c_g x d, z_h is
// c_h x d, w_q and w are d x d).
//
// # Safety
// All matrix pointers must reference their stated extents; out-pointers
// must be writable.
enum PfStatus pf_check_lemma1(const double *z_g,
                              uintptr_t c_g,
                              const double *z_h,
                              uintptr_t c_h,
                              uintptr_t d,
                              const double *w_q,
                              const double *w,
                              double tol,
                              double *out_max_dev,
                              uint8_t *out_pass);

// Run the full pipeline from a key = value config file; on success returns
// the metrics JSON through `metrics_json_out` (free with `pf_string_free`).
//
// # Safety
// `config_path` must be NUL-terminated; `metrics_json_out` writable.
enum PfStatus pf_run_pipeline(const char *config_path, char **metrics_json_out);

// Run the self-contained verification suite; PF_OK when every check passes.
enum PfStatus pf_verify(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROTOFUSE_H */
