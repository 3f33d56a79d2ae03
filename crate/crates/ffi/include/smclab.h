#ifndef SMCLAB_H
#define SMCLAB_H

#include <stddef.h>
#include <stdint.h>

typedef enum SmclabStatus {
  SMCLAB_STATUS_OK = 0,
  SMCLAB_STATUS_NULL_POINTER = 1,
  SMCLAB_STATUS_INVALID_ARGUMENT = 2,
  SMCLAB_STATUS_NOT_POWER_OF_TWO = 3,
  SMCLAB_STATUS_UNNORMALIZED = 4,
  SMCLAB_STATUS_TOO_LARGE = 5,
  SMCLAB_STATUS_NOT_ADDITIVELY_CORRELATED = 6,
  SMCLAB_STATUS_PROTOCOL_ERROR = 7,
  SMCLAB_STATUS_BUFFER_TOO_SMALL = 8,
  SMCLAB_STATUS_PANIC = 9,
} SmclabStatus;

// A joint distribution over small finite alphabets.
typedef struct SmclabDistribution SmclabDistribution;

// Per-index conditional entropies of a polarized Bernoulli source.
typedef struct SmclabProfile SmclabProfile;

// Result of an exact one-shot protocol analysis.
typedef struct SmclabReport SmclabReport;

// Message for the most recent failure on this thread; empty if none. The
// pointer stays valid until the next failing call on the same thread.
const char *smclab_last_error(void);

// Library version as a static NUL-terminated string.
const char *smclab_version(void);

// Releases a string returned by this library.
//
// # Safety
// `s` must be NULL or a pointer returned by this library not yet freed.
void smclab_string_free(char *s);

// Dense table over variables `X1..Xk` with the given alphabet sizes,
// row-major with the last variable fastest.
//
// # Safety
// `sizes` must point to `num_vars` values and `probabilities` to
// `num_cells` values; `out` must be writable.
enum SmclabStatus smclab_distribution_new(const size_t *sizes,
                                          size_t num_vars,
                                          const double *probabilities,
                                          size_t num_cells,
                                          struct SmclabDistribution **out);

// Distribution from its JSON description (explicit table or preset).
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum SmclabStatus smclab_distribution_from_json(const char *json, struct SmclabDistribution **out);

// # Safety
// `dist` must be NULL or a handle not yet freed.
void smclab_distribution_free(struct SmclabDistribution *dist);

// Joint entropy in bits of the variables at `positions`.
//
// # Safety
// `dist` must be a live handle, `positions` must point to `count` values
// and `out` must be writable.
enum SmclabStatus smclab_entropy(const struct SmclabDistribution *dist,
                                 const size_t *positions,
                                 size_t count,
                                 double *out);

// H(targets | given) in bits.
//
// # Safety
// As for [`smclab_entropy`], for both position arrays.
enum SmclabStatus smclab_conditional_entropy(const struct SmclabDistribution *dist,
                                             const size_t *targets,
                                             size_t num_targets,
                                             const size_t *given,
                                             size_t num_given,
                                             double *out);

// Additive-correlation gap H(a, b) - 2 H(a xor b) of two binary variables.
//
// # Safety
// `dist` must be a live handle and `out` writable.
enum SmclabStatus smclab_additive_gap(const struct SmclabDistribution *dist,
                                      size_t a,
                                      size_t b,
                                      double *out);

// Exact analysis of a built-in protocol under uniform inputs.
// `modulus` 0 selects the default; `broadcast` nonzero sends the result
// back to every party.
//
// # Safety
// `protocol` must be a NUL-terminated string and `out` writable.
enum SmclabStatus smclab_oneshot_analyze(const char *protocol,
                                         size_t m,
                                         uint64_t modulus,
                                         int32_t broadcast,
                                         struct SmclabReport **out);

// # Safety
// `report` must be NULL or a handle not yet freed.
void smclab_report_free(struct SmclabReport *report);

// # Safety
// `report` must be a live handle and `out` writable.
enum SmclabStatus smclab_report_randomness_cost(const struct SmclabReport *report, double *out);

// Writes 1 if every party passes accuracy and security, else 0.
//
// # Safety
// `report` must be a live handle and `out` writable.
enum SmclabStatus smclab_report_all_pass(const struct SmclabReport *report, int32_t *out);

// # Safety
// `report` must be a live handle and `out` writable.
enum SmclabStatus smclab_report_security_residual(const struct SmclabReport *report,
                                                  size_t party,
                                                  double *out);

// The report as JSON; free with [`smclab_string_free`].
//
// # Safety
// `report` must be a live handle and `out` writable.
enum SmclabStatus smclab_report_to_json(const struct SmclabReport *report, char **out);

// `out = bits G_n`; `n` must be a power of two. `bits` and `out` may alias.
//
// # Safety
// `bits` and `out` must each point to `n` bytes.
enum SmclabStatus smclab_polar_transform(const uint8_t *bits, size_t n, uint8_t *out);

// Exact profile by enumeration (n <= 16).
//
// # Safety
// `out` must be writable.
enum SmclabStatus smclab_profile_exact(double p, size_t n, struct SmclabProfile **out);

// Monte Carlo profile.
//
// # Safety
// `out` must be writable.
enum SmclabStatus smclab_profile_monte_carlo(double p,
                                             size_t n,
                                             size_t samples,
                                             uint64_t seed,
                                             struct SmclabProfile **out);

// # Safety
// `profile` must be NULL or a handle not yet freed.
void smclab_profile_free(struct SmclabProfile *profile);

// Copies the n entropies into `out` (capacity `len`).
//
// # Safety
// `profile` must be a live handle and `out` must point to `len` values.
enum SmclabStatus smclab_profile_entropies(const struct SmclabProfile *profile,
                                           double *out,
                                           size_t len);

// Zero-based indices with entropy >= epsilon, ascending. `count` always
// receives the set size; `indices` (capacity `cap`) may be NULL to query it.
//
// # Safety
// `profile` must be a live handle, `count` writable, and `indices` NULL or
// pointing to `cap` values.
enum SmclabStatus smclab_profile_high_entropy_set(const struct SmclabProfile *profile,
                                                  double epsilon,
                                                  size_t *indices,
                                                  size_t cap,
                                                  size_t *count);

// Successive cancellation: `known[k]` is the transformed bit at
// `indices[k]`; writes the n-bit estimate of the *source* sequence.
//
// # Safety
// `known` and `indices` must point to `count` values, `out` to `n` bytes.
enum SmclabStatus smclab_sc_reconstruct(const uint8_t *known,
                                        const size_t *indices,
                                        size_t count,
                                        size_t n,
                                        double p,
                                        uint8_t *out);

// Fano lower bounds for a three-bit source model: the finite-n value for
// `r_size` transmitted bits and the asymptotic value.
//
// # Safety
// `dist` must be a live handle and both outputs writable.
enum SmclabStatus smclab_fano_bound(const struct SmclabDistribution *dist,
                                    size_t n,
                                    size_t r_size,
                                    double *finite,
                                    double *asymptotic);

#endif  /* SMCLAB_H */
