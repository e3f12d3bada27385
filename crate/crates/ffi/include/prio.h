#ifndef PRIO_H
#define PRIO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every exported function.
 */
typedef enum PrioStatus {
  PRIO_STATUS_OK = 0,
  PRIO_STATUS_NULL_POINTER = 1,
  PRIO_STATUS_INVALID_ARGUMENT = 2,
  PRIO_STATUS_IO = 3,
  PRIO_STATUS_FORMAT = 4,
  PRIO_STATUS_DIMENSION = 5,
  PRIO_STATUS_ZERO_GATE = 6,
  PRIO_STATUS_OVERFLOW = 7,
  PRIO_STATUS_BUFFER_TOO_SMALL = 8,
  PRIO_STATUS_PANIC = 9,
} PrioStatus;

/**
 * A loaded prior bank.
 */
typedef struct PrioBank PrioBank;

/**
 * Routing projection weights.
 */
typedef struct PrioParams PrioParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of the calling thread into `buf` as a
 * NUL-terminated string, truncating if needed. Returns the length the
 * full message needs, including the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t prio_last_error_message(char *buf, size_t len);

/**
 * Loads a bank JSON file written by `prio build-bank`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PrioStatus prio_bank_load(const char *path, struct PrioBank **out);

/**
 * Releases a bank. Null is ignored.
 *
 * # Safety
 * `bank` must come from `prio_bank_load` and not be freed twice.
 */
void prio_bank_free(struct PrioBank *bank);

/**
 * Reports the bank's prototype count, class count and feature dimension.
 * Any output pointer may be null.
 *
 * # Safety
 * `bank` must be a live handle.
 */
enum PrioStatus prio_bank_shape(const struct PrioBank *bank,
                                size_t *prototypes,
                                size_t *classes,
                                size_t *feature_dim);

/**
 * Loads routing weights from a parameter file written by `prio init-params`
 * or `prio toy train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PrioStatus prio_params_load(const char *path, struct PrioParams **out);

/**
 * Creates seeded routing weights of the given shape.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum PrioStatus prio_params_init(size_t query_dim,
                                 size_t feature_dim,
                                 size_t width,
                                 uint64_t seed,
                                 struct PrioParams **out);

/**
 * Releases routing weights. Null is ignored.
 *
 * # Safety
 * `params` must come from `prio_params_load` or `prio_params_init`.
 */
void prio_params_free(struct PrioParams *params);

/**
 * Routes one query through the bank.
 *
 * `q` holds `q_len` query values, `p` holds one probability per bank class.
 * `weights` receives one weight per prototype and must hold `weights_len`
 * values, at least the prototype count. `mu_hat` and `sigma_hat` receive
 * three values each and may be null.
 *
 * # Safety
 * All non-null pointers must be valid for the stated lengths.
 */
enum PrioStatus prio_route(const struct PrioBank *bank,
                           const struct PrioParams *params,
                           const double *q,
                           size_t q_len,
                           const double *p,
                           size_t p_len,
                           double *weights,
                           size_t weights_len,
                           double *mu_hat,
                           double *sigma_hat);

/**
 * Blends a log-space residual with a prior mean. All arrays hold three
 * values (height, width, length); `out` receives the metric size.
 *
 * # Safety
 * Every pointer must reference three doubles.
 */
enum PrioStatus prio_condition_size(const double *residual,
                                    const double *mu_hat,
                                    const double *lambda,
                                    double eps,
                                    double *out);

/**
 * Squared whitened distance between a log-size point and one prototype.
 *
 * # Safety
 * `x` must reference three doubles and `out` must be valid.
 */
enum PrioStatus prio_whitened_distance(const struct PrioBank *bank,
                                       size_t prototype,
                                       const double *x,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRIO_H */
