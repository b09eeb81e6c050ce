#ifndef PDEGEN_H
#define PDEGEN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Parameter precision of a generator.
 */
typedef enum PdgnPrecision {
  PDGN_PRECISION_F32 = 0,
  PDGN_PRECISION_F64 = 1,
} PdgnPrecision;

/**
 * Result of every fallible call.
 */
typedef enum PdgnStatus {
  PDGN_STATUS_OK = 0,
  /**
   * A null pointer, a short buffer or an out-of-range value.
   */
  PDGN_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Shapes or sizes that do not fit together.
   */
  PDGN_STATUS_SHAPE = 2,
  PDGN_STATUS_CONFIG = 3,
  /**
   * A non-finite value or another numerical failure.
   */
  PDGN_STATUS_NUMERICAL = 4,
  /**
   * A file that is not a valid checkpoint or field.
   */
  PDGN_STATUS_FORMAT = 5,
  PDGN_STATUS_IO = 6,
  /**
   * The library panicked; this is a bug.
   */
  PDGN_STATUS_INTERNAL = 7,
} PdgnStatus;

/**
 * Opaque generator handle.
 */
typedef struct PdgnGenerator PdgnGenerator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *pdgn_last_error(void);

/**
 * Creates a freshly initialized generator for `resolution x resolution`
 * fields with the default architecture.
 *
 * # Safety
 * `out` must be a valid pointer to writable handle storage.
 */
enum PdgnStatus pdgn_generator_new(size_t resolution,
                                   uint64_t seed,
                                   enum PdgnPrecision precision,
                                   struct PdgnGenerator **out);

/**
 * Loads a checkpoint written by training.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PdgnStatus pdgn_generator_load(const char *path, struct PdgnGenerator **out);

/**
 * Writes the generator as a checkpoint file.
 *
 * # Safety
 * `gen` must be a live handle and `path` a NUL-terminated string.
 */
enum PdgnStatus pdgn_generator_save(const struct PdgnGenerator *gen, const char *path);

/**
 * Field resolution `N` of the generator, or 0 for a null handle.
 *
 * # Safety
 * `gen` must be null or a live handle.
 */
size_t pdgn_generator_resolution(const struct PdgnGenerator *gen);

/**
 * Evaluates the generator for parameter `c` and writes the `N x N` field,
 * rows at increasing time, into `out` (capacity `len`).
 *
 * # Safety
 * `gen` must be a live handle and `out` must point to `len` writable values.
 */
enum PdgnStatus pdgn_generator_infer(const struct PdgnGenerator *gen,
                                     double c,
                                     double *out,
                                     size_t len);

/**
 * Releases a generator. Null is ignored.
 *
 * # Safety
 * `gen` must be null or a handle not yet freed.
 */
void pdgn_generator_free(struct PdgnGenerator *gen);

/**
 * Finite-difference reference solution on the `n x n` output grid.
 * `nx = 0` selects the default cell count and `cfl <= 0` the default
 * Courant number.
 *
 * # Safety
 * `out` must point to `len` writable values.
 */
enum PdgnStatus pdgn_solve(double c, size_t n, size_t nx, double cfl, double *out, size_t len);

/**
 * Discrete L2 norms of two `n x n` fields: writes `norm_g`, `norm_fd` and
 * `norm_delta` to `out[0..3]`.
 *
 * # Safety
 * `generated` and `reference` must point to `n*n` values, `out` to 3.
 */
enum PdgnStatus pdgn_norms(size_t n, const double *generated, const double *reference, double *out);

/**
 * Sample range `[start, end)` owned by `rank` in mini-batch `minibatch`
 * when `samples` samples in batches of `batch` are split over `workers`.
 * Counts that do not divide evenly are rounded as in training.
 *
 * # Safety
 * `start` and `end` must be valid pointers.
 */
enum PdgnStatus pdgn_shard(size_t samples,
                           size_t batch,
                           size_t workers,
                           size_t minibatch,
                           size_t rank,
                           size_t *start,
                           size_t *end);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PDEGEN_H */
