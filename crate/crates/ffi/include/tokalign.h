#ifndef TOKALIGN_H
#define TOKALIGN_H

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

#define TOKALIGN_OK 0

// A required pointer argument was null.
#define TOKALIGN_ERR_NULL 1

// Bad shapes, weights or settings.
#define TOKALIGN_ERR_INPUT 2

// The solver diverged or produced non-finite values.
#define TOKALIGN_ERR_NUMERICAL 3

// A Rust panic was caught at the boundary. Indicates a library bug.
#define TOKALIGN_ERR_PANIC 4

#define TOKALIGN_SIDE_IMAGE 0

#define TOKALIGN_SIDE_CLASS 1

#define TOKALIGN_COST_ADDITIVE 0

#define TOKALIGN_COST_CONVEX 1

// Class prompt sets scored together by [`tokalign_classify`].
typedef struct TokalignClassBank TokalignClassBank;

// Prompt features for one image or one class.
typedef struct TokalignPromptSet TokalignPromptSet;

typedef struct TokalignAlignConfig {
  double beta;
  double tau;
  double lambda;
  size_t max_iterations;
  double tolerance;
  bool accelerated;
  // `TOKALIGN_COST_ADDITIVE` or `TOKALIGN_COST_CONVEX`.
  int32_t cost_mode;
} TokalignAlignConfig;

typedef struct TokalignSinkhornResult {
  double transport_cost;
  double regularized_objective;
  double marginal_violation;
  size_t iterations;
  bool converged;
} TokalignSinkhornResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread, or null.
//
// The string is owned by the library and stays valid until the next call
// into the library from the same thread.
const char *tokalign_last_error(void);

// Library defaults for the alignment settings.
struct TokalignAlignConfig tokalign_align_config_default(void);

// Entropic OT between weights `a` (length `m`) and `b` (length `n`) under
// the `m x n` cost. `plan_out` may be null; otherwise it receives `m * n`
// values.
//
// # Safety
// Every non-null pointer must be valid for the lengths implied by `m` and
// `n`.
int32_t tokalign_sinkhorn(const double *cost,
                          size_t m,
                          size_t n,
                          const double *a,
                          const double *b,
                          double lambda,
                          size_t max_iterations,
                          double tolerance,
                          double *plan_out,
                          struct TokalignSinkhornResult *result_out);

// Unregularized OT between uniform measures on `n` points each, by
// enumeration. Small `n` only.
//
// # Safety
// `cost` must hold `n * n` values; `plan_out`, if non-null, must have room
// for `n * n`.
int32_t tokalign_exact_ot_uniform(const double *cost, size_t n, double *plan_out, double *cost_out);

// Build a prompt set of `count` prompts in dimension `dim`.
//
// `globals` holds `count * dim` values. Prompt `i` has `token_counts[i]`
// token rows, stored consecutively in `tokens`. All vectors are scaled to
// unit length; a zero vector is rejected.
//
// # Safety
// The arrays must be valid for the lengths above and `out` must be writable.
int32_t tokalign_prompt_set_new(int32_t side,
                                size_t count,
                                size_t dim,
                                const size_t *token_counts,
                                const double *globals,
                                const double *tokens,
                                struct TokalignPromptSet **out);

// Number of prompts in `set`, or 0 for null.
//
// # Safety
// `set` must be null or a live handle.
size_t tokalign_prompt_set_len(const struct TokalignPromptSet *set);

// # Safety
// `set` must be null or a handle not yet freed.
void tokalign_prompt_set_free(struct TokalignPromptSet *set);

// Copy `count` class-side prompt sets into a new bank.
//
// # Safety
// `classes` must point to `count` live handles; `out` must be writable.
int32_t tokalign_class_bank_new(const struct TokalignPromptSet *const *classes,
                                size_t count,
                                struct TokalignClassBank **out);

// Number of classes in `bank`, or 0 for null.
//
// # Safety
// `bank` must be null or a live handle.
size_t tokalign_class_bank_len(const struct TokalignClassBank *bank);

// # Safety
// `bank` must be null or a handle not yet freed.
void tokalign_class_bank_free(struct TokalignClassBank *bank);

// Prompt-level OT distance between an image set and a class set.
//
// # Safety
// Handles and `config` must be live; `distance_out` must be writable.
int32_t tokalign_hierarchical_distance(const struct TokalignPromptSet *image,
                                       const struct TokalignPromptSet *class_,
                                       const struct TokalignAlignConfig *config,
                                       double *distance_out);

// Class probabilities for one image. `len` must equal the bank size.
// `predicted_out` may be null.
//
// # Safety
// Handles and `config` must be live; `probabilities_out` must have room for
// `len` values.
int32_t tokalign_classify(const struct TokalignPromptSet *image,
                          const struct TokalignClassBank *bank,
                          const struct TokalignAlignConfig *config,
                          double *probabilities_out,
                          size_t len,
                          size_t *predicted_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TOKALIGN_H */
