#ifndef NLEVAL_H
#define NLEVAL_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Status codes returned by every fallible function.
typedef enum NlStatus {
  NL_STATUS_OK = 0,
  NL_STATUS_NULL_POINTER = 1,
  NL_STATUS_DOMAIN = 2,
  NL_STATUS_PARAMETER = 3,
  NL_STATUS_SHAPE = 4,
  NL_STATUS_PRECONDITION = 5,
  NL_STATUS_CONVERGENCE = 6,
  NL_STATUS_NON_CONTRACTION = 7,
  NL_STATUS_PICARD = 8,
  NL_STATUS_TOLERANCE_NOT_REACHED = 9,
  NL_STATUS_RECOVERY = 10,
  NL_STATUS_CONFIG = 11,
  NL_STATUS_IO = 12,
  NL_STATUS_PANIC = 13,
} NlStatus;

// Modulus families; `param` supplies `c` for `Scaled` and `Rational`, `nu` for `Sqrt`.
typedef enum NlModulus {
  NL_MODULUS_IDENTITY = 0,
  NL_MODULUS_SCALED = 1,
  NL_MODULUS_SQRT = 2,
  NL_MODULUS_CAPPED_SQRT = 3,
  NL_MODULUS_RATIONAL = 4,
  NL_MODULUS_ZERO = 5,
} NlModulus;

// Sign of the extremal driver `+-(mu |y| + phi(|z|))`.
typedef enum NlSign {
  NL_SIGN_PLUS = 0,
  NL_SIGN_MINUS = 1,
} NlSign;

// Lattice evaluation backed by a generator.
typedef struct NlEvaluation NlEvaluation;

// Driver `g(t, y, z)` with its declared `(mu, phi)`.
typedef struct NlGenerator NlGenerator;

// Recombining binomial lattice.
typedef struct NlTree NlTree;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null if none.
//
// The pointer stays valid until the next failing call on the same thread.
const char *nl_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *nl_version(void);

// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum NlStatus nl_tree_new(double horizon, uintptr_t steps, struct NlTree **out);

// # Safety
// `tree` must be null or a handle from `nl_tree_new` not yet freed.
void nl_tree_free(struct NlTree *tree);

// Number of time steps, or 0 for a null handle.
//
// # Safety
// `tree` must be null or a live handle.
uintptr_t nl_tree_steps(const struct NlTree *tree);

// Total node count `(N + 1)(N + 2) / 2`, or 0 for a null handle.
//
// # Safety
// `tree` must be null or a live handle.
uintptr_t nl_tree_node_count(const struct NlTree *tree);

// Extremal driver `sign * (mu |y| + phi(|z|))`.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum NlStatus nl_generator_mu_phi(double mu,
                                  enum NlModulus kind,
                                  double param,
                                  enum NlSign sign,
                                  struct NlGenerator **out);

// Linear driver `a y + b z + c`.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum NlStatus nl_generator_linear(double a, double b, double c, struct NlGenerator **out);

// # Safety
// `g` must be null or a live generator handle.
void nl_generator_free(struct NlGenerator *g);

// Solves the BSDE to the horizon with terminal layer `terminal` (N + 1 values)
// and constant `dK = gamma dt`; writes `Y_0`.
//
// # Safety
// Handles must be live; `terminal` must hold `terminal_len` doubles and
// `out_y0` must be writable.
enum NlStatus nl_solve(const struct NlTree *tree,
                       const struct NlGenerator *g,
                       const double *terminal,
                       uintptr_t terminal_len,
                       double gamma,
                       double *out_y0);

// Same as `nl_solve` but writes every node, layer by layer (step 0 first),
// into `out`, which must hold `nl_tree_node_count(tree)` doubles.
//
// # Safety
// Handles must be live; `terminal` must hold `terminal_len` doubles and
// `out` must hold `out_len` writable doubles.
enum NlStatus nl_solve_layers(const struct NlTree *tree,
                              const struct NlGenerator *g,
                              const double *terminal,
                              uintptr_t terminal_len,
                              double gamma,
                              double *out,
                              uintptr_t out_len);

// Evaluation driven by a copy of `g` on a copy of `tree`.
//
// # Safety
// Handles must be live and `out` writable.
enum NlStatus nl_evaluation_new(const struct NlTree *tree,
                                const struct NlGenerator *g,
                                struct NlEvaluation **out);

// Replaces the declared `(mu, phi)` used by extraction and recovery.
//
// # Safety
// `e` must be a live evaluation handle.
enum NlStatus nl_evaluation_set_declared(struct NlEvaluation *e,
                                         double mu,
                                         enum NlModulus kind,
                                         double param);

// # Safety
// `e` must be null or a live evaluation handle.
void nl_evaluation_free(struct NlEvaluation *e);

// `E_{s,t}[X]` for `X` given on layer `t` (`t + 1` values); writes layer `s` (`s + 1` values).
//
// # Safety
// `e` must be live; `x` must hold `x_len` doubles and `out` `out_len` writable doubles.
enum NlStatus nl_evaluate(const struct NlEvaluation *e,
                          uintptr_t s,
                          uintptr_t t,
                          const double *x,
                          uintptr_t x_len,
                          double *out,
                          uintptr_t out_len);

// Runs the randomized axiom suite; writes 1 to `out_passed` if every check held.
//
// # Safety
// `e` must be live and `out_passed` writable.
enum NlStatus nl_check_axioms(const struct NlEvaluation *e,
                              uintptr_t trials,
                              uint64_t seed,
                              int32_t *out_passed);

// Local generator estimate at `(t_step, y, z)` from a window of `h_steps` steps.
//
// # Safety
// `e` must be live and `out` writable.
enum NlStatus nl_quick_recover(const struct NlEvaluation *e,
                               uintptr_t t_step,
                               double y,
                               double z,
                               uintptr_t h_steps,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NLEVAL_H */
