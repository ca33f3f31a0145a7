#ifndef NOETHER_H
#define NOETHER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Which half of a dataset to address.
typedef enum {
  NOETHER_SPLIT_TRAIN = 0,
  NOETHER_SPLIT_TEST = 1,
} NoetherSplit;

typedef enum {
  NOETHER_STATUS_OK = 0,
  NOETHER_STATUS_NULL_POINTER = 1,
  NOETHER_STATUS_INVALID_ARGUMENT = 2,
  NOETHER_STATUS_IO = 3,
  NOETHER_STATUS_DOMAIN = 4,
  NOETHER_STATUS_BUFFER_TOO_SMALL = 5,
  NOETHER_STATUS_PANIC = 6,
} NoetherStatus;

typedef struct NoetherCheckpoint NoetherCheckpoint;

typedef struct NoetherDataset NoetherDataset;

typedef struct NoetherFormula NoetherFormula;

// Inputs of the generalization bound; `conserved != 0` selects ξ = m.
typedef struct {
  double c;
  double r;
  double zeta;
  uint32_t rho;
  double delta;
  uint64_t n;
  uint32_t d;
  uint32_t m;
  int32_t conserved;
} NoetherBoundInputs;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL
// terminated, truncated to `cap`) and returns its full length in bytes.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
uintptr_t noether_last_error(char *buf, uintptr_t cap);

// Static NUL-terminated version string.
const char *noether_version(void);

// Simulates a dataset with the default sampling settings.
//
// # Safety
// `system` must be a NUL-terminated string and `out` a valid pointer.
NoetherStatus noether_dataset_generate(const char *system,
                                       uint64_t seed,
                                       uint32_t train_trajectories,
                                       uint32_t test_trajectories,
                                       NoetherDataset **out);

// Loads `train.csv`/`test.csv` from a directory, or splits a single CSV.
//
// # Safety
// `system` and `path` must be NUL-terminated strings and `out` valid.
NoetherStatus noether_dataset_load(const char *system, const char *path, NoetherDataset **out);

// # Safety
// `ds` must be a live dataset handle and `out` valid.
NoetherStatus noether_dataset_num_trajectories(const NoetherDataset *ds,
                                               NoetherSplit which,
                                               uintptr_t *out);

// Number of states in trajectory `index`.
//
// # Safety
// `ds` must be a live dataset handle and `out` valid.
NoetherStatus noether_dataset_trajectory_len(const NoetherDataset *ds,
                                             NoetherSplit which,
                                             uintptr_t index,
                                             uintptr_t *out);

// Writes trajectory `index` as interleaved `q, p` pairs into `buf`
// (`cap` doubles). Needs `2 × len` doubles.
//
// # Safety
// `ds` must be a live dataset handle and `buf` point to `cap` doubles.
NoetherStatus noether_dataset_copy_states(const NoetherDataset *ds,
                                          NoetherSplit which,
                                          uintptr_t index,
                                          double *buf,
                                          uintptr_t cap);

// # Safety
// `ds` must be null or a handle not yet freed.
void noether_dataset_free(NoetherDataset *ds);

// Loads a predictor checkpoint written by `train-baseline`,
// `train-noether` or `discover`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` valid.
NoetherStatus noether_checkpoint_load(const char *path, NoetherCheckpoint **out);

// 1 when the checkpoint carries a conservation embedding, 0 otherwise.
//
// # Safety
// `ck` must be a live checkpoint handle and `out` valid.
NoetherStatus noether_checkpoint_has_embedding(const NoetherCheckpoint *ck, int32_t *out);

// Predicted time derivative `(dq, dp)` at `(q, p)`.
//
// # Safety
// `ck` must be a live checkpoint handle; `dq` and `dp` valid.
NoetherStatus noether_checkpoint_derivative(const NoetherCheckpoint *ck,
                                            double q,
                                            double p,
                                            double *dq,
                                            double *dp);

// Euler rollout of `horizon` steps from `(q0, p0)` with the checkpoint's
// step size; writes the `horizon` predicted states after the start as
// interleaved `q, p`. With `tailored != 0` the predictor is first adapted
// to the start state with one Noether inner step.
//
// # Safety
// `ck` must be a live checkpoint handle and `buf` point to `cap` doubles.
NoetherStatus noether_checkpoint_rollout(const NoetherCheckpoint *ck,
                                         double q0,
                                         double p0,
                                         uintptr_t horizon,
                                         int32_t tailored,
                                         double *buf,
                                         uintptr_t cap);

// # Safety
// `ck` must be null or a handle not yet freed.
void noether_checkpoint_free(NoetherCheckpoint *ck);

// Parses a formula in S-expression form, e.g.
// `(add (sq (in 1)) (mul (par p^2) (cos (in 0))))`, and checks its units.
//
// # Safety
// `system` and `sexpr` must be NUL-terminated strings and `out` valid.
NoetherStatus noether_formula_parse(const char *system, const char *sexpr, NoetherFormula **out);

// # Safety
// `f` must be a live formula handle and `out` valid.
NoetherStatus noether_formula_param_count(const NoetherFormula *f, uintptr_t *out);

// Evaluates the formula at `(q, p)` with `n_params` parameter values.
//
// # Safety
// `f` must be a live formula handle, `params` point to `n_params`
// doubles (may be null when zero) and `out` valid.
NoetherStatus noether_formula_eval(const NoetherFormula *f,
                                   const double *params,
                                   uintptr_t n_params,
                                   double q,
                                   double p,
                                   double *out);

// # Safety
// `f` must be null or a handle not yet freed.
void noether_formula_free(NoetherFormula *f);

// Evaluates the generalization bound.
//
// # Safety
// `inputs` and `out` must be valid pointers.
NoetherStatus noether_bound_eval(const NoetherBoundInputs *inputs, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NOETHER_H */
