/* C interface to the srusk time-dependent mechanics engine. */

#ifndef SRUSK_H
#define SRUSK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible entry point. The numeric values
// 0/2/3/4/5 mirror the srusk CLI exit codes.
typedef enum SruskStatus {
  SRUSK_STATUS_OK = 0,
  SRUSK_STATUS_MODEL_ERROR = 2,
  SRUSK_STATUS_NON_STABILIZING = 3,
  SRUSK_STATUS_BAD_INITIAL_CONDITION = 4,
  SRUSK_STATUS_VERIFY_FAILED = 5,
  SRUSK_STATUS_NULL_ARGUMENT = 10,
  SRUSK_STATUS_INVALID_UTF8 = 11,
  SRUSK_STATUS_PANIC = 12,
} SruskStatus;

// Opaque handle to a parsed model.
typedef struct SruskModel SruskModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version string (static storage, do not free).
const char *srusk_version(void);

// Message for the most recent error on this thread (thread-local storage,
// valid until the next failing call on the same thread; do not free).
const char *srusk_last_error(void);

// Release a string allocated by this library.
//
// # Safety
// `s` must be a pointer previously returned through an out-parameter of this
// library and not yet freed.
void srusk_string_free(char *s);

// Parse a `.lag` model definition into an opaque handle.
//
// # Safety
// `source` must be a valid NUL-terminated string; `out_model` must be a
// valid writable pointer.
enum SruskStatus srusk_model_parse(const char *source, struct SruskModel **out_model);

// Release a model handle.
//
// # Safety
// `model` must come from [`srusk_model_parse`] and not be used afterwards.
void srusk_model_free(struct SruskModel *model);

// Fibre dimension n of the model, or -1 for a null handle.
//
// # Safety
// `model` must be null or a live handle from [`srusk_model_parse`].
int32_t srusk_model_dim(const struct SruskModel *model);

// Run the constraint algorithm and vector-field solve; writes the analysis
// report as a JSON string.
//
// # Safety
// `model` must be a live handle and `out_json` a valid writable pointer.
enum SruskStatus srusk_model_analyze_json(const struct SruskModel *model,
                                          uint64_t seed,
                                          char **out_json);

// Integrate the flow from an initial condition `(t0, q.., qd..)` of length
// 2n+1 and write the trajectory as a CSV string. `bindings_json` may be
// null or a JSON object binding free parameters, e.g. `{"u1": 0.0}`;
// unbound free parameters default to 0.
//
// # Safety
// `model` must be a live handle, `ic` must point to `ic_len` doubles,
// `bindings_json` must be null or NUL-terminated, and `out_csv` must be a
// valid writable pointer.
enum SruskStatus srusk_model_simulate_csv(const struct SruskModel *model,
                                          const double *ic,
                                          size_t ic_len,
                                          double h,
                                          double horizon,
                                          const char *bindings_json,
                                          char **out_csv);

// Run the verification suite and write the report as a JSON string. Returns
// `Ok` when every check passed, `VerifyFailed` otherwise (the report is
// written in both cases).
//
// # Safety
// `model` must be a live handle and `out_json` a valid writable pointer.
enum SruskStatus srusk_model_verify_json(const struct SruskModel *model,
                                         uint64_t seed,
                                         size_t points,
                                         char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SRUSK_H */
