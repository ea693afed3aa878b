#ifndef ORDFIX_H
#define ORDFIX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum OrdfixStatus {
  ORDFIX_STATUS_OK = 0,
  ORDFIX_STATUS_NULL_POINTER = 1,
  ORDFIX_STATUS_INVALID_UTF8 = 2,
  ORDFIX_STATUS_PARSE = 3,
  ORDFIX_STATUS_IO = 4,
  ORDFIX_STATUS_INVALID = 5,
  // The run finished without a fixed point.
  ORDFIX_STATUS_DIVERGED = 6,
  // A directive's expectation was not met.
  ORDFIX_STATUS_UNMET = 7,
  ORDFIX_STATUS_PANIC = 8,
} OrdfixStatus;

// An ordinal below ε₀.
typedef struct OrdfixOrdinal OrdfixOrdinal;

// A loaded scenario.
typedef struct OrdfixScenario OrdfixScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *ordfix_last_error(void);

// Frees a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void ordfix_string_free(char *s);

// Parses an ordinal such as `w^2*3 + w + 1`.
//
// # Safety
// `text` must be a nul-terminated string; `out` must be writable.
enum OrdfixStatus ordfix_ordinal_parse(const char *text, struct OrdfixOrdinal **out);

// Writes -1, 0 or 1 to `out` as `a` is less than, equal to or greater than
// `b`.
//
// # Safety
// `a` and `b` must be live handles; `out` must be writable.
enum OrdfixStatus ordfix_ordinal_compare(const struct OrdfixOrdinal *a,
                                         const struct OrdfixOrdinal *b,
                                         int32_t *out);

// Ordinal sum `a + b` as a new handle.
//
// # Safety
// `a` and `b` must be live handles; `out` must be writable.
enum OrdfixStatus ordfix_ordinal_add(const struct OrdfixOrdinal *a,
                                     const struct OrdfixOrdinal *b,
                                     struct OrdfixOrdinal **out);

// Canonical text of an ordinal; free it with [`ordfix_string_free`].
//
// # Safety
// `a` must be a live handle; `out` must be writable.
enum OrdfixStatus ordfix_ordinal_to_string(const struct OrdfixOrdinal *a, char **out);

// Frees an ordinal handle. Null is ignored.
//
// # Safety
// `a` must come from this library and not be freed twice.
void ordfix_ordinal_free(struct OrdfixOrdinal *a);

// Loads and validates a scenario file with its own defaults.
//
// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum OrdfixStatus ordfix_scenario_load(const char *path, struct OrdfixScenario **out);

// Runs every directive. Artifacts are written to `out_dir` unless it is
// null. Returns `ORDFIX_STATUS_UNMET` when some directive's expectation
// failed.
//
// # Safety
// `scenario` must be a live handle; `out_dir` is null or a nul-terminated
// string.
enum OrdfixStatus ordfix_scenario_run(const struct OrdfixScenario *scenario, const char *out_dir);

// Frees a scenario handle. Null is ignored.
//
// # Safety
// `scenario` must come from this library and not be freed twice.
void ordfix_scenario_free(struct OrdfixScenario *scenario);

// Fixed point of `x ↦ A x + b` on ℝⁿ, where `A` is row-major `n × n` and
// declared a contraction with the given factor in (0, 1). Iterates from
// `initial` and writes the certified value to `out` (length `n`). When
// `closure` is not null it receives the closure ordinal.
//
// # Safety
// `matrix` must hold `n * n` doubles, `offset`, `initial` and `out` `n`
// each; `closure` is null or writable.
enum OrdfixStatus ordfix_affine_fixpoint(uintptr_t n,
                                         const double *matrix,
                                         const double *offset,
                                         double factor,
                                         const double *initial,
                                         double *out,
                                         struct OrdfixOrdinal **closure);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ORDFIX_H */
