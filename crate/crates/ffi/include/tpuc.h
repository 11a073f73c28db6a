#ifndef TPUC_H
#define TPUC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>

// Result code of every fallible call.
typedef enum TpucStatus {
  TPUC_STATUS_OK = 0,
  // Null pointer, bad UTF-8, unknown mode or chip name, short buffer.
  TPUC_STATUS_INVALID_ARGUMENT = 1,
  TPUC_STATUS_IO = 2,
  // Malformed graph, module text, archive, calibration table or program.
  TPUC_STATUS_PARSE = 3,
  // The module failed verification or is in the wrong state.
  TPUC_STATUS_VERIFY = 4,
  // Op, attribute, dtype, cast or mode the compiler does not handle.
  TPUC_STATUS_UNSUPPORTED = 5,
  // Weight or input missing, mis-shaped or non-finite.
  TPUC_STATUS_DATA = 6,
  // Device memory exhausted or a codegen failure.
  TPUC_STATUS_COMPILE = 7,
  // The simulator faulted.
  TPUC_STATUS_DEVICE = 8,
  // A Rust panic was caught at the boundary.
  TPUC_STATUS_INTERNAL = 9,
} TpucStatus;

// A compiler module in any state.
typedef struct TpucModule TpucModule;

// A compiled `.tpm` program.
typedef struct TpucProgram TpucProgram;

// A set of named tensors.
typedef struct TpucTensors TpucTensors;

// Library version, static storage.
const char *tpuc_version(void);

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call on the same thread.
const char *tpuc_last_error(void);

// Short name of a status code, static storage.
const char *tpuc_status_name(enum TpucStatus status);

// Imports a JSON interchange graph and its NPZ weights.
//
// # Safety
// Paths must be valid C strings; `out` must be writable.
enum TpucStatus tpuc_module_import(const char *graph_json,
                                   const char *weights_npz,
                                   struct TpucModule **out_module);

// Loads a `.tmir` module and the weight file it names.
//
// # Safety
// `path` must be a valid C string; `out` must be writable.
enum TpucStatus tpuc_module_load(const char *path, struct TpucModule **out_module);

// Writes a module as `.tmir` text plus its weight file.
//
// # Safety
// `module` must come from this library; `path` must be a valid C string.
enum TpucStatus tpuc_module_save(const struct TpucModule *module, const char *path);

// # Safety
// `module` must come from this library or be null; it is invalid afterwards.
void tpuc_module_free(struct TpucModule *module);

// Builds a calibration table from `n` sample input sets and writes it to
// `table_path`. `method` is `kl`, `minmax` or `percentile:<q>`.
//
// # Safety
// `samples` must point to `n` valid tensor handles.
enum TpucStatus tpuc_calibrate(const struct TpucModule *module,
                               const struct TpucTensors *const *samples,
                               size_t n,
                               const char *method,
                               const char *table_path);

// Compiles `module` to a program. `mode` is `F32`, `BF16`, `F16` or `INT8`;
// `chip` names a registered chip or is null for the default. INT8 needs
// `calib_table`; it is ignored otherwise and may be null.
//
// # Safety
// Handles must come from this library; strings must be valid or null where
// allowed.
enum TpucStatus tpuc_deploy(const struct TpucModule *module,
                            const char *mode,
                            const char *chip,
                            const char *calib_table,
                            bool asymmetric,
                            struct TpucProgram **out_program);

// # Safety
// `path` must be a valid C string; `out` must be writable.
enum TpucStatus tpuc_program_load(const char *path, struct TpucProgram **out_program);

// # Safety
// `program` must come from this library; `path` must be a valid C string.
enum TpucStatus tpuc_program_save(const struct TpucProgram *program, const char *path);

// Number of commands in the program's stream, or 0 for null.
//
// # Safety
// `program` must come from this library or be null.
size_t tpuc_program_num_commands(const struct TpucProgram *program);

// # Safety
// `program` must come from this library or be null; it is invalid afterwards.
void tpuc_program_free(struct TpucProgram *program);

// Executes `program` on the simulator. Outputs come back as F32, BF16 or
// F16 tensors named after the program outputs.
//
// # Safety
// Handles must come from this library; `out` must be writable.
enum TpucStatus tpuc_run(const struct TpucProgram *program,
                         const struct TpucTensors *inputs,
                         struct TpucTensors **out_tensors);

// # Safety
// `out` must be writable.
enum TpucStatus tpuc_tensors_new(struct TpucTensors **out_tensors);

// # Safety
// `path` must be a valid C string; `out` must be writable.
enum TpucStatus tpuc_tensors_load_npz(const char *path, struct TpucTensors **out_tensors);

// # Safety
// `tensors` must come from this library; `path` must be a valid C string.
enum TpucStatus tpuc_tensors_save_npz(const struct TpucTensors *tensors, const char *path);

// Number of tensors in the set, or 0 for null.
//
// # Safety
// `tensors` must come from this library or be null.
size_t tpuc_tensors_len(const struct TpucTensors *tensors);

// Inserts or replaces an F32 tensor of `rank` dims and `len` values.
//
// # Safety
// `shape` must hold `rank` values and `data` `len` values.
enum TpucStatus tpuc_tensors_set_f32(struct TpucTensors *tensors,
                                     const char *name,
                                     const size_t *shape,
                                     size_t rank,
                                     const float *data,
                                     size_t len);

// Copies tensor `name` as F32 into `buf`. `out_len` always receives the
// element count; a `buf` shorter than that fails with InvalidArgument
// after setting `out_len`, so callers may query with `cap = 0`.
//
// # Safety
// `buf` must hold `cap` values; `out_len` must be writable.
enum TpucStatus tpuc_tensors_get_f32(const struct TpucTensors *tensors,
                                     const char *name,
                                     float *buf,
                                     size_t cap,
                                     size_t *out_len);

// Writes the rank of tensor `name` to `out_rank` and up to `cap` dims to
// `dims`.
//
// # Safety
// `dims` must hold `cap` values; `out_rank` must be writable.
enum TpucStatus tpuc_tensors_shape(const struct TpucTensors *tensors,
                                   const char *name,
                                   size_t *dims,
                                   size_t cap,
                                   size_t *out_rank);

// # Safety
// `tensors` must come from this library or be null; it is invalid afterwards.
void tpuc_tensors_free(struct TpucTensors *tensors);

// Cosine similarity of two length-`n` vectors.
//
// # Safety
// `x` and `y` must hold `n` values; `out` must be writable.
enum TpucStatus tpuc_cosine_similarity(const float *x, const float *y, size_t n, double *out);

// Euclidean similarity `1 - |x-y| / |(x+y)/2|` of two length-`n` vectors.
//
// # Safety
// `x` and `y` must hold `n` values; `out` must be writable.
enum TpucStatus tpuc_euclidean_similarity(const float *x, const float *y, size_t n, double *out);

#endif  /* TPUC_H */
