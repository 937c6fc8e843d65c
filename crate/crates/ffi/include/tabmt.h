#ifndef TABMT_H
#define TABMT_H

#include <stddef.h>
#include <stdint.h>

/*
 Result codes.
 */
typedef enum TabmtStatus {
  TABMT_STATUS_OK = 0,
  TABMT_STATUS_NULL_POINTER = 1,
  TABMT_STATUS_INVALID_UTF8 = 2,
  TABMT_STATUS_IO = 3,
  TABMT_STATUS_INVALID_ARGUMENT = 4,
  TABMT_STATUS_CHECKPOINT = 5,
  TABMT_STATUS_DATA = 6,
  TABMT_STATUS_PANIC = 7,
} TabmtStatus;

/*
 A loaded model with its codecs.
 */
typedef struct TabmtModel TabmtModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *tabmt_version(void);

/*
 Message of the last failed call on this thread; empty after a success.
 Valid until the next call on this thread.
 */
const char *tabmt_last_error(void);

/*
 Loads a checkpoint file into a new handle stored in `*out`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TabmtStatus tabmt_model_load(const char *path, struct TabmtModel **out);

/*
 Releases a handle. Null is ignored.

 # Safety
 `model` must come from [`tabmt_model_load`] and not be freed twice.
 */
void tabmt_model_free(struct TabmtModel *model);

/*
 Number of fields (columns) the model covers.

 # Safety
 `model` must be a live handle and `out` a valid pointer.
 */
enum TabmtStatus tabmt_model_num_fields(const struct TabmtModel *model, size_t *out);

/*
 Writes `count` synthetic rows to a CSV at `out_path`. `temps` holds one
 temperature per field, or is null with `n_temps == 0` for all ones.

 # Safety
 Pointers must be valid; `temps` must hold `n_temps` doubles.
 */
enum TabmtStatus tabmt_generate_csv(const struct TabmtModel *model,
                                    size_t count,
                                    const double *temps,
                                    size_t n_temps,
                                    uint64_t seed,
                                    const char *out_path);

/*
 Fills the empty cells of the CSV at `in_path` and writes the result to
 `out_path`. Sampling uses temperature one.

 # Safety
 Pointers must be valid NUL-terminated strings.
 */
enum TabmtStatus tabmt_impute_csv(const struct TabmtModel *model,
                                  const char *in_path,
                                  const char *out_path,
                                  uint64_t seed);

/*
 Median distance from each synthetic row to its nearest training row.

 # Safety
 Pointers must be valid; `out` receives the result.
 */
enum TabmtStatus tabmt_dcr_csv(const struct TabmtModel *model,
                               const char *train_path,
                               const char *synth_path,
                               double *out);

/*
 Runs the netflow checks on `data_path` and stores a JSON report in
 `*out_json`, to be released with [`tabmt_string_free`]. `train_path` may
 be null, which disables the valid-values rule.

 # Safety
 Pointers must be valid; `out_json` receives an owned string.
 */
enum TabmtStatus tabmt_flowcheck_csv(const char *data_path,
                                     const char *train_path,
                                     char **out_json);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not be freed twice.
 */
void tabmt_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TABMT_H */
