#ifndef CAFT_H
#define CAFT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes shared with the CLI: 0 ok, 2 usage, 3 I/O, 4 numeric,
 * 5 compatibility.
 */
#define CAFT_OK 0

#define CAFT_ERR_USAGE 2

#define CAFT_ERR_IO 3

#define CAFT_ERR_NUMERIC 4

#define CAFT_ERR_COMPAT 5

/**
 * Loaded model: parameters, config, variant, vocabulary.
 */
typedef struct CaftModel CaftModel;

/**
 * Load a model from a checkpoint plus its vocabulary file and preset name
 * ("desk" or "paper"). Returns null on failure; call `caft_last_error`.
 *
 * # Safety
 * All pointers must be valid NUL-terminated UTF-8 strings.
 */
struct CaftModel *caft_model_load(const char *ckpt_path,
                                  const char *vocab_path,
                                  const char *preset);

/**
 * Message for the most recent failure on this thread. Valid until the next
 * failing call.
 */
const char *caft_last_error(void);

/**
 * Blended similarity between an image (binary PPM path) and a caption.
 * Writes the score through `out_score` and returns a status code.
 *
 * # Safety
 * `model` must come from `caft_model_load`; strings as in `caft_model_load`;
 * `out_score` must point to a writable f64.
 */
int32_t caft_score(const struct CaftModel *model,
                   const char *image_path,
                   const char *caption,
                   double alpha,
                   double *out_score);

/**
 * Ground a query against an image, writing heatmap and mask PGMs.
 *
 * # Safety
 * Pointer contracts as in `caft_score`.
 */
int32_t caft_ground(const struct CaftModel *model,
                    const char *image_path,
                    const char *query,
                    const char *heatmap_out,
                    const char *mask_out);

/**
 * Release a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must come from `caft_model_load` and not be used afterwards.
 */
void caft_model_free(struct CaftModel *model);

#endif  /* CAFT_H */
