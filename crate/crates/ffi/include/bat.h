#ifndef BAT_H
#define BAT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result codes.
 */
typedef enum {
  BAT_STATUS_OK = 0,
  BAT_STATUS_NULL_POINTER = 1,
  BAT_STATUS_INVALID_UTF8 = 2,
  BAT_STATUS_BUFFER_TOO_SMALL = 3,
  BAT_STATUS_USAGE = 4,
  BAT_STATUS_CONFIG = 5,
  BAT_STATUS_DATA = 6,
  BAT_STATUS_PARSE = 7,
  BAT_STATUS_IO = 8,
  BAT_STATUS_DIMENSION = 9,
  BAT_STATUS_INDEX = 10,
  BAT_STATUS_PANIC = 11,
} BatStatus;

/**
 * Task codes used by [`bat_model_task`].
 */
typedef enum {
  BAT_TASK_AE = 0,
  BAT_TASK_ASC = 1,
} BatTask;

/**
 * Opaque model handle.
 */
typedef struct BatModel BatModel;

/**
 * Opaque vocabulary handle.
 */
typedef struct BatVocab BatVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next call into this library.
 */
const char *bat_last_error(void);

/**
 * Loads a vocabulary file (one token per line).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
BatStatus bat_vocab_load(const char *path, bool lowercase, BatVocab **out);

/**
 * # Safety
 * `vocab` must come from [`bat_vocab_load`] and not be used afterwards.
 */
void bat_vocab_free(BatVocab *vocab);

/**
 * Number of tokens, or 0 for a null handle.
 *
 * # Safety
 * `vocab` must be null or a live handle.
 */
size_t bat_vocab_len(const BatVocab *vocab);

/**
 * WordPiece ids for `text`, without special tokens. `*len` receives the
 * number of ids; when it exceeds `capacity` nothing is written and
 * `BufferTooSmall` is returned.
 *
 * # Safety
 * `ids` must hold `capacity` elements; the other pointers must be valid.
 */
BatStatus bat_tokenize(const BatVocab *vocab,
                       const char *text,
                       uint32_t *ids,
                       size_t capacity,
                       size_t *len);

/**
 * Loads a checkpoint written by training.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
BatStatus bat_model_load(const char *path, BatModel **out);

/**
 * # Safety
 * `model` must come from [`bat_model_load`] and not be used afterwards.
 */
void bat_model_free(BatModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
BatStatus bat_model_task(const BatModel *model, BatTask *out);

/**
 * Predicts for one sentence. Extraction models take `aspect = NULL` and
 * write one tag per word (0 = B, 1 = I, 2 = O); sentiment models take an
 * aspect and write one class (0 = positive, 1 = negative, 2 = neutral).
 * `*len` receives the number of values; when it exceeds `capacity`
 * nothing is written and `BufferTooSmall` is returned.
 *
 * # Safety
 * `labels` must hold `capacity` elements; the other pointers must be
 * valid, except `aspect`, which may be null.
 */
BatStatus bat_model_predict(const BatModel *model,
                            const BatVocab *vocab,
                            const char *text,
                            const char *aspect,
                            uint8_t *labels,
                            size_t capacity,
                            size_t *len);

/**
 * `r_adv = -epsilon * g / ||g||` per example over rows not flagged in
 * `excluded`. `g` and `r_out` are `[batch, seq, dim]` row-major;
 * `excluded` is `[batch, seq]` (non-zero = left unperturbed). `norms_out`
 * (`[batch]`) and `degenerate_out` (`[batch]`, 1 when the gradient norm
 * is too small to scale) may be null.
 *
 * # Safety
 * Buffers must hold the sizes described above.
 */
BatStatus bat_fgm_perturbation(const float *g,
                               size_t batch,
                               size_t seq,
                               size_t dim,
                               const uint8_t *excluded,
                               double epsilon,
                               float *r_out,
                               double *norms_out,
                               uint8_t *degenerate_out);

/**
 * Exact-match span precision, recall and F1. `pred` and `gold` hold the
 * tags of all sentences back to back (0 = B, 1 = I, 2 = O); `lengths`
 * gives each sentence's length.
 *
 * # Safety
 * `pred` and `gold` must each hold `sum(lengths)` values; outputs must
 * be valid pointers.
 */
BatStatus bat_span_f1(const uint8_t *pred,
                      const uint8_t *gold,
                      const size_t *lengths,
                      size_t sentences,
                      double *precision,
                      double *recall,
                      double *f1);

/**
 * # Safety
 * `pred` and `gold` must hold `n` values and `out` must be valid.
 */
BatStatus bat_accuracy(const uint32_t *pred, const uint32_t *gold, size_t n, double *out);

/**
 * Unweighted mean F1 over classes `0..classes` that occur in gold or
 * predictions.
 *
 * # Safety
 * `pred` and `gold` must hold `n` values and `out` must be valid.
 */
BatStatus bat_macro_f1(const uint32_t *pred,
                       const uint32_t *gold,
                       size_t n,
                       size_t classes,
                       double *out);

/**
 * Trains from a `key=value` config file and writes results to `out_dir`
 * (which overrides any `out` setting). Official dataset names are looked
 * up in the `data-dir` setting or the data directory environment variable.
 *
 * # Safety
 * Both arguments must be NUL-terminated strings.
 */
BatStatus bat_train(const char *config_path, const char *out_dir);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* BAT_H */
