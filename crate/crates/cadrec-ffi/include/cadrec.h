/* C interface to the cadrec referring-expression counting pipeline. */

#ifndef CADREC_H
#define CADREC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum CadrecStatus {
  /**
   * Success.
   */
  CadrecOk = 0,
  /**
   * A required pointer argument was NULL.
   */
  CadrecNullArgument = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  CadrecInvalidUtf8 = 2,
  /**
   * Invalid configuration, arguments, or file contents.
   */
  CadrecInvalid = 3,
  /**
   * The operating system reported an I/O failure.
   */
  CadrecIo = 4,
  /**
   * An internal invariant failed; see `cadrec_last_error`.
   */
  CadrecPanic = 5,
} CadrecStatus;

/**
 * Opaque configuration handle.
 */
typedef struct CadrecConfig CadrecConfig;

/**
 * Opaque trained-model handle: configuration, vocabulary, and loaded
 * parameters, ready for per-pair counting.
 */
typedef struct CadrecModel CadrecModel;

/**
 * Scene counts written by dataset generation.
 */
typedef struct CadrecGenCounts {
  uintptr_t n_train;
  uintptr_t n_val;
} CadrecGenCounts;

/**
 * Aggregate evaluation metrics.
 */
typedef struct CadrecMetrics {
  double mae;
  double rmse;
  double precision;
  double recall;
  double f1;
} CadrecMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; never freed.
 */
const char *cadrec_version(void);

/**
 * Message describing the most recent failure on this thread, or an
 * empty string. Valid until the next cadrec call on the same thread.
 */
const char *cadrec_last_error(void);

/**
 * Releases a string returned by this library.
 */
void cadrec_string_free(char *s);

/**
 * A configuration with every field at its default.
 */
struct CadrecConfig *cadrec_config_default(void);

/**
 * Parses configuration text (`key = value` under `[section]` headers).
 * Returns NULL and sets the error on any unknown or malformed line.
 */
struct CadrecConfig *cadrec_config_parse(const char *text);

/**
 * Reads and parses a configuration file.
 */
struct CadrecConfig *cadrec_config_load(const char *path);

/**
 * Canonical serialisation of the configuration; parsing it back yields
 * an identical configuration. Free with `cadrec_string_free`.
 */
char *cadrec_config_canonical(const struct CadrecConfig *cfg);

/**
 * Overrides the run seed.
 */
enum CadrecStatus cadrec_config_set_seed(struct CadrecConfig *cfg, uint64_t seed);

/**
 * Applies a cumulative stage preset (1 = bare decoder baseline through
 * 7 = every stage plus density-guided inference).
 */
enum CadrecStatus cadrec_config_set_ablation(struct CadrecConfig *cfg, uintptr_t row);

/**
 * Number of trainable scalars this configuration instantiates.
 */
enum CadrecStatus cadrec_config_param_count(const struct CadrecConfig *cfg, uintptr_t *out);

/**
 * Releases a configuration handle.
 */
void cadrec_config_free(struct CadrecConfig *cfg);

/**
 * Generates the train/validation scene datasets into `out_dir`
 * (`train.scenes`, `val.scenes`, plus a run manifest). Optionally
 * reports the split sizes.
 */
enum CadrecStatus cadrec_gen(const struct CadrecConfig *cfg,
                             const char *out_dir,
                             struct CadrecGenCounts *counts);

/**
 * Trains on a dataset file and writes the checkpoint, the metrics log
 * (`metrics` path, or the checkpoint path with a `.metrics` extension
 * when NULL), and a run manifest next to the checkpoint.
 */
enum CadrecStatus cadrec_train(const struct CadrecConfig *cfg,
                               const char *data,
                               const char *out_ckpt,
                               const char *metrics);

/**
 * Evaluates a checkpoint over every (scene, expression) pair in the
 * dataset and writes a report. `strategy` is "threshold", "density",
 * or NULL for the configuration's own switch. Optionally returns the
 * aggregate metrics.
 */
enum CadrecStatus cadrec_eval(const struct CadrecConfig *cfg,
                              const char *ckpt,
                              const char *data,
                              const char *strategy,
                              const char *out_report,
                              struct CadrecMetrics *out);

/**
 * Runs the full gradient-checking suite. `*out_ok` reports whether
 * every case passed; the per-case report text is returned through
 * `out_text` when non-NULL (free with `cadrec_string_free`).
 */
enum CadrecStatus cadrec_gradcheck(const struct CadrecConfig *cfg, bool *out_ok, char **out_text);

/**
 * Exports the predicted and ground-truth density maps for one
 * (scene, expression) pair under `out_prefix` as binary tensors and
 * 8-bit graymaps.
 */
enum CadrecStatus cadrec_export_density(const struct CadrecConfig *cfg,
                                        const char *ckpt,
                                        const char *data,
                                        uintptr_t scene_idx,
                                        uintptr_t expr_idx,
                                        const char *out_prefix);

/**
 * Loads a trained checkpoint into a ready-to-count model handle. The
 * configuration must match the one the checkpoint was trained with.
 */
struct CadrecModel *cadrec_model_load(const struct CadrecConfig *cfg, const char *ckpt);

/**
 * Counts the objects matching one expression of one scene in a dataset
 * file. `strategy` is "threshold", "density", or NULL for the model
 * configuration's switch.
 */
enum CadrecStatus cadrec_model_count(const struct CadrecModel *model,
                                     const char *data,
                                     uintptr_t scene_idx,
                                     uintptr_t expr_idx,
                                     const char *strategy,
                                     double *out_count);

/**
 * Releases a model handle.
 */
void cadrec_model_free(struct CadrecModel *model);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* CADREC_H */
