/* C interface for the imontage generation and evaluation pipeline. */

#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. `IMTG_STATUS_OK` is zero; anything else
 * leaves a message readable through `imtg_last_error`.
 */
typedef enum ImtgStatus {
  /**
   * The call succeeded.
   */
  IMTG_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  IMTG_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  IMTG_STATUS_INVALID_UTF8 = 2,
  /**
   * An argument was outside the function's domain (empty image, zero
   * output count, too few frames for a pairwise score, ...).
   */
  IMTG_STATUS_INVALID_ARGUMENT = 3,
  /**
   * The config JSON was rejected, or a checkpoint was written under a
   * different config.
   */
  IMTG_STATUS_CONFIG = 4,
  /**
   * The filesystem failed.
   */
  IMTG_STATUS_IO = 5,
  /**
   * An internal failure: corrupt checkpoint bytes or a caught panic.
   */
  IMTG_STATUS_RUNTIME = 6,
} ImtgStatus;

/**
 * Opaque handle owning the frames produced by one sampling call.
 */
typedef struct ImtgFrames ImtgFrames;

/**
 * Opaque handle holding a parsed run config plus model parameters.
 */
typedef struct ImtgModel ImtgModel;

/**
 * Borrowed view of one interleaved RGB float image, row-major, `h*w*3`
 * samples in `[0, 1]`. The caller keeps ownership of `data`.
 */
typedef struct ImtgImageView {
  const float *data;
  size_t h;
  size_t w;
} ImtgImageView;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version of the library, as a static NUL-terminated string.
 */
const char *imtg_version(void);

/**
 * Message describing this thread's most recent failure, empty until one
 * occurs. The pointer stays valid until the next failing call on the same
 * thread.
 */
const char *imtg_last_error(void);

/**
 * Build a model with freshly initialized parameters.
 *
 * `config_json` is a run-config document; `{}` selects every default. The
 * parameters are drawn exactly as training initialization draws them, from
 * the config seed, so a fresh handle matches step zero of a training run.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` a valid pointer;
 * on OK the caller owns `*out` and must release it with `imtg_model_free`.
 */
enum ImtgStatus imtg_model_new(const char *config_json, struct ImtgModel **out);

/**
 * Build a model from a checkpoint written under the same config.
 *
 * The checkpoint must carry the digest of `config_json` as parsed — the one
 * the command-line `train` stamps — otherwise the call fails with
 * `IMTG_STATUS_CONFIG`.
 *
 * # Safety
 * Both strings must be NUL-terminated and `out` a valid pointer; on OK the
 * caller owns `*out` and must release it with `imtg_model_free`.
 */
enum ImtgStatus imtg_model_load(const char *config_json,
                                const char *checkpoint_path,
                                struct ImtgModel **out);

/**
 * Number of scalar parameters in the model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle from `imtg_model_new`/`_load`.
 */
uint64_t imtg_model_param_count(const struct ImtgModel *model);

/**
 * Training step the parameters were saved at (0 for a fresh model or a null
 * handle).
 *
 * # Safety
 * `model` must be null or a live handle from `imtg_model_new`/`_load`.
 */
uint64_t imtg_model_step(const struct ImtgModel *model);

/**
 * Release a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must be null or a live handle, and must not be used afterwards.
 */
void imtg_model_free(struct ImtgModel *model);

/**
 * Generate `n_out` frames of `out_h` x `out_w` pixels conditioned on the
 * reference images and the instruction.
 *
 * Sampler settings and the position-layout strategy come from the model's
 * config; `seed` alone controls the noise, so equal arguments reproduce
 * equal frames bit for bit. Both output sides must be multiples of the
 * model's patch size.
 *
 * # Safety
 * `refs` must point to `n_refs` valid views, `instruction` must be
 * NUL-terminated, and `out` must be a valid pointer; on OK the caller owns
 * `*out` and must release it with `imtg_frames_free`.
 */
enum ImtgStatus imtg_sample(const struct ImtgModel *model,
                            const struct ImtgImageView *refs,
                            size_t n_refs,
                            const char *instruction,
                            size_t n_out,
                            size_t out_h,
                            size_t out_w,
                            uint64_t seed,
                            struct ImtgFrames **out);

/**
 * Number of frames in the handle, or 0 for null.
 *
 * # Safety
 * `frames` must be null or a live handle from `imtg_sample`.
 */
size_t imtg_frames_len(const struct ImtgFrames *frames);

/**
 * Borrow frame `index` as a view into the handle's storage. The view stays
 * valid until `imtg_frames_free`.
 *
 * # Safety
 * `frames` must be a live handle and `out` a valid pointer.
 */
enum ImtgStatus imtg_frames_view(const struct ImtgFrames *frames,
                                 size_t index,
                                 struct ImtgImageView *out);

/**
 * Release a frames handle. Null is a no-op.
 *
 * # Safety
 * `frames` must be null or a live handle, and must not be used afterwards.
 */
void imtg_frames_free(struct ImtgFrames *frames);

/**
 * Identity-preservation score: mean cosine similarity between every
 * generated/reference embedding pair, full-frame embeddings. 1.0 when the
 * sets are identical.
 *
 * # Safety
 * `gen` and `refs` must point to `n_gen` / `n_refs` valid views and `out`
 * must be a valid pointer.
 */
enum ImtgStatus imtg_ip_score(const struct ImtgImageView *gen,
                              size_t n_gen,
                              const struct ImtgImageView *refs,
                              size_t n_refs,
                              double *out);

/**
 * Temporal-consistency score: mean cosine similarity over all unordered
 * pairs of generated frames. Needs at least two frames.
 *
 * # Safety
 * `gen` must point to `n_gen` valid views and `out` must be a valid
 * pointer.
 */
enum ImtgStatus imtg_tc_score(const struct ImtgImageView *gen, size_t n_gen, double *out);

/**
 * Peak signal-to-noise ratio in dB between two equal-shape images;
 * +infinity when they are identical.
 *
 * # Safety
 * `a`, `b`, and `out` must be valid pointers.
 */
enum ImtgStatus imtg_psnr(const struct ImtgImageView *a,
                          const struct ImtgImageView *b,
                          double *out);

/**
 * Mean block-matching displacement between two frames, in pixels. The
 * curation pipeline uses `block` 8 and `radius` 7.
 *
 * # Safety
 * `a`, `b`, and `out` must be valid pointers.
 */
enum ImtgStatus imtg_motion_score(const struct ImtgImageView *a,
                                  const struct ImtgImageView *b,
                                  size_t block,
                                  size_t radius,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
