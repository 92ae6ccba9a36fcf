#ifndef IMFACE_H
#define IMFACE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a C API call. Values above `Ok` mirror the CLI error
 * categories.
 */
typedef enum ImfaceStatus {
  ImfaceStatus_Ok = 0,
  /**
   * A required pointer argument was null.
   */
  ImfaceStatus_NullArgument = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  ImfaceStatus_InvalidString = 2,
  ImfaceStatus_Io = 3,
  ImfaceStatus_Config = 4,
  ImfaceStatus_Data = 5,
  ImfaceStatus_Numeric = 6,
} ImfaceStatus;

/**
 * Opaque handle to a loaded model checkpoint.
 */
typedef struct ImfaceModelHandle ImfaceModelHandle;

/**
 * Mesh-versus-mesh evaluation scores.
 */
typedef struct ImfaceMetrics {
  /**
   * Symmetric Chamfer distance (mm).
   */
  double chamfer_mm;
  /**
   * F-score at `tau_mm`, in percent.
   */
  double fscore_pct;
  /**
   * Threshold the F-score was computed at (mm).
   */
  double tau_mm;
  /**
   * Mean cosine between matched surface normals in [-1, 1].
   */
  double normal_consistency;
} ImfaceMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version of the library as a static nul-terminated string.
 */
const char *imface_version(void);

/**
 * Message describing the most recent failure on the calling thread. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *imface_last_error(void);

/**
 * Load a model from a checkpoint directory (the layout written by
 * `imface train`). On success, `*out` owns the handle; release it with
 * [`imface_model_free`].
 *
 * # Safety
 * `dir` must be a nul-terminated string; `out` must be valid for one
 * pointer write.
 */
enum ImfaceStatus imface_model_load(const char *dir, struct ImfaceModelHandle **out);

/**
 * Release a handle returned by [`imface_model_load`]. Null is a no-op.
 *
 * # Safety
 * `model` must be null or a pointer returned by [`imface_model_load`] that
 * has not been freed yet.
 */
void imface_model_free(struct ImfaceModelHandle *model);

/**
 * Width of each of the three latent code vectors; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t imface_model_z_dim(const struct ImfaceModelHandle *model);

/**
 * Number of landmark-anchored regions; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t imface_model_landmark_count(const struct ImfaceModelHandle *model);

/**
 * Evaluate the signed distance field at `n_points` points. With
 * `base_only` the detail displacement is skipped. `out` receives one value
 * per point.
 *
 * # Safety
 * `model` must be a live handle; the code pointers must each be valid for
 * `imface_model_z_dim` reads; `points` for `3 * n_points` reads; `out` for
 * `n_points` writes.
 */
enum ImfaceStatus imface_model_eval_sdf(const struct ImfaceModelHandle *model,
                                        const double *z_exp,
                                        const double *z_id,
                                        const double *z_detail,
                                        const double *points,
                                        uintptr_t n_points,
                                        bool base_only,
                                        double *out);

/**
 * Evaluate the population template field; needs no codes.
 *
 * # Safety
 * `model` must be a live handle; `points` valid for `3 * n_points` reads;
 * `out` for `n_points` writes.
 */
enum ImfaceStatus imface_model_eval_template_sdf(const struct ImfaceModelHandle *model,
                                                 const double *points,
                                                 uintptr_t n_points,
                                                 double *out);

/**
 * Warp expression-space points into the identity space. `out` receives
 * `3 * n_points` values.
 *
 * # Safety
 * Same contracts as [`imface_model_eval_sdf`], with `out` valid for
 * `3 * n_points` writes.
 */
enum ImfaceStatus imface_model_eval_exp_deform(const struct ImfaceModelHandle *model,
                                               const double *z_exp,
                                               const double *z_id,
                                               const double *z_detail,
                                               const double *points,
                                               uintptr_t n_points,
                                               double *out);

/**
 * Map scan-space points all the way into the shared template space. `out`
 * receives `3 * n_points` values.
 *
 * # Safety
 * Same contracts as [`imface_model_eval_exp_deform`].
 */
enum ImfaceStatus imface_model_eval_correspondence(const struct ImfaceModelHandle *model,
                                                   const double *z_exp,
                                                   const double *z_id,
                                                   const double *z_detail,
                                                   const double *points,
                                                   uintptr_t n_points,
                                                   double *out);

/**
 * Extract the zero level set on a `resolution`^3 grid spanning
 * `[-half_size_mm, half_size_mm]` per axis and write it as an OBJ file.
 * Pass three null code pointers to extract the learned template surface.
 *
 * # Safety
 * `model` must be a live handle; the code pointers must either all be null
 * or each valid for `imface_model_z_dim` reads; `out_path` must be a
 * nul-terminated string.
 */
enum ImfaceStatus imface_model_reconstruct_obj(const struct ImfaceModelHandle *model,
                                               const double *z_exp,
                                               const double *z_id,
                                               const double *z_detail,
                                               uintptr_t resolution,
                                               double half_size_mm,
                                               bool base_only,
                                               const char *out_path);

/**
 * Score a reconstructed OBJ mesh against a ground-truth OBJ mesh with
 * `samples` surface points per mesh and an F-score threshold of `tau_mm`.
 *
 * # Safety
 * `pred_path` and `gt_path` must be nul-terminated strings; `out` must be
 * valid for one [`ImfaceMetrics`] write.
 */
enum ImfaceStatus imface_metrics_obj(const char *pred_path,
                                     const char *gt_path,
                                     double tau_mm,
                                     uintptr_t samples,
                                     bool abs_normals,
                                     uint64_t seed,
                                     struct ImfaceMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IMFACE_H */
