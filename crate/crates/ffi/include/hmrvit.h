#ifndef HMRVIT_H
#define HMRVIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum HmrvitStatus {
  HMRVIT_STATUS_OK = 0,
  HMRVIT_STATUS_NULL_POINTER = 1,
  HMRVIT_STATUS_INVALID_ARGUMENT = 2,
  HMRVIT_STATUS_SHAPE_MISMATCH = 3,
  HMRVIT_STATUS_NON_FINITE = 4,
  HMRVIT_STATUS_DEGENERATE = 5,
  HMRVIT_STATUS_CONFIG = 6,
  HMRVIT_STATUS_IO = 7,
  HMRVIT_STATUS_ARCHIVE = 8,
  HMRVIT_STATUS_DIVERGENCE = 9,
  HMRVIT_STATUS_PANIC = 10,
} HmrvitStatus;

// Procedural body template.
typedef struct HmrvitBodyModel HmrvitBodyModel;

// Trained pipeline restored from a checkpoint directory.
typedef struct HmrvitModel HmrvitModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty when none. The
// pointer stays valid until the next failing call on the same thread.
const char *hmrvit_last_error(void);

// Library version as a static NUL-terminated string.
const char *hmrvit_version(void);

// Creates the procedural template with `verts_per_joint` vertices per joint.
enum HmrvitStatus hmrvit_body_model_procedural(size_t verts_per_joint,
                                               uint64_t seed,
                                               struct HmrvitBodyModel **out);

// Loads a template directory written by the library.
enum HmrvitStatus hmrvit_body_model_load(const char *dir, struct HmrvitBodyModel **out);

void hmrvit_body_model_free(struct HmrvitBodyModel *model);

// Number of mesh vertices, or 0 for a null handle.
size_t hmrvit_body_model_num_vertices(const struct HmrvitBodyModel *model);

// Posed mesh: `theta[72]`, `beta[10]` to `out_verts[V*3]`.
enum HmrvitStatus hmrvit_body_mesh(const struct HmrvitBodyModel *model,
                                   const double *theta,
                                   const double *beta,
                                   double *out_verts);

// Joint regression: `verts[V*3]` to `out_joints[24*3]`.
enum HmrvitStatus hmrvit_regress_joints(const struct HmrvitBodyModel *model,
                                        const double *verts,
                                        double *out_joints);

// Weak-perspective projection of `n` points: `points[n*3]` to `out[n*2]`.
enum HmrvitStatus hmrvit_project(const double *points_xyz,
                                 size_t n,
                                 double s,
                                 double tx,
                                 double ty,
                                 double *out);

// Root-centered mean per-joint error of two `n x 3` point sets, in the
// input unit times 1000.
enum HmrvitStatus hmrvit_mpjpe(const double *pred, const double *target, size_t n, double *out);

// [`hmrvit_mpjpe`] after optimal similarity alignment.
enum HmrvitStatus hmrvit_pa_mpjpe(const double *pred, const double *target, size_t n, double *out);

// CRM from `c x c` logits.
enum HmrvitStatus hmrvit_make_crm(const double *logits, size_t c, double temperature, double *out);

// Permutation maximizing the matched mass of a `c x c` matrix;
// `out_sigma[i]` is the column matched to row `i`.
enum HmrvitStatus hmrvit_nearest_permutation(const double *crm,
                                             size_t c,
                                             size_t *out_sigma,
                                             double *out_distance);

// Restores a model from a checkpoint directory.
enum HmrvitStatus hmrvit_model_load(const char *dir, struct HmrvitModel **out);

void hmrvit_model_free(struct HmrvitModel *model);

// Input window and mesh size of a model. Null outputs are skipped.
enum HmrvitStatus hmrvit_model_dims(const struct HmrvitModel *model,
                                    size_t *frames,
                                    size_t *channels,
                                    size_t *vertices);

// Mid-frame prediction for `batch` windows of `T x C` features stacked as
// `features[batch*T*C]`. Outputs are `theta[batch*72]`, `beta[batch*10]`,
// `cam[batch*3]` (scale, tx, ty), `verts[batch*V*3]` and
// `joints[batch*72]`; any of them may be null.
enum HmrvitStatus hmrvit_model_predict(const struct HmrvitModel *model,
                                       const double *features,
                                       size_t batch,
                                       double *out_theta,
                                       double *out_beta,
                                       double *out_cam,
                                       double *out_verts,
                                       double *out_joints);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HMRVIT_H */
