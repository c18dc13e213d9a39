//! C ABI over the body model, metrics, CRM utilities and checkpoint
//! inference.
//!
//! Every fallible function returns an [`HmrvitStatus`]; on failure a message
//! is kept per thread and read back with [`hmrvit_last_error`]. Handles are
//! opaque and must be released with their `_free` function. All arrays are
//! row-major `double`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use hmrvit::body_model::{self, BodyTemplate, CameraParams, NUM_BETAS, NUM_JOINTS, POSE_DIM};
use hmrvit::feature_image::{make_crm, nearest_permutation, CrmLogits};
use hmrvit::metrics;
use hmrvit::numerics::Matrix;
use hmrvit::training::{Checkpoint, Model};
use hmrvit::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HmrvitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NonFinite = 4,
    Degenerate = 5,
    Config = 6,
    Io = 7,
    Archive = 8,
    Divergence = 9,
    Panic = 10,
}

/// Procedural body template.
pub struct HmrvitBodyModel {
    template: Arc<BodyTemplate>,
}

/// Trained pipeline restored from a checkpoint directory.
pub struct HmrvitModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> HmrvitStatus {
    match e {
        Error::Shape { .. } => HmrvitStatus::ShapeMismatch,
        Error::InvalidArgument(_) => HmrvitStatus::InvalidArgument,
        Error::NonFinite { .. } => HmrvitStatus::NonFinite,
        Error::Degenerate(_) => HmrvitStatus::Degenerate,
        Error::Config { .. } => HmrvitStatus::Config,
        Error::Divergence { .. } => HmrvitStatus::Divergence,
        Error::Archive { .. } | Error::Json(_) => HmrvitStatus::Archive,
        Error::Io { .. } => HmrvitStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HmrvitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HmrvitStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            HmrvitStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            HmrvitStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a>(p: *mut f64, n: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidArgument("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn points(data: &[f64], n: usize) -> Result<Matrix, Fail> {
    Ok(Matrix::from_vec(n, 3, data.to_vec())?)
}

/// Message of the last failed call on this thread; empty when none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hmrvit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hmrvit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates the procedural template with `verts_per_joint` vertices per joint.
#[no_mangle]
pub unsafe extern "C" fn hmrvit_body_model_procedural(
    verts_per_joint: usize,
    seed: u64,
    out: *mut *mut HmrvitBodyModel,
) -> HmrvitStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let template = Arc::new(BodyTemplate::procedural(verts_per_joint, seed)?);
        *out = Box::into_raw(Box::new(HmrvitBodyModel { template }));
        Ok(())
    })
}

/// Loads a template directory written by the library.
#[no_mangle]
pub unsafe extern "C" fn hmrvit_body_model_load(dir: *const c_char, out: *mut *mut HmrvitBodyModel) -> HmrvitStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let template = Arc::new(BodyTemplate::load(&path(dir)?)?);
        *out = Box::into_raw(Box::new(HmrvitBodyModel { template }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hmrvit_body_model_free(model: *mut HmrvitBodyModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of mesh vertices, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn hmrvit_body_model_num_vertices(model: *const HmrvitBodyModel) -> usize {
    model.as_ref().map_or(0, |m| m.template.num_vertices())
}

/// Posed mesh: `theta[72]`, `beta[10]` to `out_verts[V*3]`.
#[no_mangle]
pub unsafe extern "C" fn hmrvit_body_mesh(
    model: *const HmrvitBodyModel,
    theta: *const f64,
    beta: *const f64,
    out_verts: *mut f64,
) -> HmrvitStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let mesh = body_model::body_mesh(
            &m.template,
            slice(theta, POSE_DIM, "theta")?,
            slice(beta, NUM_BETAS, "beta")?,
        )?;
        slice_mut(out_verts, mesh.len(), "out_verts")?.copy_from_slice(mesh.as_slice());
        Ok(())
    })
}

/// Joint regression: `verts[V*3]` to `out_joints[24*3]`.
#[no_mangle]
pub unsafe extern "C" fn hmrvit_regress_joints(
    model: *const HmrvitBodyModel,
    verts: *const f64,
    out_joints: *mut f64,
) -> HmrvitStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let v = m.template.num_vertices();
        let mesh = points(slice(verts, 3 * v, "verts")?, v)?;
        let j = body_model::regress_joints(&m.template, &mesh)?;
        slice_mut(out_joints, 3 * NUM_JOINTS, "out_joints")?.copy_from_slice(j.as_slice());
        Ok(())
    })
}

/// Weak-perspective projection of `n` points: `points[n*3]` to `out[n*2]`.
#[no_mangle]
pub unsafe extern "C" fn hmrvit_project(
    points_xyz: *const f64,
    n: usize,
    s: f64,
    tx: f64,
    ty: f64,
    out: *mut f64,
) -> HmrvitStatus {
    guard(|| {
        let p = points(slice(points_xyz, 3 * n, "points")?, n)?;
        let k = body_model::project(&p, &CameraParams::new(s, [tx, ty])?)?;
        slice_mut(out, 2 * n, "out")?.copy_from_slice(k.as_slice());
        Ok(())
    })
}

/// Root-centered mean per-joint error of two `n x 3` point sets, in the
/// input unit times 1000.
#[no_mangle]
pub unsafe extern "C" fn hmrvit_mpjpe(pred: *const f64, target: *const f64, n: usize, out: *mut f64) -> HmrvitStatus {
    guard(|| {
        let p = points(slice(pred, 3 * n, "pred")?, n)?;
        let t = points(slice(target, 3 * n, "target")?, n)?;
        let v = metrics::mpjpe(&p, &t)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = v;
        Ok(())
    })
}

/// [`hmrvit_mpjpe`] after optimal similarity alignment.
#[no_mangle]
pub unsafe extern "C" fn hmrvit_pa_mpjpe(
    pred: *const f64,
    target: *const f64,
    n: usize,
    out: *mut f64,
) -> HmrvitStatus {
    guard(|| {
        let p = points(slice(pred, 3 * n, "pred")?, n)?;
        let t = points(slice(target, 3 * n, "target")?, n)?;
        let v = metrics::pa_mpjpe(&p, &t)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = v;
        Ok(())
    })
}

/// CRM from `c x c` logits.
#[no_mangle]
pub unsafe extern "C" fn hmrvit_make_crm(
    logits: *const f64,
    c: usize,
    temperature: f64,
    out: *mut f64,
) -> HmrvitStatus {
    guard(|| {
        let w = Matrix::from_vec(c, c, slice(logits, c * c, "logits")?.to_vec())?;
        let crm = make_crm(&CrmLogits { w, temperature })?;
        slice_mut(out, c * c, "out")?.copy_from_slice(crm.as_slice());
        Ok(())
    })
}

/// Permutation maximizing the matched mass of a `c x c` matrix;
/// `out_sigma[i]` is the column matched to row `i`.
#[no_mangle]
pub unsafe extern "C" fn hmrvit_nearest_permutation(
    crm: *const f64,
    c: usize,
    out_sigma: *mut usize,
    out_distance: *mut f64,
) -> HmrvitStatus {
    guard(|| {
        let m = Matrix::from_vec(c, c, slice(crm, c * c, "crm")?.to_vec())?;
        let near = nearest_permutation(&m)?;
        if out_sigma.is_null() {
            return Err(Fail::Null("out_sigma"));
        }
        std::slice::from_raw_parts_mut(out_sigma, c).copy_from_slice(&near.sigma);
        if let Some(d) = out_distance.as_mut() {
            *d = near.distance;
        }
        Ok(())
    })
}

/// Restores a model from a checkpoint directory.
#[no_mangle]
pub unsafe extern "C" fn hmrvit_model_load(dir: *const c_char, out: *mut *mut HmrvitModel) -> HmrvitStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let ck = Checkpoint::load(&path(dir)?)?;
        *out = Box::into_raw(Box::new(HmrvitModel { model: ck.model }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hmrvit_model_free(model: *mut HmrvitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input window and mesh size of a model. Null outputs are skipped.
#[no_mangle]
pub unsafe extern "C" fn hmrvit_model_dims(
    model: *const HmrvitModel,
    frames: *mut usize,
    channels: *mut usize,
    vertices: *mut usize,
) -> HmrvitStatus {
    guard(|| {
        let m = &model.as_ref().ok_or(Fail::Null("model"))?.model;
        if let Some(f) = frames.as_mut() {
            *f = m.config.frames;
        }
        if let Some(c) = channels.as_mut() {
            *c = m.config.channels;
        }
        if let Some(v) = vertices.as_mut() {
            *v = m.template.num_vertices();
        }
        Ok(())
    })
}

/// Mid-frame prediction for `batch` windows of `T x C` features stacked as
/// `features[batch*T*C]`. Outputs are `theta[batch*72]`, `beta[batch*10]`,
/// `cam[batch*3]` (scale, tx, ty), `verts[batch*V*3]` and
/// `joints[batch*72]`; any of them may be null.
#[no_mangle]
pub unsafe extern "C" fn hmrvit_model_predict(
    model: *const HmrvitModel,
    features: *const f64,
    batch: usize,
    out_theta: *mut f64,
    out_beta: *mut f64,
    out_cam: *mut f64,
    out_verts: *mut f64,
    out_joints: *mut f64,
) -> HmrvitStatus {
    guard(|| {
        let m = &model.as_ref().ok_or(Fail::Null("model"))?.model;
        let (t, c) = (m.config.frames, m.config.channels);
        let x = Matrix::from_vec(batch * t, c, slice(features, batch * t * c, "features")?.to_vec())?;
        let p = m.predict(&x)?;
        for (dst, src) in [
            (out_theta, &p.theta),
            (out_beta, &p.beta),
            (out_cam, &p.cam),
            (out_verts, &p.verts),
            (out_joints, &p.joints),
        ] {
            if !dst.is_null() {
                std::slice::from_raw_parts_mut(dst, src.len()).copy_from_slice(src.as_slice());
            }
        }
        Ok(())
    })
}
