//! MPJPE, PA-MPJPE and PVE in millimeters. Inputs are `N x 3` point sets
//! in meters.

use nalgebra::{Matrix3, Vector3};

use crate::body_model::{regress_joints, BodyTemplate};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MM: f64 = 1000.0;

fn check_points(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    a.check_same_shape(op, b)?;
    if a.cols() != 3 || a.rows() == 0 {
        return Err(Error::shape(op, format!("expected N x 3 points, got {:?}", a.shape())));
    }
    Ok(())
}

fn point(m: &Matrix, i: usize) -> Vector3<f64> {
    Vector3::new(m.get(i, 0), m.get(i, 1), m.get(i, 2))
}

fn mean_distance(a: &Matrix, b: &Matrix, ca: Vector3<f64>, cb: Vector3<f64>) -> f64 {
    let n = a.rows();
    (0..n).map(|i| ((point(a, i) - ca) - (point(b, i) - cb)).norm()).sum::<f64>() / n as f64 * MM
}

/// Mean joint distance after subtracting joint 0 from both sets.
pub fn mpjpe(pred: &Matrix, target: &Matrix) -> Result<f64> {
    check_points("mpjpe", pred, target)?;
    Ok(mean_distance(pred, target, point(pred, 0), point(target, 0)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, points: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(points.rows(), 3);
        for i in 0..points.rows() {
            let p = self.scale * self.rotation * point(points, i) + self.translation;
            out.row_mut(i).copy_from_slice(p.as_slice());
        }
        out
    }
}

/// Sum of squared residuals `||s R p_i + t - q_i||^2`.
pub fn alignment_objective(t: &Similarity, pred: &Matrix, target: &Matrix) -> f64 {
    let moved = t.apply(pred);
    moved.as_slice().iter().zip(target.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Closed-form least-squares similarity (Umeyama) mapping `pred` onto
/// `target`, reflections excluded.
pub fn procrustes_align(pred: &Matrix, target: &Matrix) -> Result<Similarity> {
    check_points("procrustes", pred, target)?;
    let n = pred.rows();
    if n < 3 {
        return Err(Error::Degenerate(format!("procrustes needs at least 3 points, got {n}")));
    }
    let inv = 1.0 / n as f64;
    let mu_p = (0..n).map(|i| point(pred, i)).sum::<Vector3<f64>>() * inv;
    let mu_t = (0..n).map(|i| point(target, i)).sum::<Vector3<f64>>() * inv;
    let mut var_p = 0.0;
    let mut cov = Matrix3::zeros();
    for i in 0..n {
        let x = point(pred, i) - mu_p;
        let y = point(target, i) - mu_t;
        var_p += x.norm_squared();
        cov += y * x.transpose();
    }
    var_p *= inv;
    cov *= inv;
    let spread = (0..n).map(|i| point(pred, i).norm_squared()).sum::<f64>() * inv;
    if var_p <= 1e-24 * spread.max(1.0) {
        return Err(Error::Degenerate("procrustes source points coincide".into()));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let trace: f64 = (0..3).map(|k| svd.singular_values[k] * d[(k, k)]).sum();
    let scale = trace / var_p;
    let translation = mu_t - scale * rotation * mu_p;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

pub fn pa_mpjpe(pred: &Matrix, target: &Matrix) -> Result<f64> {
    let t = procrustes_align(pred, target)?;
    let aligned = t.apply(pred);
    Ok(mean_distance(&aligned, target, Vector3::zeros(), Vector3::zeros()))
}

/// Mean vertex distance of meshes that are already centered.
pub fn pve(pred: &Matrix, target: &Matrix) -> Result<f64> {
    check_points("pve", pred, target)?;
    Ok(mean_distance(pred, target, Vector3::zeros(), Vector3::zeros()))
}

/// [`pve`] after centering each mesh on its own regressed joint 0.
pub fn pve_centered(tmpl: &BodyTemplate, pred: &Matrix, target: &Matrix) -> Result<f64> {
    check_points("pve", pred, target)?;
    let pp = point(&regress_joints(tmpl, pred)?, 0);
    let pt = point(&regress_joints(tmpl, target)?, 0);
    Ok(mean_distance(pred, target, pp, pt))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMetrics {
    pub pve_mm: f64,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
}

pub fn evaluate_sample(
    tmpl: &BodyTemplate,
    pred_mesh: &Matrix,
    target_mesh: &Matrix,
    pred_joints: &Matrix,
    target_joints: &Matrix,
) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        pve_mm: pve_centered(tmpl, pred_mesh, target_mesh)?,
        mpjpe_mm: mpjpe(pred_joints, target_joints)?,
        pa_mpjpe_mm: pa_mpjpe(pred_joints, target_joints)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub config_id: String,
    pub seed: u64,
    pub pve_mm: f64,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub n: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "config_id,seed,pve_mm,mpjpe_mm,pa_mpjpe_mm,n";

    pub fn from_samples(config_id: impl Into<String>, seed: u64, samples: &[SampleMetrics]) -> Self {
        let n = samples.len();
        let mean = |f: fn(&SampleMetrics) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                samples.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            config_id: config_id.into(),
            seed,
            pve_mm: mean(|s| s.pve_mm),
            mpjpe_mm: mean(|s| s.mpjpe_mm),
            pa_mpjpe_mm: mean(|s| s.pa_mpjpe_mm),
            n,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{}",
            self.config_id, self.seed, self.pve_mm, self.mpjpe_mm, self.pa_mpjpe_mm, self.n
        )
    }
}
