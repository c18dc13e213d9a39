//! Training objective. Every term is a sum of squares over elements,
//! averaged over the batch (rows).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub l2d: f64,
    pub l3d: f64,
    pub pose: f64,
    pub shape: f64,
    pub crm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l2d: 300.0,
            l3d: 300.0,
            pose: 60.0,
            shape: 0.06,
            crm: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in self.named() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    key: format!("weights.{k}"),
                    message: format!("must be a finite non-negative number, got {v}"),
                });
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("l2d", self.l2d),
            ("l3d", self.l3d),
            ("pose", self.pose),
            ("shape", self.shape),
            ("crm", self.crm),
        ]
    }
}

/// Loss terms; `None` marks a term whose ground truth is unavailable.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub l2d: Option<f64>,
    pub l3d: Option<f64>,
    pub pose: Option<f64>,
    pub shape: Option<f64>,
    pub crm: Option<f64>,
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    [
        (c.l2d, w.l2d),
        (c.l3d, w.l3d),
        (c.pose, w.pose),
        (c.shape, w.shape),
        (c.crm, w.crm),
    ]
    .iter()
    .filter_map(|(v, l)| v.map(|v| l * v))
    .sum()
}

fn mean_sq(pred: &Matrix, target: &Matrix, op: &'static str) -> Result<f64> {
    pred.check_same_shape(op, target)?;
    if pred.rows() == 0 {
        return Err(Error::shape(op, "empty batch"));
    }
    let s: f64 = pred.as_slice().iter().zip(target.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.rows() as f64)
}

/// Keypoints `B x 2J`.
pub fn l2d(pred: &Matrix, target: &Matrix) -> Result<f64> {
    mean_sq(pred, target, "l2d")
}

/// Joints `B x 3J`; both sets are centered on joint 0 first.
pub fn l3d(pred: &Matrix, target: &Matrix) -> Result<f64> {
    pred.check_same_shape("l3d", target)?;
    if pred.cols() % 3 != 0 || pred.cols() == 0 {
        return Err(Error::shape("l3d", format!("{} columns is not 3J", pred.cols())));
    }
    mean_sq(&pelvis_centered(pred), &pelvis_centered(target), "l3d")
}

pub fn lpose(pred: &Matrix, target: &Matrix) -> Result<f64> {
    mean_sq(pred, target, "lpose")
}

pub fn lshape(pred: &Matrix, target: &Matrix) -> Result<f64> {
    mean_sq(pred, target, "lshape")
}

/// Subtracts joint 0 from every joint of each `3J` row.
pub fn pelvis_centered(joints: &Matrix) -> Matrix {
    Matrix::from_fn(joints.rows(), joints.cols(), |r, c| joints.get(r, c) - joints.get(r, c % 3))
}

fn mean_sq_on_tape(tape: &mut Tape, diff: Var) -> Var {
    let rows = tape.value(diff).rows() as f64;
    let s = tape.sum_squares(diff);
    tape.scale(s, 1.0 / rows)
}

fn checked_diff(tape: &mut Tape, pred: Var, target: Var, op: &'static str) -> Result<Var> {
    tape.value(pred).check_same_shape(op, tape.value(target))?;
    if tape.value(pred).rows() == 0 {
        return Err(Error::shape(op, "empty batch"));
    }
    tape.sub(pred, target)
}

/// Sum of squares averaged over rows, for 2D keypoint, pose and shape terms.
pub fn mean_sq_loss_on_tape(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = checked_diff(tape, pred, target, "loss")?;
    Ok(mean_sq_on_tape(tape, d))
}

pub fn l3d_on_tape(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = checked_diff(tape, pred, target, "l3d")?;
    let (b, c) = tape.value(d).shape();
    if c % 3 != 0 || c == 0 {
        return Err(Error::shape("l3d", format!("{c} columns is not 3J")));
    }
    let index: Vec<usize> = (0..b).flat_map(|r| (0..c).map(move |k| r * c + k % 3)).collect();
    let pelvis = tape.gather(d, index, b, c)?;
    let centered = tape.sub(d, pelvis)?;
    Ok(mean_sq_on_tape(tape, centered))
}

/// Tape handles of each weighted term, `None` where unavailable.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub l2d: Option<Var>,
    pub l3d: Option<Var>,
    pub pose: Option<Var>,
    pub shape: Option<Var>,
    pub crm: Option<Var>,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossComponents {
        let v = |x: Option<Var>| x.map(|x| tape.scalar(x));
        LossComponents {
            l2d: v(self.l2d),
            l3d: v(self.l3d),
            pose: v(self.pose),
            shape: v(self.shape),
            crm: v(self.crm),
        }
    }
}

pub fn total_loss_on_tape(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (term, lambda) in [
        (terms.l2d, w.l2d),
        (terms.l3d, w.l3d),
        (terms.pose, w.pose),
        (terms.shape, w.shape),
        (terms.crm, w.crm),
    ] {
        if let Some(t) = term {
            let scaled = tape.scale(t, lambda);
            total = Some(match total {
                Some(acc) => tape.add(acc, scaled)?,
                None => scaled,
            });
        }
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(Matrix::zeros(1, 1)),
    })
}
