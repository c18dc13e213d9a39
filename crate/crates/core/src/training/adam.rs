use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamMoments {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let m: Vec<Matrix> = params.into_iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. `grads[i] = None` leaves tensor `i`
/// and its moments untouched. Nothing is modified when any gradient is
/// non-finite.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[Option<&Matrix>],
    names: &[&str],
    moments: &mut AdamMoments,
    cfg: &AdamConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || names.len() != n || moments.m.len() != n {
        return Err(Error::shape(
            "adam_step",
            format!("{n} params, {} grads, {} moment tensors", grads.len(), moments.m.len()),
        ));
    }
    for i in 0..n {
        if let Some(g) = grads[i] {
            params[i].check_same_shape("adam_step", g)?;
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of `{}`", names[i]),
                });
            }
        }
    }
    moments.step += 1;
    let t = moments.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        let Some(g) = grads[i] else { continue };
        let p = params[i].as_mut_slice();
        let m = moments.m[i].as_mut_slice();
        let v = moments.v[i].as_mut_slice();
        for (k, &gk) in g.as_slice().iter().enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
