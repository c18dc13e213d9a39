//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use super::{rng, Matrix, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates probed per tensor; tensors at or below this size are
    /// probed exhaustively.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            coords_per_tensor: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub tensor: usize,
    pub probes: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: usize,
    pub tensors: Vec<TensorCheck>,
}

/// `|analytic - numeric| / max(1, |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares `analytic` (one gradient per entry of `params`) against central
/// differences of `f`.
pub fn grad_check<F>(
    mut f: F,
    params: &[Matrix],
    analytic: &[Matrix],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    if !(1e-7..=1e-4).contains(&opts.eps) {
        return Err(Error::InvalidArgument(format!(
            "grad_check eps must lie in [1e-7, 1e-4], got {}",
            opts.eps
        )));
    }
    if params.len() != analytic.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} params vs {} gradients", params.len(), analytic.len()),
        ));
    }
    let mut rng = rng::seeded(opts.seed);
    let mut work: Vec<Matrix> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        probes: 0,
        tensors: Vec::with_capacity(params.len()),
    };

    for (t, (p, g)) in params.iter().zip(analytic).enumerate() {
        p.check_same_shape("grad_check", g)?;
        let indices: Vec<usize> = if p.len() <= opts.coords_per_tensor {
            (0..p.len()).collect()
        } else {
            let mut v = sample(&mut rng, p.len(), opts.coords_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let mut tc = TensorCheck {
            tensor: t,
            probes: indices.len(),
            max_rel_err: 0.0,
            worst_index: 0,
        };
        for &i in &indices {
            let orig = p.as_slice()[i];
            work[t].as_mut_slice()[i] = orig + opts.eps;
            let plus = f(&work)?;
            work[t].as_mut_slice()[i] = orig - opts.eps;
            let minus = f(&work)?;
            work[t].as_mut_slice()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("grad_check probe at tensor {t}, coordinate {i}"),
                });
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(g.as_slice()[i], numeric);
            if err > tc.max_rel_err {
                tc.max_rel_err = err;
                tc.worst_index = i;
            }
        }
        report.probes += tc.probes;
        report.max_rel_err = report.max_rel_err.max(tc.max_rel_err);
        report.tensors.push(tc);
    }
    Ok(report)
}

/// Builds the graph once for analytic gradients, then re-evaluates it for
/// every finite-difference probe. `build` receives one leaf per param.
pub fn check_tape_function<B>(build: B, params: &[Matrix], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Matrix> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("leaf gradient"))
        .collect();
    grad_check(
        |ps| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
            let out = build(&mut tape, &vars)?;
            Ok(tape.scalar(out))
        },
        params,
        &analytic,
        opts,
    )
}
