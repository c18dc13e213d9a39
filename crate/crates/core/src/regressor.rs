//! Iterative error feedback regressor from `z_enc` to body parameters.

use crate::body_model::{CAM_DIM, NUM_BETAS, POSE_DIM};
use crate::error::{Error, Result};
use crate::numerics::{rng, Matrix, Tape, Var};
use crate::params::{Bound, ParamId, ParamStore};

/// `72 + 10 + 3`: pose, shape, then camera `(log s, tx, ty)`.
pub const STATE_DIM: usize = POSE_DIM + NUM_BETAS + CAM_DIM;
pub const HIDDEN: usize = 1024;
pub const ITERATIONS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ThetaState {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    /// `(s, tx, ty)` with `s > 0`.
    pub cam: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct RegressorParams {
    pub in_dim: usize,
    pub hidden: usize,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    /// Mean state buffer; camera scale stored as `log s`.
    pub mean: ParamId,
}

/// Output of [`ief_regress_on_tape`], all `B x _`.
#[derive(Clone, Copy, Debug)]
pub struct RegressorOutput {
    pub theta: Var,
    pub beta: Var,
    pub cam: Var,
    pub mlp_evals: usize,
}

fn uniform(rng: &mut rng::Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng::uniform(rng, -bound, bound))
}

impl RegressorParams {
    /// Hidden layers use `U(+-1/sqrt(in))`; the delta layer is Xavier-uniform
    /// with gain 0.01 so the first iterations stay near the mean.
    pub fn init(store: &mut ParamStore, prefix: &str, z_dim: usize, hidden: usize, rng: &mut rng::Rng) -> Self {
        let in_dim = z_dim + STATE_DIM;
        let xavier = 0.01 * (6.0 / (hidden + STATE_DIM) as f64).sqrt();
        Self {
            in_dim,
            hidden,
            fc1_w: store.add(format!("{prefix}.fc1.w"), uniform(rng, in_dim, hidden, 1.0 / (in_dim as f64).sqrt())),
            fc1_b: store.add(format!("{prefix}.fc1.b"), Matrix::zeros(1, hidden)),
            fc2_w: store.add(format!("{prefix}.fc2.w"), uniform(rng, hidden, hidden, 1.0 / (hidden as f64).sqrt())),
            fc2_b: store.add(format!("{prefix}.fc2.b"), Matrix::zeros(1, hidden)),
            out_w: store.add(format!("{prefix}.out.w"), uniform(rng, hidden, STATE_DIM, xavier)),
            out_b: store.add(format!("{prefix}.out.b"), Matrix::zeros(1, STATE_DIM)),
            mean: store.add_buffer(format!("{prefix}.mean"), Matrix::zeros(1, STATE_DIM)),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b, self.out_w, self.out_b, self.mean]
    }
}

/// Trainable scalars of the regressor (the mean state is a buffer).
pub fn count_params(z_dim: usize, hidden: usize) -> usize {
    let linear = |i: usize, o: usize| i * o + o;
    linear(z_dim + STATE_DIM, hidden) + linear(hidden, hidden) + linear(hidden, STATE_DIM)
}

fn mlp(tape: &mut Tape, r: &RegressorParams, p: &Bound, x: Var) -> Result<Var> {
    let mut h = x;
    for (w, b) in [(r.fc1_w, r.fc1_b), (r.fc2_w, r.fc2_b), (r.out_w, r.out_b)] {
        let y = tape.matmul(h, p.var(w))?;
        h = tape.add_row(y, p.var(b))?;
    }
    Ok(h)
}

/// `Theta_k = Theta_{k-1} + MLP([z; Theta_{k-1}])` for `iterations` steps
/// starting from the mean; `z` is `B x F_out`.
pub fn ief_regress_on_tape(
    tape: &mut Tape,
    r: &RegressorParams,
    p: &Bound,
    z: Var,
    iterations: usize,
) -> Result<RegressorOutput> {
    let (batch, zd) = tape.value(z).shape();
    if zd + STATE_DIM != r.in_dim {
        return Err(Error::shape(
            "regressor",
            format!("z_enc width {zd}, expected {}", r.in_dim - STATE_DIM),
        ));
    }
    let tile: Vec<usize> = (0..batch).flat_map(|_| 0..STATE_DIM).collect();
    let mut state = tape.gather(p.var(r.mean), tile, batch, STATE_DIM)?;
    let mut evals = 0;
    for k in 0..iterations {
        let x = tape.concat_cols(&[z, state])?;
        let delta = mlp(tape, r, p, x)?;
        evals += 1;
        state = tape.add(state, delta)?;
        if !tape.value(state).is_finite() {
            return Err(Error::NonFinite {
                context: format!("regressor iteration {}", k + 1),
            });
        }
    }
    let theta = tape.slice(state, 0, batch, 0, POSE_DIM)?;
    let beta = tape.slice(state, 0, batch, POSE_DIM, NUM_BETAS)?;
    let log_s = tape.slice(state, 0, batch, POSE_DIM + NUM_BETAS, 1)?;
    let s = tape.exp(log_s);
    let t = tape.slice(state, 0, batch, POSE_DIM + NUM_BETAS + 1, 2)?;
    let cam = tape.concat_cols(&[s, t])?;
    Ok(RegressorOutput {
        theta,
        beta,
        cam,
        mlp_evals: evals,
    })
}

pub fn ief_regress(store: &ParamStore, r: &RegressorParams, z_enc: &[f64]) -> Result<(ThetaState, usize)> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let z = tape.constant(Matrix::row_vector(z_enc));
    let out = ief_regress_on_tape(&mut tape, r, &p, z, ITERATIONS)?;
    let c = tape.value(out.cam).as_slice();
    Ok((
        ThetaState {
            theta: tape.value(out.theta).as_slice().to_vec(),
            beta: tape.value(out.beta).as_slice().to_vec(),
            cam: [c[0], c[1], c[2]],
        },
        out.mlp_evals,
    ))
}

/// Zero-based middle frame, `floor(T / 2)`.
pub fn mid_frame_index(frames: usize) -> Result<usize> {
    if frames == 0 {
        return Err(Error::InvalidArgument("sequence has no frames".into()));
    }
    Ok(frames / 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_tape_function, GradCheckOptions};

    fn setup(hidden: usize, z_dim: usize, seed: u64) -> (ParamStore, RegressorParams) {
        let mut store = ParamStore::new();
        let r = RegressorParams::init(&mut store, "reg", z_dim, hidden, &mut rng::seeded(seed));
        (store, r)
    }

    #[test]
    fn mid_frame() {
        assert_eq!(mid_frame_index(15).unwrap(), 7);
        assert_eq!(mid_frame_index(1).unwrap(), 0);
        assert_eq!(mid_frame_index(16).unwrap(), 8);
        assert!(mid_frame_index(0).is_err());
    }

    #[test]
    fn zero_weights_return_mean() {
        let (mut store, r) = setup(16, 8, 0);
        for id in r.ids() {
            let (a, b) = store.get(id).shape();
            *store.get_mut(id) = Matrix::zeros(a, b);
        }
        let mut mean = Matrix::zeros(1, STATE_DIM);
        for i in 0..STATE_DIM {
            mean.set(0, i, 0.01 * i as f64);
        }
        *store.get_mut(r.mean) = mean.clone();
        let (out, evals) = ief_regress(&store, &r, &[0.5; 8]).unwrap();
        assert_eq!(evals, 3);
        assert_eq!(out.theta.as_slice(), &mean.as_slice()[..POSE_DIM]);
        assert_eq!(out.beta.as_slice(), &mean.as_slice()[POSE_DIM..POSE_DIM + NUM_BETAS]);
        assert_eq!(out.cam[0], mean.get(0, 82).exp());
        assert_eq!(out.cam[1..], mean.as_slice()[83..]);
    }

    #[test]
    fn zero_delta_weights_make_iterations_additive() {
        // With the delta layer's weights zeroed each pass adds its bias.
        let (mut store, r) = setup(16, 8, 3);
        *store.get_mut(r.out_w) = Matrix::zeros(16, STATE_DIM);
        let step = Matrix::from_fn(1, STATE_DIM, |_, j| 0.01 * (j % 7) as f64 - 0.02);
        *store.get_mut(r.out_b) = step.clone();
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let z = tape.constant(Matrix::zeros(1, 8));
        let one = ief_regress_on_tape(&mut tape, &r, &p, z, 1).unwrap();
        assert_eq!(one.mlp_evals, 1);
        let (three, evals) = ief_regress(&store, &r, &[0.0; 8]).unwrap();
        assert_eq!(evals, ITERATIONS);
        for j in 0..POSE_DIM {
            assert_eq!(tape.value(one.theta).get(0, j), step.get(0, j));
            assert!((three.theta[j] - 3.0 * step.get(0, j)).abs() < 1e-15);
        }
    }

    #[test]
    fn scale_is_positive() {
        let (mut store, r) = setup(16, 4, 7);
        let mut m = Matrix::zeros(1, STATE_DIM);
        m.set(0, 82, -40.0);
        *store.get_mut(r.mean) = m;
        let (out, _) = ief_regress(&store, &r, &[3.0, -2.0, 1.0, 0.0]).unwrap();
        assert!(out.cam[0] > 0.0);
    }

    #[test]
    fn width_mismatch_rejected() {
        let (store, r) = setup(16, 4, 7);
        assert!(ief_regress(&store, &r, &[0.0; 5]).is_err());
    }

    #[test]
    fn gradients_pass_grad_check() {
        let (mut store, r) = setup(24, 6, 11);
        let mut g = rng::seeded(12);
        let scaled = store.get(r.out_w).scale(100.0);
        *store.get_mut(r.out_w) = scaled;
        let z = rng::normal_matrix(&mut g, 2, 6, 1.0);
        let probe = rng::normal_matrix(&mut g, 2, STATE_DIM, 1.0);
        let mut values: Vec<Matrix> = store.iter().map(|p| p.value.clone()).collect();
        values.push(z);
        let n = store.len();
        let rep = check_tape_function(
            |t, v| {
                let bound = Bound::from_vars(v[..n].to_vec());
                let o = ief_regress_on_tape(t, &r, &bound, v[n], ITERATIONS)?;
                let all = t.concat_cols(&[o.theta, o.beta, o.cam])?;
                let pr = t.constant(probe.clone());
                let y = t.mul(all, pr)?;
                Ok(t.sum(y))
            },
            &values,
            &GradCheckOptions {
                coords_per_tensor: 15,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "{rep:?}");
    }

    #[test]
    fn count_matches_store() {
        let (store, _) = setup(32, 10, 0);
        assert_eq!(count_params(10, 32), store.num_trainable_scalars());
    }
}
