//! Channel unscrambling: the CRM alone learns to undo a hidden channel
//! permutation of block-ordered features.

use super::adam::{adam_step, AdamConfig, AdamMoments};
use crate::error::Result;
use crate::feature_image::{
    crm_loss_on_tape, make_crm, make_crm_on_tape, max_row_sum_deviation, mean_column_max, nearest_permutation,
    permutation_matrix, CrmLogits,
};
use crate::losses::mean_sq_loss_on_tape;
use crate::numerics::{rng, Matrix, Tape};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrmTaskConfig {
    pub channels: usize,
    pub rows: usize,
    pub steps: usize,
    pub lr: f64,
    pub init_std: f64,
    pub temperature: f64,
    pub lambda_crm: f64,
    pub seed: u64,
}

impl Default for CrmTaskConfig {
    fn default() -> Self {
        Self {
            channels: 25,
            rows: 100,
            steps: 2000,
            lr: 0.05,
            init_std: 0.02,
            temperature: 1.0,
            lambda_crm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CrmTaskReport {
    /// Permutation that scrambled the channels.
    pub hidden: Vec<usize>,
    /// Nearest permutation to the learned CRM.
    pub recovered: Vec<usize>,
    pub initial_distance: f64,
    pub final_distance: f64,
    pub mean_column_max: f64,
    pub max_row_sum_deviation: f64,
    pub max_col_sum_deviation: f64,
    pub final_loss: f64,
    pub initial_crm: Matrix,
    pub crm: Matrix,
}

impl CrmTaskReport {
    /// Whether the learned CRM undoes the scrambling exactly.
    pub fn recovered_inverse(&self) -> bool {
        self.hidden.iter().enumerate().all(|(i, &h)| self.recovered[h] == i)
    }
}

/// Scrambled features `Y = X P` are fed through the CRM and compared with
/// the ordered `X`; the optimum is `CRM = P^T`.
pub fn run_crm_task(cfg: &CrmTaskConfig) -> Result<CrmTaskReport> {
    let c = cfg.channels;
    let mut r = rng::substream(cfg.seed, 0);
    let hidden = rng::permutation(&mut r, c);
    let x = rng::normal_matrix(&mut r, cfg.rows, c, 1.0);
    let y = x.matmul(&permutation_matrix(&hidden))?;
    let mut w = CrmLogits::random(c, cfg.init_std, cfg.temperature, &mut r).w;
    let crm0 = make_crm(&CrmLogits {
        w: w.clone(),
        temperature: cfg.temperature,
    })?;
    let initial_distance = nearest_permutation(&crm0)?.distance;
    let mut moments = AdamMoments::zeros_like([&w]);
    let adam = AdamConfig::new(cfg.lr);
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let wv = tape.leaf(w.clone());
        let crm = make_crm_on_tape(&mut tape, wv, cfg.temperature)?;
        let yv = tape.constant(y.clone());
        let xv = tape.constant(x.clone());
        let recon = tape.matmul(yv, crm)?;
        let task = mean_sq_loss_on_tape(&mut tape, recon, xv)?;
        let reg = crm_loss_on_tape(&mut tape, crm)?;
        let reg = tape.scale(reg, cfg.lambda_crm);
        let loss = tape.add(task, reg)?;
        final_loss = tape.scalar(loss);
        let grads = tape.backward(loss)?;
        adam_step(&mut [&mut w], &[grads.get(wv)], &["crm.w"], &mut moments, &adam)?;
    }
    let crm = make_crm(&CrmLogits {
        w,
        temperature: cfg.temperature,
    })?;
    let near = nearest_permutation(&crm)?;
    let max_col_sum_deviation = (0..c)
        .map(|j| ((0..c).map(|i| crm.get(i, j)).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(CrmTaskReport {
        hidden,
        recovered: near.sigma,
        initial_distance,
        final_distance: near.distance,
        mean_column_max: mean_column_max(&crm),
        max_row_sum_deviation: max_row_sum_deviation(&crm),
        max_col_sum_deviation,
        final_loss,
        initial_crm: crm0,
        crm,
    })
}
