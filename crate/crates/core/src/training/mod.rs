//! Optimizer, deterministic training loop, evaluation and checkpoints.

mod adam;
mod checkpoint;
pub mod crm_task;
mod model;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

pub use adam::{adam_step, AdamConfig, AdamMoments};
pub use checkpoint::Checkpoint;
pub use model::{count_params, Batch, Forward, Model, ModelConfig, Prediction};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::feature_image::{max_row_sum_deviation, nearest_permutation};
use crate::losses::LossComponents;
use crate::metrics::{evaluate_sample, EvalReport, SampleMetrics};
use crate::numerics::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::numerics::rng::{self, RngState};
use crate::numerics::{Matrix, Tape};
use crate::params::ParamId;
use crate::synthetic_data::{Dataset, Split};

const SHUFFLE_STREAM: u64 = 21;
pub const DIVERGENCE_LOSS: f64 = 1e8;
pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CHECKPOINT: &str = "checkpoint_last";
pub const BEST_CHECKPOINT: &str = "checkpoint_best";
pub const METRICS_HEADER: &str = "epoch,step,l2d,l3d,pose,shape,crm,total,crm_rowsum_dev,crm_perm_dist,\
val_pve_mm,val_mpjpe_mm,val_pa_mpjpe_mm";

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Metrics and checkpoints go here; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub quiet: bool,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub model: Model,
    /// Validation report of the final parameters.
    pub final_eval: EvalReport,
    /// Total loss of every optimizer step.
    pub losses: Vec<f64>,
    pub steps: u64,
}

/// Per-sample validation metrics, in split order.
pub fn evaluate_samples(model: &Model, split: &Split, batch_size: usize) -> Result<Vec<SampleMetrics>> {
    let ids: Vec<usize> = (0..split.len()).collect();
    let mut out = Vec::with_capacity(split.len());
    for chunk in ids.chunks(batch_size.max(1)) {
        let batch = Batch::from_split(split, chunk)?;
        let pred = model.predict(&batch.features)?;
        for i in 0..chunk.len() {
            let (mesh, joints) = pred.sample(i)?;
            let t_mesh = Matrix::from_vec(mesh.rows(), 3, batch.mesh.row(i).to_vec())?;
            let t_joints = Matrix::from_vec(joints.rows(), 3, batch.joints.row(i).to_vec())?;
            out.push(evaluate_sample(&model.template, &mesh, &t_mesh, &joints, &t_joints)?);
        }
    }
    Ok(out)
}

pub fn evaluate(model: &Model, split: &Split, batch_size: usize, config_id: &str, seed: u64) -> Result<EvalReport> {
    Ok(EvalReport::from_samples(
        config_id,
        seed,
        &evaluate_samples(model, split, batch_size)?,
    ))
}

/// Loss, gradient and Adam update on one batch; returns the loss terms.
/// Parameters are left untouched when the loss diverges.
pub fn train_step(
    model: &mut Model,
    batch: &Batch,
    cfg: &Config,
    moments: &mut AdamMoments,
) -> Result<(f64, LossComponents)> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let x = tape.constant(batch.features.clone());
    let fwd = model.forward(&mut tape, &p, x)?;
    let (total, terms) = model.loss(&mut tape, &fwd, batch, &cfg.weights())?;
    let loss = tape.scalar(total);
    let comps = terms.values(&tape);
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Ok((loss, comps));
    }
    let grads = tape.backward(total)?;
    let ids: Vec<_> = model.store.ids().collect();
    let names: Vec<String> = model.store.iter().map(|q| q.name.clone()).collect();
    let trainable: Vec<bool> = model.store.iter().map(|q| q.trainable).collect();
    let gs: Vec<Option<&Matrix>> = ids
        .iter()
        .zip(&trainable)
        .map(|(&id, &t)| if t { grads.get(p.var(id)) } else { None })
        .collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut params: Vec<&mut Matrix> = model.store.values_mut();
    adam_step(&mut params, &gs, &name_refs, moments, &AdamConfig::new(cfg.lr))?;
    Ok((loss, comps))
}

/// Finite-difference check of the total loss gradient with respect to every
/// trainable tensor; the report's tensor indices follow the returned names.
pub fn check_model_gradients(
    model: &Model,
    batch: &Batch,
    cfg: &Config,
    opts: &GradCheckOptions,
) -> Result<(GradCheckReport, Vec<String>)> {
    let weights = cfg.weights();
    let ids: Vec<ParamId> = model.store.ids().filter(|&id| model.store.param(id).trainable).collect();
    let names = ids.iter().map(|&id| model.store.param(id).name.clone()).collect();
    let params: Vec<Matrix> = ids.iter().map(|&id| model.store.get(id).clone()).collect();

    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let x = tape.constant(batch.features.clone());
    let fwd = model.forward(&mut tape, &p, x)?;
    let (total, _) = model.loss(&mut tape, &fwd, batch, &weights)?;
    let grads = tape.backward(total)?;
    let analytic: Vec<Matrix> = ids
        .iter()
        .zip(&params)
        .map(|(&id, v)| grads.get(p.var(id)).cloned().unwrap_or_else(|| Matrix::zeros(v.rows(), v.cols())))
        .collect();

    let mut probe = model.clone();
    let report = grad_check(
        |values| {
            for (&id, v) in ids.iter().zip(values) {
                probe.store.get_mut(id).clone_from(v);
            }
            let mut tape = Tape::new();
            let p = probe.store.bind_frozen(&mut tape);
            let x = tape.constant(batch.features.clone());
            let fwd = probe.forward(&mut tape, &p, x)?;
            let (total, _) = probe.loss(&mut tape, &fwd, batch, &weights)?;
            Ok(tape.scalar(total))
        },
        &params,
        &analytic,
        opts,
    )?;
    Ok((report, names))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

struct MetricsLog {
    path: Option<PathBuf>,
}

impl MetricsLog {
    fn create(dir: Option<&Path>) -> Result<Self> {
        let path = dir.map(|d| d.join(METRICS_FILE));
        if let Some(p) = &path {
            fs::write(p, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(p, e))?;
        }
        Ok(Self { path })
    }

    fn append(&self, line: String) -> Result<()> {
        let Some(p) = &self.path else { return Ok(()) };
        let mut f = OpenOptions::new().append(true).open(p).map_err(|e| Error::io(p, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(p, e))
    }
}

/// Trains `cfg.variant` on `data.train`, validating on `data.val` after every
/// epoch. Deterministic given the config and dataset.
pub fn train(cfg: &Config, data: &Dataset, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.config.frames != cfg.frames || data.config.channels != cfg.channels {
        return Err(Error::Config {
            key: "channels".into(),
            message: format!(
                "dataset is {}x{}, config expects {}x{}",
                data.config.frames, data.config.channels, cfg.frames, cfg.channels
            ),
        });
    }
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let model = Model::new(cfg.model_config(), data.template.clone(), cfg.seed)?;
    train_model(cfg, data, model, opts)
}

/// [`train`] starting from given parameters.
pub fn train_model(cfg: &Config, data: &Dataset, mut model: Model, opts: &TrainOptions) -> Result<TrainSummary> {
    let dir = opts.out_dir.as_deref();
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let log = MetricsLog::create(dir)?;
    let mut moments = AdamMoments::zeros_like(model.store.iter().map(|p| &p.value));
    let mut shuffle = rng::substream(cfg.seed, SHUFFLE_STREAM);
    let mut best: Option<f64> = None;
    let mut losses = Vec::new();
    let mut step: u64 = 0;
    let id = cfg.variant.name();

    let checkpoint = |model: &Model, moments: &AdamMoments, rng: &rng::Rng, step: u64, epoch: u64, best: Option<f64>| {
        Checkpoint {
            config: cfg.clone(),
            model: model.clone(),
            moments: moments.clone(),
            step,
            epoch,
            rng: RngState::capture(rng),
            best_val_mpjpe_mm: best,
        }
    };
    if let Some(d) = dir {
        if cfg.epochs == 0 {
            checkpoint(&model, &moments, &shuffle, 0, 0, None).save(&d.join(LAST_CHECKPOINT))?;
        }
    }

    let mut last_eval = None;
    for epoch in 1..=cfg.epochs as u64 {
        let order = rng::permutation(&mut shuffle, data.train.len());
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::from_split(&data.train, chunk)?;
            let (loss, comps) = train_step(&mut model, &batch, cfg, &mut moments)?;
            step += 1;
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                let ck = dir.map(|d| d.join(LAST_CHECKPOINT));
                if let Some(p) = &ck {
                    checkpoint(&model, &moments, &shuffle, step - 1, epoch - 1, best).save(p)?;
                }
                return Err(Error::Divergence {
                    step: step as usize,
                    loss,
                    checkpoint: ck,
                });
            }
            losses.push(loss);
            if step % cfg.log_every as u64 == 0 {
                let (dev, dist) = match model.crm_matrix() {
                    Some(crm) => {
                        let crm = crm?;
                        (Some(max_row_sum_deviation(&crm)), Some(nearest_permutation(&crm)?.distance))
                    }
                    None => (None, None),
                };
                log.append(format!(
                    "{epoch},{step},{},{},{},{},{},{loss},{},{},,,",
                    fmt_opt(comps.l2d),
                    fmt_opt(comps.l3d),
                    fmt_opt(comps.pose),
                    fmt_opt(comps.shape),
                    fmt_opt(comps.crm),
                    fmt_opt(dev),
                    fmt_opt(dist),
                ))?;
            }
        }
        let report = evaluate(&model, &data.val, cfg.batch_size, id, cfg.seed)?;
        log.append(format!(
            "{epoch},{step},,,,,,,,,{},{},{}",
            report.pve_mm, report.mpjpe_mm, report.pa_mpjpe_mm
        ))?;
        if !opts.quiet {
            eprintln!(
                "[{id}] epoch {epoch}/{} step {step}: val mpjpe {:.2} mm, pa-mpjpe {:.2} mm, pve {:.2} mm",
                cfg.epochs, report.mpjpe_mm, report.pa_mpjpe_mm, report.pve_mm
            );
        }
        let improved = best.is_none_or(|b| report.mpjpe_mm < b);
        if improved {
            best = Some(report.mpjpe_mm);
        }
        if let Some(d) = dir {
            let ck = checkpoint(&model, &moments, &shuffle, step, epoch, best);
            ck.save(&d.join(LAST_CHECKPOINT))?;
            if improved {
                ck.save(&d.join(BEST_CHECKPOINT))?;
            }
        }
        last_eval = Some(report);
    }
    let final_eval = match last_eval {
        Some(r) => r,
        None => evaluate(&model, &data.val, cfg.batch_size, id, cfg.seed)?,
    };
    Ok(TrainSummary {
        model,
        final_eval,
        losses,
        steps: step,
    })
}
