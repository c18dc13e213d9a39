use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::Variant;
use crate::body_model::{body_mesh_on_tape, project_on_tape, BodyTemplate, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::feature_image::{crm_loss_on_tape, make_crm, make_crm_on_tape, CrmLogits, PatchGrid};
use crate::losses::{l3d_on_tape, mean_sq_loss_on_tape, total_loss_on_tape, LossTerms, LossWeights};
use crate::numerics::{rng, Matrix, Tape, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::regressor::{self, ief_regress_on_tape, RegressorParams, ITERATIONS};
use crate::synthetic_data::Split;
use crate::vit_encoder::{self, encoder_forward_on_tape, EncoderConfig, EncoderParams};

const CRM_STREAM: u64 = 11;
const ENCODER_STREAM: u64 = 12;
const REGRESSOR_STREAM: u64 = 13;
/// Scaled logit margin that makes the CRM the identity to double precision.
const IDENTITY_LOGIT: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub frames: usize,
    pub channels: usize,
    pub patch_t: usize,
    pub patch_c: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub out_dim: usize,
    pub regressor_hidden: usize,
    pub crm_temperature: f64,
    pub crm_init_std: f64,
}

impl ModelConfig {
    /// The naive baseline feeds one token per frame, i.e. `1 x C` patches.
    pub fn patch(&self) -> (usize, usize) {
        match self.variant {
            Variant::BaselineNaive => (1, self.channels),
            _ => (self.patch_t, self.patch_c),
        }
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        let (pt, pc) = self.patch();
        PatchGrid::new(self.frames, self.channels, pt, pc)
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        let grid = self.grid()?;
        Ok(EncoderConfig {
            patch_t: grid.patch_t,
            patch_c: grid.patch_c,
            num_patches: grid.num_patches(),
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            out_dim: self.out_dim,
        })
    }
}

/// Closed-form trainable scalar count of the whole pipeline.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    let crm = if cfg.variant.has_crm() { cfg.channels * cfg.channels } else { 0 };
    Ok(crm + vit_encoder::count_params(&cfg.encoder()?) + regressor::count_params(cfg.out_dim, cfg.regressor_hidden))
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub crm: Option<ParamId>,
    pub encoder: EncoderParams,
    pub regressor: RegressorParams,
    pub template: Arc<BodyTemplate>,
    flat_regressor: Matrix,
    grid: PatchGrid,
}

/// Mid-frame inputs and targets for a batch of sequences.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `(B * T) x C`
    pub features: Matrix,
    pub theta: Matrix,
    pub beta: Matrix,
    pub joints: Matrix,
    pub keypoints: Matrix,
    /// `B x 3V`
    pub mesh: Matrix,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.theta.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_split(split: &Split, seqs: &[usize]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let t = split.frames;
        let mid = regressor::mid_frame_index(t)?;
        let c = split.features.cols();
        let mut features = Vec::with_capacity(seqs.len() * t * c);
        for &s in seqs {
            if s >= split.len() {
                return Err(Error::InvalidArgument(format!("sequence {s} out of range")));
            }
            features.extend_from_slice(&split.features.as_slice()[s * t * c..(s + 1) * t * c]);
        }
        let rows = |m: &Matrix, per_frame: bool| {
            Matrix::from_rows(
                &seqs
                    .iter()
                    .map(|&s| m.row(if per_frame { split.row(s, mid) } else { s }))
                    .collect::<Vec<_>>(),
            )
        };
        Ok(Self {
            features: Matrix::from_vec(seqs.len() * t, c, features)?,
            theta: rows(&split.theta, true)?,
            beta: rows(&split.beta, false)?,
            joints: rows(&split.joints, true)?,
            keypoints: rows(&split.keypoints, true)?,
            mesh: rows(&split.mid_mesh, false)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub crm: Option<Var>,
    pub theta: Var,
    pub beta: Var,
    pub cam: Var,
    /// `B x 3V`
    pub verts: Var,
    /// `B x 3J`
    pub joints: Var,
    /// `B x 2J`
    pub keypoints: Var,
}

impl Model {
    pub fn new(config: ModelConfig, template: Arc<BodyTemplate>, seed: u64) -> Result<Self> {
        let grid = config.grid()?;
        let enc_cfg = config.encoder()?;
        let mut store = ParamStore::new();
        let crm = if config.variant.has_crm() {
            let mut r = rng::substream(seed, CRM_STREAM);
            let l = CrmLogits::random(config.channels, config.crm_init_std, config.crm_temperature, &mut r);
            Some(store.add("crm.w", l.w))
        } else {
            None
        };
        let encoder = EncoderParams::init(&mut store, "enc", enc_cfg, &mut rng::substream(seed, ENCODER_STREAM))?;
        let regressor = RegressorParams::init(
            &mut store,
            "reg",
            config.out_dim,
            config.regressor_hidden,
            &mut rng::substream(seed, REGRESSOR_STREAM),
        );
        Ok(Self {
            config,
            store,
            crm,
            encoder,
            regressor,
            flat_regressor: template.flat_regressor(),
            template,
            grid,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable_scalars()
    }

    /// Current CRM (plain), if the variant has one.
    pub fn crm_matrix(&self) -> Option<Result<Matrix>> {
        self.crm.map(|id| {
            make_crm(&CrmLogits {
                w: self.store.get(id).clone(),
                temperature: self.config.crm_temperature,
            })
        })
    }

    /// Pins the CRM to the identity and stops optimizing it, which reduces
    /// the full model to the variant without rearrangement.
    pub fn freeze_crm_identity(&mut self) -> Result<()> {
        let id = self
            .crm
            .ok_or_else(|| Error::InvalidArgument(format!("variant {} has no CRM", self.config.variant)))?;
        let c = self.config.channels;
        *self.store.get_mut(id) = Matrix::identity(c).scale(IDENTITY_LOGIT * self.config.crm_temperature);
        self.store.set_trainable(id, false);
        Ok(())
    }

    /// `features` is `(B * T) x C`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<Forward> {
        let (rows, c) = tape.value(features).shape();
        if c != self.config.channels || rows == 0 || rows % self.config.frames != 0 {
            return Err(Error::shape(
                "model",
                format!("features {rows}x{c} for T={} C={}", self.config.frames, self.config.channels),
            ));
        }
        let (x, crm) = match self.crm {
            Some(id) => {
                let crm = make_crm_on_tape(tape, p.var(id), self.config.crm_temperature)?;
                (tape.matmul(features, crm)?, Some(crm))
            }
            None => (features, None),
        };
        let patches = crate::feature_image::patchify_batch_on_tape(tape, x, &self.grid)?;
        let z = encoder_forward_on_tape(tape, &self.encoder, p, patches)?;
        let reg = ief_regress_on_tape(tape, &self.regressor, p, z, ITERATIONS)?;
        let verts = body_mesh_on_tape(tape, &self.template, reg.theta, reg.beta)?;
        let flat = tape.constant(self.flat_regressor.clone());
        let joints = tape.matmul(verts, flat)?;
        let keypoints = project_on_tape(tape, joints, reg.cam)?;
        Ok(Forward {
            crm,
            theta: reg.theta,
            beta: reg.beta,
            cam: reg.cam,
            verts,
            joints,
            keypoints,
        })
    }

    pub fn loss(
        &self,
        tape: &mut Tape,
        fwd: &Forward,
        batch: &Batch,
        weights: &LossWeights,
    ) -> Result<(Var, LossTerms)> {
        let kp = tape.constant(batch.keypoints.clone());
        let j = tape.constant(batch.joints.clone());
        let th = tape.constant(batch.theta.clone());
        let be = tape.constant(batch.beta.clone());
        let terms = LossTerms {
            l2d: Some(mean_sq_loss_on_tape(tape, fwd.keypoints, kp)?),
            l3d: Some(l3d_on_tape(tape, fwd.joints, j)?),
            pose: Some(mean_sq_loss_on_tape(tape, fwd.theta, th)?),
            shape: Some(mean_sq_loss_on_tape(tape, fwd.beta, be)?),
            crm: match fwd.crm {
                Some(c) => Some(crm_loss_on_tape(tape, c)?),
                None => None,
            },
        };
        Ok((total_loss_on_tape(tape, &terms, weights)?, terms))
    }

    /// Inference on stacked features; returns `(verts B x 3V, joints B x 3J)`.
    pub fn predict(&self, features: &Matrix) -> Result<Prediction> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let x = tape.constant(features.clone());
        let f = self.forward(&mut tape, &p, x)?;
        Ok(Prediction {
            theta: tape.value(f.theta).clone(),
            beta: tape.value(f.beta).clone(),
            cam: tape.value(f.cam).clone(),
            verts: tape.value(f.verts).clone(),
            joints: tape.value(f.joints).clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub theta: Matrix,
    pub beta: Matrix,
    pub cam: Matrix,
    pub verts: Matrix,
    pub joints: Matrix,
}

impl Prediction {
    /// Sample `i` as `(V x 3 mesh, J x 3 joints)`.
    pub fn sample(&self, i: usize) -> Result<(Matrix, Matrix)> {
        let v = self.verts.cols() / 3;
        Ok((
            Matrix::from_vec(v, 3, self.verts.row(i).to_vec())?,
            Matrix::from_vec(NUM_JOINTS, 3, self.joints.row(i).to_vec())?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Config, Preset};
    use crate::synthetic_data::generate_dataset;

    #[test]
    fn identity_crm_reduces_to_nocrm() {
        let cfg = Config {
            train_sequences: 4,
            val_sequences: 1,
            regressor_hidden: 16,
            ..Config::preset(Preset::Toy)
        };
        let data = generate_dataset(&cfg.data_config()).unwrap();
        let mut full = Model::new(cfg.model_config(), data.template.clone(), 3).unwrap();
        let nocrm_cfg = ModelConfig {
            variant: Variant::HmrvitNocrm,
            ..cfg.model_config()
        };
        let nocrm = Model::new(nocrm_cfg, data.template.clone(), 3).unwrap();
        full.freeze_crm_identity().unwrap();
        assert_eq!(full.num_params(), nocrm.num_params());
        let crm = full.crm_matrix().unwrap().unwrap();
        assert!(crm.max_abs_diff(&Matrix::identity(cfg.channels)) < 1e-15);
        let batch = Batch::from_split(&data.train, &[0, 1, 2]).unwrap();
        let a = full.predict(&batch.features).unwrap();
        let b = nocrm.predict(&batch.features).unwrap();
        assert!(a.verts.max_abs_diff(&b.verts) < 1e-9);
        assert!(nocrm.clone().freeze_crm_identity().is_err());
    }

    #[test]
    fn batch_takes_mid_frame_targets() {
        let cfg = Config {
            train_sequences: 3,
            val_sequences: 1,
            ..Config::preset(Preset::Toy)
        };
        let data = generate_dataset(&cfg.data_config()).unwrap();
        let b = Batch::from_split(&data.train, &[2, 0]).unwrap();
        assert_eq!(b.features.shape(), (30, 64));
        assert_eq!(b.theta.row(0), data.train.theta.row(data.train.row(2, 7)));
        assert_eq!(b.features.row(15), data.train.features.row(data.train.row(0, 0)));
        assert!(Batch::from_split(&data.train, &[3]).is_err());
        assert!(Batch::from_split(&data.train, &[]).is_err());
    }

    #[test]
    fn closed_form_count_matches_store() {
        for preset in [Preset::Toy, Preset::Full] {
            for variant in Variant::ALL {
                let mc = ModelConfig {
                    variant,
                    ..Config::preset(preset).model_config()
                };
                if preset == Preset::Full && variant != Variant::HmrvitFull {
                    continue;
                }
                let tmpl = Arc::new(BodyTemplate::procedural(1, 0).unwrap());
                let m = Model::new(mc, tmpl, 0).unwrap();
                assert_eq!(count_params(&mc).unwrap(), m.num_params(), "{preset:?} {variant}");
            }
        }
    }
}
