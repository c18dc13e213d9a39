use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::adam::AdamMoments;
use super::model::Model;
use crate::archive;
use crate::body_model::BodyTemplate;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::numerics::rng::RngState;
use crate::numerics::Matrix;

pub const FORMAT: &str = "hmrvit-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    config: Config,
    step: u64,
    epoch: u64,
    rng: RngState,
    best_val_mpjpe_mm: Option<f64>,
    tensors: Vec<TensorMeta>,
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub model: Model,
    pub moments: AdamMoments,
    pub step: u64,
    pub epoch: u64,
    pub rng: RngState,
    pub best_val_mpjpe_mm: Option<f64>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let store = &self.model.store;
        let meta = Meta {
            config: self.config.clone(),
            step: self.step,
            epoch: self.epoch,
            rng: self.rng.clone(),
            best_val_mpjpe_mm: self.best_val_mpjpe_mm,
            tensors: store
                .iter()
                .map(|p| TensorMeta {
                    name: p.name.clone(),
                    trainable: p.trainable,
                })
                .collect(),
        };
        let names: Vec<(String, String, String)> = store
            .iter()
            .map(|p| (format!("param/{}", p.name), format!("adam_m/{}", p.name), format!("adam_v/{}", p.name)))
            .collect();
        let step = Matrix::row_vector(&[self.moments.step as f64]);
        let mut arrays: Vec<(&str, &Matrix)> = vec![("adam_step", &step)];
        for (i, p) in store.iter().enumerate() {
            arrays.push((&names[i].0, &p.value));
            arrays.push((&names[i].1, &self.moments.m[i]));
            arrays.push((&names[i].2, &self.moments.v[i]));
        }
        archive::save(dir, FORMAT, VERSION, &meta, &arrays)?;
        self.model.template.save(&dir.join("template"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, arrays) = archive::load::<Meta>(dir, FORMAT)?;
        if manifest.version != VERSION {
            return Err(Error::Archive {
                path: dir.to_path_buf(),
                message: format!("unsupported checkpoint version {}", manifest.version),
            });
        }
        let meta = manifest.meta;
        let template = Arc::new(BodyTemplate::load(&dir.join("template"))?);
        let mut model = Model::new(meta.config.model_config(), template, meta.config.seed)?;
        let mut values = Vec::with_capacity(meta.tensors.len());
        let mut m = Vec::with_capacity(meta.tensors.len());
        let mut v = Vec::with_capacity(meta.tensors.len());
        for t in &meta.tensors {
            values.push((t.name.clone(), arrays.require(dir, &format!("param/{}", t.name))?));
            m.push(arrays.require(dir, &format!("adam_m/{}", t.name))?);
            v.push(arrays.require(dir, &format!("adam_v/{}", t.name))?);
        }
        model.store.assign(&values).map_err(|e| Error::Archive {
            path: dir.to_path_buf(),
            message: e.to_string(),
        })?;
        for (id, t) in model.store.ids().collect::<Vec<_>>().into_iter().zip(&meta.tensors) {
            model.store.set_trainable(id, t.trainable);
        }
        let adam_step = arrays.require(dir, "adam_step")?.get(0, 0) as u64;
        Ok(Self {
            config: meta.config,
            model,
            moments: AdamMoments { m, v, step: adam_step },
            step: meta.step,
            epoch: meta.epoch,
            rng: meta.rng,
            best_val_mpjpe_mm: meta.best_val_mpjpe_mm,
        })
    }
}
