//! Flat run configuration: preset defaults, then a JSON file, then flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::baselines::Variant;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::synthetic_data::DataConfig;
use crate::training::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Toy,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub preset: Preset,
    pub seed: u64,
    pub variant: Variant,

    pub frames: usize,
    pub channels: usize,
    pub train_sequences: usize,
    pub val_sequences: usize,
    pub noise_std: f64,
    pub verts_per_joint: usize,
    pub amplitude_max: f64,

    pub patch_t: usize,
    pub patch_c: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub out_dim: usize,
    pub regressor_hidden: usize,
    pub crm_temperature: f64,
    pub crm_init_std: f64,

    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub log_every: usize,
    pub lambda_2d: f64,
    pub lambda_3d: f64,
    pub lambda_pose: f64,
    pub lambda_shape: f64,
    pub lambda_crm: f64,
}

impl Config {
    pub fn preset(preset: Preset) -> Self {
        let w = LossWeights::default();
        let toy = Self {
            preset,
            seed: 0,
            variant: Variant::HmrvitFull,
            frames: 15,
            channels: 64,
            train_sequences: 2000,
            val_sequences: 200,
            noise_std: 0.01,
            verts_per_joint: 4,
            amplitude_max: 0.5,
            patch_t: 3,
            patch_c: 8,
            dim: 32,
            depth: 2,
            heads: 4,
            out_dim: 64,
            regressor_hidden: 1024,
            crm_temperature: 0.02,
            crm_init_std: 0.02,
            lr: 1e-3,
            batch_size: 32,
            epochs: 30,
            log_every: 10,
            lambda_2d: w.l2d,
            lambda_3d: w.l3d,
            lambda_pose: w.pose,
            lambda_shape: w.shape,
            lambda_crm: w.crm,
        };
        match preset {
            Preset::Toy => toy,
            Preset::Full => Self {
                channels: 2048,
                patch_c: 128,
                dim: 512,
                depth: 4,
                heads: 8,
                out_dim: 2048,
                epochs: 300,
                lr: 5e-5,
                ..toy
            },
        }
    }

    /// `preset` defaults overlaid with the keys of `file` (a JSON object),
    /// then with `overrides`. Unknown or ill-typed keys are reported by name.
    pub fn resolve(preset: Preset, file: Option<&Value>, overrides: &Map<String, Value>) -> Result<Self> {
        let mut preset = preset;
        if let Some(Value::Object(m)) = file {
            if let Some(p) = m.get("preset") {
                preset = serde_json::from_value(p.clone()).map_err(|e| Error::Config {
                    key: "preset".into(),
                    message: e.to_string(),
                })?;
            }
        }
        if let Some(p) = overrides.get("preset") {
            preset = serde_json::from_value(p.clone()).map_err(|e| Error::Config {
                key: "preset".into(),
                message: e.to_string(),
            })?;
        }
        let Value::Object(mut merged) = serde_json::to_value(Self::preset(preset))? else {
            unreachable!("config serializes to an object")
        };
        let mut layers: Vec<&Map<String, Value>> = Vec::new();
        match file {
            Some(Value::Object(m)) => layers.push(m),
            Some(_) => {
                return Err(Error::Config {
                    key: "<root>".into(),
                    message: "config file must hold a JSON object".into(),
                })
            }
            None => {}
        }
        layers.push(overrides);
        for layer in layers {
            for (k, v) in layer {
                if !merged.contains_key(k) {
                    return Err(Error::Config {
                        key: k.clone(),
                        message: "unknown key".into(),
                    });
                }
                let mut probe = merged.clone();
                probe.insert(k.clone(), v.clone());
                if let Err(e) = serde_json::from_value::<Self>(Value::Object(probe)) {
                    return Err(Error::Config {
                        key: k.clone(),
                        message: e.to_string(),
                    });
                }
                merged.insert(k.clone(), v.clone());
            }
        }
        let cfg: Self = serde_json::from_value(Value::Object(merged))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_file(path: &Path) -> Result<Value> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config {
            key: "<file>".into(),
            message: format!("{}: {e}", path.display()),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            l2d: self.lambda_2d,
            l3d: self.lambda_3d,
            pose: self.lambda_pose,
            shape: self.lambda_shape,
            crm: self.lambda_crm,
        }
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            seed: self.seed,
            frames: self.frames,
            channels: self.channels,
            train_sequences: self.train_sequences,
            val_sequences: self.val_sequences,
            noise_std: self.noise_std,
            verts_per_joint: self.verts_per_joint,
            amplitude_max: self.amplitude_max,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            frames: self.frames,
            channels: self.channels,
            patch_t: self.patch_t,
            patch_c: self.patch_c,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            out_dim: self.out_dim,
            regressor_hidden: self.regressor_hidden,
            crm_temperature: self.crm_temperature,
            crm_init_std: self.crm_init_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, message: &str| {
            Err(Error::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err("lr", "must be positive");
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be at least 1");
        }
        if self.log_every == 0 {
            return err("log_every", "must be at least 1");
        }
        if self.variant != Variant::BaselineNaive {
            if self.patch_t == 0 || self.frames % self.patch_t != 0 {
                return err("patch_t", "must divide frames");
            }
            if self.patch_c == 0 || self.channels % self.patch_c != 0 {
                return err("patch_c", "must divide channels");
            }
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return err("heads", "must divide dim");
        }
        if !(self.crm_temperature > 0.0) {
            return err("crm_temperature", "must be positive");
        }
        if self.regressor_hidden == 0 || self.out_dim == 0 || self.dim == 0 {
            return err("dim", "dimensions must be positive");
        }
        for (key, v) in [
            ("lambda_2d", self.lambda_2d),
            ("lambda_3d", self.lambda_3d),
            ("lambda_pose", self.lambda_pose),
            ("lambda_shape", self.lambda_shape),
            ("lambda_crm", self.lambda_crm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(key, "must be finite and non-negative");
            }
        }
        self.data_config().validate().map_err(|e| match e {
            Error::Config { key, message } => Error::Config {
                key: key.trim_start_matches("data.").into(),
                message,
            },
            e => e,
        })
    }
}
