//! Synthetic motion sequences and a frozen feature encoder stub that maps
//! each frame's generative state to a `C`-channel feature vector.
//!
//! Channels are produced block-ordered by joint (block `k` spans
//! `[k*b, (k+1)*b)` with `b = floor(C/24)`; the `C - 24b` leftover channels
//! belong to the root) and then scrambled by a hidden permutation.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::body_model::{
    body_mesh, project, regress_joints, BodyTemplate, CameraParams, NUM_BETAS, NUM_JOINTS, POSE_DIM,
};
use crate::error::{Error, Result};
use crate::numerics::{rng, Matrix};

/// `[theta; beta; s; tx; ty]`.
pub const STATE_DIM: usize = POSE_DIM + NUM_BETAS + 3;

const AXES_STREAM: u64 = 1;
const STUB_STREAM: u64 = 2;
const TRAIN_STREAM: u64 = 1 << 20;
const VAL_STREAM: u64 = 2 << 20;
const NOISE_OFFSET: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionConfig {
    /// Upper bound on per-joint amplitudes, radians.
    pub amplitude_max: f64,
    pub omega_min: f64,
    pub omega_max: f64,
    pub beta_std: f64,
    pub beta_clip: f64,
    /// One rotation axis per joint, shared by every sequence of a dataset.
    pub axes: Vec<[f64; 3]>,
}

impl MotionConfig {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::substream(seed, AXES_STREAM);
        let axes = (0..NUM_JOINTS)
            .map(|_| loop {
                let v = [rng::normal(&mut r), rng::normal(&mut r), rng::normal(&mut r)];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-6 {
                    break [v[0] / n, v[1] / n, v[2] / n];
                }
            })
            .collect();
        Self {
            amplitude_max: 0.5,
            omega_min: 0.05,
            omega_max: 0.3,
            beta_std: 0.5,
            beta_clip: 2.0,
            axes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    /// `T x 72`
    pub theta: Matrix,
    pub beta: Vec<f64>,
    /// `T x 3` rows `(s, tx, ty)`
    pub cam: Matrix,
    /// `T x 72` joint positions, `3J` per row
    pub joints: Matrix,
    /// `T x 48` projected joints, `2J` per row
    pub keypoints: Matrix,
    /// Mid-frame mesh, `V x 3`
    pub mid_mesh: Matrix,
}

impl MotionSequence {
    pub fn frames(&self) -> usize {
        self.theta.rows()
    }
}

fn sample_unit(r: &mut rng::Rng) -> f64 {
    rng::uniform(r, 0.0, 1.0)
}

/// Per-frame ground truth derived through the body model.
pub fn frame_targets(
    tmpl: &BodyTemplate,
    theta: &[f64],
    beta: &[f64],
    cam: &CameraParams,
) -> Result<(Matrix, Matrix, Matrix)> {
    let mesh = body_mesh(tmpl, theta, beta)?;
    let joints = regress_joints(tmpl, &mesh)?;
    let kp = project(&joints, cam)?;
    Ok((mesh, joints, kp))
}

pub fn generate_sequence(tmpl: &BodyTemplate, seed: u64, frames: usize, cfg: &MotionConfig) -> Result<MotionSequence> {
    if frames == 0 {
        return Err(Error::InvalidArgument("sequence needs at least one frame".into()));
    }
    if cfg.axes.len() != NUM_JOINTS {
        return Err(Error::InvalidArgument(format!("{} axes for {NUM_JOINTS} joints", cfg.axes.len())));
    }
    let mut r = rng::seeded(seed);
    let amp: Vec<f64> = (0..NUM_JOINTS).map(|_| cfg.amplitude_max * sample_unit(&mut r)).collect();
    let omega: Vec<f64> = (0..NUM_JOINTS)
        .map(|_| cfg.omega_min + (cfg.omega_max - cfg.omega_min) * sample_unit(&mut r))
        .collect();
    let phase: Vec<f64> = (0..NUM_JOINTS).map(|_| 2.0 * PI * sample_unit(&mut r)).collect();
    let beta: Vec<f64> = (0..NUM_BETAS)
        .map(|_| (cfg.beta_std * rng::normal(&mut r)).clamp(-cfg.beta_clip, cfg.beta_clip))
        .collect();
    // slowly varying camera, kept inside s in [0.7, 1.3]
    let s0 = 0.8 + 0.4 * sample_unit(&mut r);
    let t0 = [0.4 * sample_unit(&mut r) - 0.2, 0.4 * sample_unit(&mut r) - 0.2];
    let cam_phase = 2.0 * PI * sample_unit(&mut r);
    let cam_omega = 0.02 + 0.08 * sample_unit(&mut r);

    let mid = frames / 2;
    let mut theta = Matrix::zeros(frames, POSE_DIM);
    let mut cam = Matrix::zeros(frames, 3);
    let mut joints = Matrix::zeros(frames, 3 * NUM_JOINTS);
    let mut keypoints = Matrix::zeros(frames, 2 * NUM_JOINTS);
    let mut mid_mesh = Matrix::zeros(0, 3);
    for t in 0..frames {
        let tf = t as f64;
        for j in 0..NUM_JOINTS {
            let a = amp[j] * (omega[j] * tf + phase[j]).sin();
            for c in 0..3 {
                theta.set(t, 3 * j + c, a * cfg.axes[j][c]);
            }
        }
        let wave = (cam_omega * tf + cam_phase).sin();
        let c = CameraParams::new(
            (s0 + 0.1 * wave).clamp(0.7, 1.3),
            [t0[0] + 0.05 * wave, t0[1] - 0.05 * wave],
        )?;
        cam.row_mut(t).copy_from_slice(&[c.s, c.t[0], c.t[1]]);
        let (mesh, j, k) = frame_targets(tmpl, theta.row(t), &beta, &c)?;
        joints.row_mut(t).copy_from_slice(j.as_slice());
        keypoints.row_mut(t).copy_from_slice(k.as_slice());
        if t == mid {
            mid_mesh = mesh;
        }
    }
    Ok(MotionSequence {
        theta,
        beta,
        cam,
        joints,
        keypoints,
        mid_mesh,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStub {
    /// `C x STATE_DIM`, block-ordered rows
    pub g: Matrix,
    pub bias: Vec<f64>,
    /// Output channel `i` reads block-ordered channel `perm[i]`.
    pub perm: Vec<usize>,
    pub noise_std: f64,
}

/// Block index (joint) of each block-ordered channel.
pub fn channel_blocks(channels: usize) -> Result<Vec<usize>> {
    let b = channels / NUM_JOINTS;
    if b == 0 {
        return Err(Error::InvalidArgument(format!(
            "need at least {NUM_JOINTS} channels, got {channels}"
        )));
    }
    Ok((0..channels).map(|i| if i < NUM_JOINTS * b { i / b } else { 0 }).collect())
}

impl EncoderStub {
    pub const STRONG: f64 = 2.0;
    pub const WEAK: f64 = 0.05;
    /// Root-block loading on shape and camera, lower so those wider
    /// inputs do not saturate the root channels.
    pub const GLOBAL: f64 = 0.5;

    /// Each channel loads strongly on its joint's pose entries (the root
    /// block also on shape and camera) and weakly on everything else.
    pub fn new(channels: usize, noise_std: f64, seed: u64, scramble: bool) -> Result<Self> {
        let blocks = channel_blocks(channels)?;
        let mut r = rng::substream(seed, STUB_STREAM);
        let mut g = Matrix::zeros(channels, STATE_DIM);
        for (i, &k) in blocks.iter().enumerate() {
            for c in 0..STATE_DIM {
                let std = if c < POSE_DIM && c / 3 == k {
                    Self::STRONG
                } else if c >= POSE_DIM && k == 0 {
                    Self::GLOBAL
                } else {
                    Self::WEAK
                };
                g.set(i, c, std * rng::normal(&mut r));
            }
        }
        let bias = (0..channels).map(|_| 0.1 * rng::normal(&mut r)).collect();
        let perm = if scramble {
            rng::permutation(&mut r, channels)
        } else {
            (0..channels).collect()
        };
        Ok(Self {
            g,
            bias,
            perm,
            noise_std,
        })
    }

    pub fn channels(&self) -> usize {
        self.g.rows()
    }

    /// Hidden permutation as a matrix `P` with `f = h P` for row vectors.
    pub fn permutation_matrix(&self) -> Matrix {
        let c = self.channels();
        let mut p = Matrix::zeros(c, c);
        for (i, &src) in self.perm.iter().enumerate() {
            p.set(src, i, 1.0);
        }
        p
    }

    /// Noise-free block-ordered activations of one state vector.
    pub fn activations(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != STATE_DIM {
            return Err(Error::shape("encoder stub", format!("state of length {}", state.len())));
        }
        Ok((0..self.channels())
            .map(|i| {
                let pre: f64 = self.g.row(i).iter().zip(state).map(|(a, b)| a * b).sum();
                (pre + self.bias[i]).tanh()
            })
            .collect())
    }
}

pub fn frame_state(seq: &MotionSequence, t: usize) -> Vec<f64> {
    let mut s = seq.theta.row(t).to_vec();
    s.extend_from_slice(&seq.beta);
    s.extend_from_slice(seq.cam.row(t));
    s
}

/// `T x C` features; `noise` supplies the additive Gaussian noise.
pub fn encode_frames(stub: &EncoderStub, seq: &MotionSequence, noise: &mut rng::Rng) -> Result<Matrix> {
    let c = stub.channels();
    let mut out = Matrix::zeros(seq.frames(), c);
    for t in 0..seq.frames() {
        let h = stub.activations(&frame_state(seq, t))?;
        let row = out.row_mut(t);
        for (i, &src) in stub.perm.iter().enumerate() {
            row[i] = h[src] + stub.noise_std * rng::normal(noise);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub frames: usize,
    pub channels: usize,
    pub train_sequences: usize,
    pub val_sequences: usize,
    pub noise_std: f64,
    pub verts_per_joint: usize,
    pub amplitude_max: f64,
}

impl DataConfig {
    pub fn toy(seed: u64) -> Self {
        Self {
            seed,
            frames: 15,
            channels: 64,
            train_sequences: 2000,
            val_sequences: 200,
            noise_std: 0.01,
            verts_per_joint: 4,
            amplitude_max: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, message: String| {
            Err(Error::Config {
                key: format!("data.{key}"),
                message,
            })
        };
        if self.frames == 0 {
            return err("frames", "must be at least 1".into());
        }
        if self.channels < NUM_JOINTS {
            return err("channels", format!("must be at least {NUM_JOINTS}"));
        }
        if self.verts_per_joint == 0 {
            return err("verts_per_joint", "must be at least 1".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return err("noise_std", "must be finite and non-negative".into());
        }
        if !(self.amplitude_max >= 0.0 && self.amplitude_max < PI) {
            return err("amplitude_max", "must lie in [0, pi)".into());
        }
        Ok(())
    }
}

/// One split, sequences stacked along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub frames: usize,
    /// `(S * T) x C`
    pub features: Matrix,
    /// `(S * T) x 72`
    pub theta: Matrix,
    /// `S x 10`
    pub beta: Matrix,
    /// `(S * T) x 3`
    pub cam: Matrix,
    /// `(S * T) x 72`
    pub joints: Matrix,
    /// `(S * T) x 48`
    pub keypoints: Matrix,
    /// `S x 3V`
    pub mid_mesh: Matrix,
}

impl Split {
    pub fn len(&self) -> usize {
        self.beta.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row `t` of sequence `s` in the stacked per-frame arrays.
    pub fn row(&self, s: usize, t: usize) -> usize {
        s * self.frames + t
    }

    fn arrays(&self) -> [(&'static str, &Matrix); 7] {
        [
            ("features", &self.features),
            ("theta", &self.theta),
            ("beta", &self.beta),
            ("cam", &self.cam),
            ("joints", &self.joints),
            ("keypoints", &self.keypoints),
            ("mid_mesh", &self.mid_mesh),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DataConfig,
    pub template: Arc<BodyTemplate>,
    pub stub: EncoderStub,
    pub train: Split,
    pub val: Split,
}

fn generate_split(
    cfg: &DataConfig,
    tmpl: &BodyTemplate,
    motion: &MotionConfig,
    stub: &EncoderStub,
    count: usize,
    stream: u64,
) -> Result<Split> {
    let (t, c, v) = (cfg.frames, cfg.channels, tmpl.num_vertices());
    let mut split = Split {
        frames: t,
        features: Matrix::zeros(count * t, c),
        theta: Matrix::zeros(count * t, POSE_DIM),
        beta: Matrix::zeros(count, NUM_BETAS),
        cam: Matrix::zeros(count * t, 3),
        joints: Matrix::zeros(count * t, 3 * NUM_JOINTS),
        keypoints: Matrix::zeros(count * t, 2 * NUM_JOINTS),
        mid_mesh: Matrix::zeros(count, 3 * v),
    };
    for s in 0..count {
        let seq_seed = rng::substream(cfg.seed, stream + s as u64).next_u64();
        let seq = generate_sequence(tmpl, seq_seed, t, motion)?;
        let mut noise = rng::substream(cfg.seed, NOISE_OFFSET + stream + s as u64);
        let feats = encode_frames(stub, &seq, &mut noise)?;
        let r0 = s * t * c;
        split.features.as_mut_slice()[r0..r0 + t * c].copy_from_slice(feats.as_slice());
        let copy = |dst: &mut Matrix, src: &Matrix| {
            let w = src.cols();
            dst.as_mut_slice()[s * t * w..(s + 1) * t * w].copy_from_slice(src.as_slice());
        };
        copy(&mut split.theta, &seq.theta);
        copy(&mut split.cam, &seq.cam);
        copy(&mut split.joints, &seq.joints);
        copy(&mut split.keypoints, &seq.keypoints);
        split.beta.row_mut(s).copy_from_slice(&seq.beta);
        split.mid_mesh.row_mut(s).copy_from_slice(seq.mid_mesh.as_slice());
    }
    Ok(split)
}

pub fn generate_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let template = Arc::new(BodyTemplate::procedural(cfg.verts_per_joint, cfg.seed)?);
    let motion = MotionConfig {
        amplitude_max: cfg.amplitude_max,
        ..MotionConfig::new(cfg.seed)
    };
    let stub = EncoderStub::new(cfg.channels, cfg.noise_std, cfg.seed, true)?;
    let train = generate_split(cfg, &template, &motion, &stub, cfg.train_sequences, TRAIN_STREAM)?;
    let val = generate_split(cfg, &template, &motion, &stub, cfg.val_sequences, VAL_STREAM)?;
    Ok(Dataset {
        config: cfg.clone(),
        template,
        stub,
        train,
        val,
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    config: DataConfig,
    stub_perm: Vec<usize>,
    stub_noise_std: f64,
}

const FORMAT: &str = "hmrvit-dataset";

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = DatasetMeta {
            config: self.config.clone(),
            stub_perm: self.stub.perm.clone(),
            stub_noise_std: self.stub.noise_std,
        };
        let bias = Matrix::row_vector(&self.stub.bias);
        archive::save(dir, FORMAT, 1, &meta, &[("stub_g", &self.stub.g), ("stub_bias", &bias)])?;
        self.template.save(&dir.join("template"))?;
        for (name, split) in [("train", &self.train), ("val", &self.val)] {
            archive::save(&dir.join(name), "hmrvit-split", 1, &split.frames, &split.arrays())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, arrays) = archive::load::<DatasetMeta>(dir, FORMAT)?;
        let meta = manifest.meta;
        let stub = EncoderStub {
            g: arrays.require(dir, "stub_g")?,
            bias: arrays.require(dir, "stub_bias")?.into_vec(),
            perm: meta.stub_perm,
            noise_std: meta.stub_noise_std,
        };
        let template = Arc::new(BodyTemplate::load(&dir.join("template"))?);
        let load_split = |name: &str| -> Result<Split> {
            let d = dir.join(name);
            let (m, a) = archive::load::<usize>(&d, "hmrvit-split")?;
            Ok(Split {
                frames: m.meta,
                features: a.require(&d, "features")?,
                theta: a.require(&d, "theta")?,
                beta: a.require(&d, "beta")?,
                cam: a.require(&d, "cam")?,
                joints: a.require(&d, "joints")?,
                keypoints: a.require(&d, "keypoints")?,
                mid_mesh: a.require(&d, "mid_mesh")?,
            })
        };
        Ok(Self {
            train: load_split("train")?,
            val: load_split("val")?,
            config: meta.config,
            template,
            stub,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpl() -> BodyTemplate {
        BodyTemplate::procedural(4, 0).unwrap()
    }

    #[test]
    fn zero_amplitude_is_rest_pose() {
        let cfg = MotionConfig {
            amplitude_max: 0.0,
            ..MotionConfig::new(0)
        };
        let seq = generate_sequence(&tmpl(), 5, 9, &cfg).unwrap();
        assert!(seq.theta.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_sequence() {
        let cfg = MotionConfig::new(1);
        let a = generate_sequence(&tmpl(), 9, 15, &cfg).unwrap();
        let b = generate_sequence(&tmpl(), 9, 15, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_sequence(&tmpl(), 10, 15, &cfg).unwrap();
        assert_ne!(a.theta, c.theta);
    }

    #[test]
    fn sequence_ranges() {
        let cfg = MotionConfig::new(2);
        for seed in 0..20 {
            let seq = generate_sequence(&tmpl(), seed, 15, &cfg).unwrap();
            for t in 0..15 {
                for j in 0..NUM_JOINTS {
                    let n: f64 = (0..3).map(|c| seq.theta.get(t, 3 * j + c).powi(2)).sum::<f64>().sqrt();
                    assert!(n <= 0.5 + 1e-12);
                }
                let s = seq.cam.get(t, 0);
                assert!((0.7..=1.3).contains(&s));
            }
            assert!(seq.beta.iter().all(|b| b.abs() <= 2.0));
        }
    }

    #[test]
    fn ground_truth_is_consistent() {
        let tm = tmpl();
        let cfg = MotionConfig::new(3);
        let seq = generate_sequence(&tm, 4, 15, &cfg).unwrap();
        for t in 0..15 {
            let cam = CameraParams::new(seq.cam.get(t, 0), [seq.cam.get(t, 1), seq.cam.get(t, 2)]).unwrap();
            let mesh = body_mesh(&tm, seq.theta.row(t), &seq.beta).unwrap();
            let j = regress_joints(&tm, &mesh).unwrap();
            let k = project(&j, &cam).unwrap();
            for (a, b) in k.as_slice().iter().zip(seq.keypoints.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in j.as_slice().iter().zip(seq.joints.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
            if t == 7 {
                assert!(mesh.max_abs_diff(&seq.mid_mesh) < 1e-12);
            }
        }
    }

    #[test]
    fn noise_free_identical_frames_encode_identically() {
        let stub = EncoderStub::new(64, 0.0, 0, true).unwrap();
        let cfg = MotionConfig {
            amplitude_max: 0.0,
            ..MotionConfig::new(0)
        };
        let mut seq = generate_sequence(&tmpl(), 1, 4, &cfg).unwrap();
        let c = seq.cam.row(0).to_vec();
        for t in 1..4 {
            seq.cam.row_mut(t).copy_from_slice(&c);
        }
        let f = encode_frames(&stub, &seq, &mut rng::seeded(0)).unwrap();
        for t in 1..4 {
            assert_eq!(f.row(t), f.row(0));
        }
    }

    #[test]
    fn blocks_cover_channels() {
        let b = channel_blocks(64).unwrap();
        assert_eq!(b[0], 0);
        assert_eq!(b[2], 1);
        assert_eq!(b[47], 23);
        assert!(b[48..].iter().all(|&k| k == 0));
        assert!(channel_blocks(23).is_err());
    }

    #[test]
    fn sensitivity_concentrates_in_joint_block() {
        let stub = EncoderStub::new(64, 0.0, 3, false).unwrap();
        let blocks = channel_blocks(64).unwrap();
        let base = vec![0.0; STATE_DIM];
        let h0 = stub.activations(&base).unwrap();
        for k in 1..NUM_JOINTS {
            let mut own = 0.0;
            let mut other = 0.0;
            for c in 0..3 {
                let mut s = base.clone();
                s[3 * k + c] = 1e-4;
                let h = stub.activations(&s).unwrap();
                for (i, (a, b)) in h.iter().zip(&h0).enumerate() {
                    let d = (a - b).abs() / 1e-4;
                    if blocks[i] == k {
                        own += d;
                    } else {
                        other += d;
                    }
                }
            }
            // own block: 2 channels; others: 62 channels
            assert!(own / 2.0 > 5.0 * other / 62.0, "joint {k}: {own} vs {other}");
            let first = k * 2;
            let mut s = base.clone();
            s[3 * k] = 1e-4;
            let h = stub.activations(&s).unwrap();
            assert!((h[first] - h0[first]).abs() > 0.0);
        }
    }

    #[test]
    fn features_within_tanh_band() {
        let stub = EncoderStub::new(64, 0.01, 4, true).unwrap();
        let cfg = MotionConfig::new(4);
        let seq = generate_sequence(&tmpl(), 2, 15, &cfg).unwrap();
        let f = encode_frames(&stub, &seq, &mut rng::seeded(1)).unwrap();
        assert_eq!(f.shape(), (15, 64));
        assert!(f.as_slice().iter().all(|v| v.abs() < 1.0 + 3.0 * 0.01 + 0.02));
        assert!(encode_frames(&stub, &seq, &mut rng::seeded(1)).unwrap() == f);
    }

    #[test]
    fn permutation_matrix_unscrambles() {
        let stub = EncoderStub::new(30, 0.0, 5, true).unwrap();
        let state: Vec<f64> = (0..STATE_DIM).map(|i| 0.01 * i as f64).collect();
        let h = Matrix::row_vector(&stub.activations(&state).unwrap());
        let f = Matrix::from_fn(1, 30, |_, i| h.get(0, stub.perm[i]));
        assert!(h.matmul(&stub.permutation_matrix()).unwrap().max_abs_diff(&f) < 1e-15);
    }

    #[test]
    fn linear_probe_recovers_pose() {
        use nalgebra::{DMatrix, DVector};
        let tm = tmpl();
        let cfg = MotionConfig::new(6);
        let stub = EncoderStub::new(64, 0.01, 6, true).unwrap();
        let mut feats = Vec::new();
        let mut poses = Vec::new();
        let mut noise = rng::seeded(0);
        for s in 0..50 {
            let seq = generate_sequence(&tm, 100 + s, 10, &cfg).unwrap();
            let f = encode_frames(&stub, &seq, &mut noise).unwrap();
            for t in 0..10 {
                feats.push(f.row(t).to_vec());
                poses.push(seq.theta.row(t).to_vec());
            }
        }
        let n = feats.len();
        let x = DMatrix::from_fn(n, 65, |i, j| if j == 64 { 1.0 } else { feats[i][j] });
        let svd = x.clone().svd(true, true);
        let (mut resid, mut total) = (0.0, 0.0);
        for c in 0..POSE_DIM {
            let y = DVector::from_fn(n, |i, _| poses[i][c]);
            let w = svd.solve(&y, 1e-10).unwrap();
            let mean = y.mean();
            resid += (&x * w - &y).norm_squared();
            total += y.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        }
        assert!(resid / total < 0.1, "unexplained fraction {}", resid / total);
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = DataConfig {
            train_sequences: 3,
            val_sequences: 2,
            verts_per_joint: 2,
            ..DataConfig::toy(7)
        };
        let ds = generate_dataset(&cfg).unwrap();
        let again = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.train, again.train);
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.train, ds.train);
        assert_eq!(back.val, ds.val);
        assert_eq!(back.stub, ds.stub);
        assert_eq!(back.config, ds.config);
    }
}
