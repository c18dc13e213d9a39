//! Pre-norm Vision Transformer encoder with class-token readout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rng, softmax_rows, Matrix, Tape, Var};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_t: usize,
    pub patch_c: usize,
    /// Patch tokens `N`, excluding the class token.
    pub num_patches: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub out_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch_t == 0 || self.patch_c == 0 || self.num_patches == 0 {
            return bad(format!("degenerate patch layout {self:?}"));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("model dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.out_dim == 0 {
            return bad("output dim must be positive".into());
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.patch_t * self.patch_c
    }

    pub fn tokens(&self) -> usize {
        self.num_patches + 1
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.dim
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Closed-form parameter count.
pub fn count_params(cfg: &EncoderConfig) -> usize {
    let d = cfg.dim;
    let linear = |i: usize, o: usize| i * o + o;
    let block = 2 * (2 * d) + linear(d, 3 * d) + linear(d, d) + linear(d, 4 * d) + linear(4 * d, d);
    linear(cfg.patch_len(), d) + d + cfg.tokens() * d + cfg.depth * block + 2 * d + linear(d, cfg.out_dim)
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl EncoderParams {
    /// Truncated normal(0, 0.02) weights; zero biases, class token and
    /// position embedding; unit norm scales.
    pub fn init(store: &mut ParamStore, prefix: &str, config: EncoderConfig, rng: &mut rng::Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut w = |store: &mut ParamStore, name: String, r: usize, c: usize| {
            store.add(name, rng::truncated_normal_matrix(rng, r, c, 0.02))
        };
        let zeros = |store: &mut ParamStore, name: String, r: usize, c: usize| store.add(name, Matrix::zeros(r, c));
        let ones = |store: &mut ParamStore, name: String| store.add(name, Matrix::filled(1, d, 1.0));

        let patch_w = w(store, format!("{prefix}.patch.w"), config.patch_len(), d);
        let patch_b = zeros(store, format!("{prefix}.patch.b"), 1, d);
        let cls = zeros(store, format!("{prefix}.cls"), 1, d);
        let pos = zeros(store, format!("{prefix}.pos"), config.tokens(), d);
        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let p = format!("{prefix}.block{l}");
            blocks.push(BlockParams {
                ln1_g: ones(store, format!("{p}.ln1.g")),
                ln1_b: zeros(store, format!("{p}.ln1.b"), 1, d),
                qkv_w: w(store, format!("{p}.qkv.w"), d, 3 * d),
                qkv_b: zeros(store, format!("{p}.qkv.b"), 1, 3 * d),
                proj_w: w(store, format!("{p}.proj.w"), d, d),
                proj_b: zeros(store, format!("{p}.proj.b"), 1, d),
                ln2_g: ones(store, format!("{p}.ln2.g")),
                ln2_b: zeros(store, format!("{p}.ln2.b"), 1, d),
                fc1_w: w(store, format!("{p}.fc1.w"), d, 4 * d),
                fc1_b: zeros(store, format!("{p}.fc1.b"), 1, 4 * d),
                fc2_w: w(store, format!("{p}.fc2.w"), 4 * d, d),
                fc2_b: zeros(store, format!("{p}.fc2.b"), 1, d),
            });
        }
        let lnf_g = ones(store, format!("{prefix}.lnf.g"));
        let lnf_b = zeros(store, format!("{prefix}.lnf.b"), 1, d);
        let head_w = w(store, format!("{prefix}.head.w"), d, config.out_dim);
        let head_b = zeros(store, format!("{prefix}.head.b"), 1, config.out_dim);
        Ok(Self {
            config,
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_w, self.patch_b, self.cls, self.pos];
        for b in &self.blocks {
            ids.extend([
                b.ln1_g, b.ln1_b, b.qkv_w, b.qkv_b, b.proj_w, b.proj_b, b.ln2_g, b.ln2_b, b.fc1_w, b.fc1_b, b.fc2_w,
                b.fc2_b,
            ]);
        }
        ids.extend([self.lnf_g, self.lnf_b, self.head_w, self.head_b]);
        ids
    }
}

/// `softmax_rows(q k^T / sqrt(d)) v` for one head.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    attention_weights(q, k)?.matmul(v)
}

pub fn attention_weights(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(Error::shape("attention", format!("q {:?} vs k {:?}", q.shape(), k.shape())));
    }
    let scores = q.matmul(&k.transpose())?.scale(1.0 / (q.cols() as f64).sqrt());
    softmax_rows(&scores, 1.0)
}

fn linear(tape: &mut Tape, p: &Bound, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let y = tape.matmul(x, p.var(w))?;
    tape.add_row(y, p.var(b))
}

fn layer_norm(tape: &mut Tape, p: &Bound, x: Var, g: ParamId, b: ParamId) -> Result<Var> {
    let n = tape.layer_norm_rows(x);
    let s = tape.mul_row(n, p.var(g))?;
    tape.add_row(s, p.var(b))
}

fn self_attention(tape: &mut Tape, cfg: &EncoderConfig, qkv: Var, batch: usize) -> Result<Var> {
    let (n, d, dh) = (cfg.tokens(), cfg.dim, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut samples = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let q = tape.slice(qkv, b * n, n, h * dh, dh)?;
            let k = tape.slice(qkv, b * n, n, d + h * dh, dh)?;
            let v = tape.slice(qkv, b * n, n, 2 * d + h * dh, dh)?;
            let kt = tape.transpose(k);
            let s = tape.matmul(q, kt)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s, 1.0)?;
            heads.push(tape.matmul(a, v)?);
        }
        samples.push(if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? });
    }
    if samples.len() == 1 {
        Ok(samples[0])
    } else {
        tape.concat_rows(&samples)
    }
}

/// Final-normed token states, `(B * (N + 1)) x D`, class token first in
/// every sample. `patches` is `(B * N) x (P_t * P_c)`.
pub fn encode_tokens(tape: &mut Tape, enc: &EncoderParams, p: &Bound, patches: Var) -> Result<Var> {
    let cfg = &enc.config;
    let (rows, cols) = tape.value(patches).shape();
    if cols != cfg.patch_len() || rows == 0 || rows % cfg.num_patches != 0 {
        return Err(Error::shape(
            "encoder",
            format!(
                "patches {rows}x{cols} do not match {} tokens of length {}",
                cfg.num_patches,
                cfg.patch_len()
            ),
        ));
    }
    let batch = rows / cfg.num_patches;
    let (n, d) = (cfg.tokens(), cfg.dim);

    let emb = linear(tape, p, patches, enc.patch_w, enc.patch_b)?;
    let mut parts = Vec::with_capacity(2 * batch);
    for b in 0..batch {
        parts.push(p.var(enc.cls));
        parts.push(tape.slice(emb, b * cfg.num_patches, cfg.num_patches, 0, d)?);
    }
    let tokens = tape.concat_rows(&parts)?;
    let pos_index: Vec<usize> = (0..batch).flat_map(|_| 0..n * d).collect();
    let pos = tape.gather(p.var(enc.pos), pos_index, batch * n, d)?;
    let mut x = tape.add(tokens, pos)?;

    for blk in &enc.blocks {
        let h = layer_norm(tape, p, x, blk.ln1_g, blk.ln1_b)?;
        let qkv = linear(tape, p, h, blk.qkv_w, blk.qkv_b)?;
        let a = self_attention(tape, cfg, qkv, batch)?;
        let a = linear(tape, p, a, blk.proj_w, blk.proj_b)?;
        x = tape.add(x, a)?;
        let h = layer_norm(tape, p, x, blk.ln2_g, blk.ln2_b)?;
        let h = linear(tape, p, h, blk.fc1_w, blk.fc1_b)?;
        let h = tape.gelu(h);
        let h = linear(tape, p, h, blk.fc2_w, blk.fc2_b)?;
        x = tape.add(x, h)?;
    }
    layer_norm(tape, p, x, enc.lnf_g, enc.lnf_b)
}

/// `z_enc` for every sample, `B x F_out`.
pub fn encoder_forward_on_tape(tape: &mut Tape, enc: &EncoderParams, p: &Bound, patches: Var) -> Result<Var> {
    let x = encode_tokens(tape, enc, p, patches)?;
    let (rows, d) = tape.value(x).shape();
    let n = enc.config.tokens();
    let batch = rows / n;
    let index: Vec<usize> = (0..batch).flat_map(|b| b * n * d..b * n * d + d).collect();
    let cls = tape.gather(x, index, batch, d)?;
    linear(tape, p, cls, enc.head_w, enc.head_b)
}

/// Inference on one patch sequence (`N x (P_t * P_c)`).
pub fn encoder_forward(store: &ParamStore, enc: &EncoderParams, patches: &Matrix) -> Result<Vec<f64>> {
    if patches.rows() != enc.config.num_patches {
        return Err(Error::shape(
            "encoder",
            format!("{} patches, position embedding expects {}", patches.rows(), enc.config.num_patches),
        ));
    }
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let x = tape.constant(patches.clone());
    let z = encoder_forward_on_tape(&mut tape, enc, &p, x)?;
    Ok(tape.value(z).as_slice().to_vec())
}
