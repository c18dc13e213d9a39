//! Temporal-kinematic feature image, the Channel Rearranging Matrix (CRM)
//! and patchification.
//!
//! The CRM is built from trainable logits `w` as a row softmax of `w / tau`
//! followed by a column normalization carried out as a column softmax over
//! the row log-probabilities. Columns therefore sum to one exactly; rows are
//! pushed towards one by [`crm_loss`].

use std::fmt::Write as _;
use std::path::Path;

use crate::assignment::min_cost_assignment;
use crate::error::{Error, Result};
use crate::numerics::{log_softmax_rows, rng, softmax_rows, Matrix, Tape, Var};

/// `T x C` stack of per-frame feature vectors (row `t` is frame `t`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureImage {
    m: Matrix,
}

impl FeatureImage {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() == 0 || m.cols() == 0 {
            return Err(Error::shape("feature image", "empty"));
        }
        if !m.is_finite() {
            return Err(Error::NonFinite {
                context: "feature image".into(),
            });
        }
        Ok(Self { m })
    }

    pub fn frames(&self) -> usize {
        self.m.rows()
    }

    pub fn channels(&self) -> usize {
        self.m.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.m
    }

    pub fn into_matrix(self) -> Matrix {
        self.m
    }
}

/// Concatenates per-frame features along the time axis.
pub fn build_feature_image<V: AsRef<[f64]>>(features: &[V]) -> Result<FeatureImage> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("feature image needs at least one frame".into()));
    }
    FeatureImage::new(Matrix::from_rows(features)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrmLogits {
    pub w: Matrix,
    pub temperature: f64,
}

impl CrmLogits {
    /// i.i.d. normal(0, std^2) logits.
    pub fn random(channels: usize, std: f64, temperature: f64, rng: &mut rng::Rng) -> Self {
        Self {
            w: rng::normal_matrix(rng, channels, channels, std),
            temperature,
        }
    }
}

pub fn make_crm(logits: &CrmLogits) -> Result<Matrix> {
    if logits.w.rows() != logits.w.cols() {
        return Err(Error::shape("make_crm", format!("logits {:?}", logits.w.shape())));
    }
    let row_log = log_softmax_rows(&logits.w, logits.temperature)?;
    Ok(softmax_rows(&row_log.transpose(), 1.0)?.transpose())
}

/// Differentiable [`make_crm`].
pub fn make_crm_on_tape(tape: &mut Tape, w: Var, temperature: f64) -> Result<Var> {
    let (r, c) = tape.value(w).shape();
    if r != c {
        return Err(Error::shape("make_crm", format!("logits {r}x{c}")));
    }
    let row_log = tape.log_softmax_rows(w, temperature)?;
    let t = tape.transpose(row_log);
    let cols = tape.softmax_rows(t, 1.0)?;
    Ok(tape.transpose(cols))
}

/// `M'_feat = M_feat * CRM`.
pub fn apply_crm(image: &FeatureImage, crm: &Matrix) -> Result<FeatureImage> {
    FeatureImage::new(image.m.matmul(crm)?)
}

/// `sum_i (rowsum_i - 1)^2 + sum_j (colsum_j - 1)^2`.
pub fn crm_loss(crm: &Matrix) -> f64 {
    let dev = |s: Vec<f64>| s.iter().map(|v| (v - 1.0) * (v - 1.0)).sum::<f64>();
    dev(crm.row_sums()) + dev(crm.col_sums())
}

pub fn crm_loss_on_tape(tape: &mut Tape, crm: Var) -> Result<Var> {
    let (r, c) = tape.value(crm).shape();
    if r != c {
        return Err(Error::shape("crm_loss", format!("{r}x{c} is not square")));
    }
    let ones_col = tape.constant(Matrix::filled(c, 1, 1.0));
    let ones_row = tape.constant(Matrix::filled(1, r, 1.0));
    let rows = tape.matmul(crm, ones_col)?;
    let cols = tape.matmul(ones_row, crm)?;
    let rd = tape.sub(rows, ones_col)?;
    let cd = tape.sub(cols, ones_row)?;
    let a = tape.sum_squares(rd);
    let b = tape.sum_squares(cd);
    tape.add(a, b)
}

/// Largest absolute deviation of any row sum from one.
pub fn max_row_sum_deviation(crm: &Matrix) -> f64 {
    crm.row_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
}

/// Mean over columns of the column maximum.
pub fn mean_column_max(crm: &Matrix) -> f64 {
    let mut maxes = vec![f64::NEG_INFINITY; crm.cols()];
    for r in 0..crm.rows() {
        for (m, &v) in maxes.iter_mut().zip(crm.row(r)) {
            *m = m.max(v);
        }
    }
    maxes.iter().sum::<f64>() / crm.cols() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub frames: usize,
    pub channels: usize,
    pub patch_t: usize,
    pub patch_c: usize,
}

impl PatchGrid {
    pub fn new(frames: usize, channels: usize, patch_t: usize, patch_c: usize) -> Result<Self> {
        if patch_t == 0 || patch_c == 0 || frames % patch_t != 0 || channels % patch_c != 0 {
            return Err(Error::InvalidArgument(format!(
                "feature image {frames}x{channels} is not divisible into {patch_t}x{patch_c} patches"
            )));
        }
        Ok(Self {
            frames,
            channels,
            patch_t,
            patch_c,
        })
    }

    /// `N = (T / P_t) * (C / P_c)`.
    pub fn num_patches(&self) -> usize {
        (self.frames / self.patch_t) * (self.channels / self.patch_c)
    }

    pub fn patch_len(&self) -> usize {
        self.patch_t * self.patch_c
    }

    /// Source flat index (into a row-major `T x C` image) of every output
    /// element, patches in row-major grid order, time-major inside a patch.
    pub fn index(&self) -> Vec<usize> {
        let grid_c = self.channels / self.patch_c;
        let mut idx = Vec::with_capacity(self.frames * self.channels);
        for n in 0..self.num_patches() {
            let (gt, gc) = (n / grid_c, n % grid_c);
            for it in 0..self.patch_t {
                for ic in 0..self.patch_c {
                    idx.push((gt * self.patch_t + it) * self.channels + gc * self.patch_c + ic);
                }
            }
        }
        idx
    }
}

/// `N x (P_t * P_c)` patch sequence.
pub fn patchify(image: &FeatureImage, patch_t: usize, patch_c: usize) -> Result<Matrix> {
    let grid = PatchGrid::new(image.frames(), image.channels(), patch_t, patch_c)?;
    let src = image.m.as_slice();
    let data = grid.index().into_iter().map(|i| src[i]).collect();
    Matrix::from_vec(grid.num_patches(), grid.patch_len(), data)
}

pub fn unpatchify(patches: &Matrix, grid: &PatchGrid) -> Result<FeatureImage> {
    if patches.shape() != (grid.num_patches(), grid.patch_len()) {
        return Err(Error::shape(
            "unpatchify",
            format!("{:?} for grid {grid:?}", patches.shape()),
        ));
    }
    let mut out = vec![0.0; grid.frames * grid.channels];
    for (k, i) in grid.index().into_iter().enumerate() {
        out[i] = patches.as_slice()[k];
    }
    FeatureImage::new(Matrix::from_vec(grid.frames, grid.channels, out)?)
}

/// Patchifies a stacked batch: `images` is `(B * T) x C`, output is
/// `(B * N) x (P_t * P_c)`.
pub fn patchify_batch_on_tape(tape: &mut Tape, images: Var, grid: &PatchGrid) -> Result<Var> {
    let (rows, cols) = tape.value(images).shape();
    if cols != grid.channels || rows % grid.frames != 0 {
        return Err(Error::shape(
            "patchify",
            format!("stacked images {rows}x{cols} for grid {grid:?}"),
        ));
    }
    let batch = rows / grid.frames;
    let one = grid.index();
    let stride = grid.frames * grid.channels;
    let index: Vec<usize> = (0..batch)
        .flat_map(|b| one.iter().map(move |&i| b * stride + i))
        .collect();
    tape.gather(images, index, batch * grid.num_patches(), grid.patch_len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct NearestPermutation {
    /// `sigma[i]` is the column selected in row `i`.
    pub sigma: Vec<usize>,
    /// Frobenius distance `||crm - P_sigma||`.
    pub distance: f64,
}

pub fn permutation_matrix(sigma: &[usize]) -> Matrix {
    let n = sigma.len();
    let mut p = Matrix::zeros(n, n);
    for (i, &j) in sigma.iter().enumerate() {
        p.set(i, j, 1.0);
    }
    p
}

/// Closest permutation by exact assignment maximizing `sum_i crm[i, sigma(i)]`.
pub fn nearest_permutation(crm: &Matrix) -> Result<NearestPermutation> {
    let sigma = min_cost_assignment(&crm.scale(-1.0))?;
    let distance = crm.sub(&permutation_matrix(&sigma))?.frobenius_norm();
    Ok(NearestPermutation { sigma, distance })
}

pub fn crm_to_csv(crm: &Matrix) -> String {
    let mut s = String::new();
    for r in 0..crm.rows() {
        let line: Vec<String> = crm.row(r).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    s
}

/// Binary 8-bit PGM, entry * 255 clamped to [0, 255].
pub fn crm_to_pgm(crm: &Matrix) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", crm.cols(), crm.rows()).into_bytes();
    out.extend(
        crm.as_slice()
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn write_crm_exports(crm: &Matrix, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv, crm_to_csv(crm)).map_err(|e| Error::io(&csv, e))?;
    let pgm = dir.join(format!("{stem}.pgm"));
    std::fs::write(&pgm, crm_to_pgm(crm)).map_err(|e| Error::io(&pgm, e))
}
