//! SMPL-style parametric body: shape blendshapes, forward kinematics over
//! a 24-joint tree, linear blend skinning, joint regression and
//! weak-perspective projection.
//!
//! The template is procedural by default but any arrays with the same
//! shapes can be loaded through [`BodyTemplate::load`].

use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::error::{Error, Result};
use crate::numerics::{rng, CustomOp, Matrix, Tape, Var};

pub const NUM_JOINTS: usize = 24;
pub const NUM_BETAS: usize = 10;
pub const POSE_DIM: usize = 3 * NUM_JOINTS;
pub const CAM_DIM: usize = 3;

/// SMPL kinematic tree; `None` marks the root.
pub const SMPL_PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
    Some(20),
    Some(21),
];

/// Approximate SMPL rest joint locations in meters (y up, pelvis at origin).
const REST_JOINTS: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.06, -0.09, 0.0],
    [-0.06, -0.09, 0.0],
    [0.0, 0.11, -0.02],
    [0.10, -0.46, 0.0],
    [-0.10, -0.46, 0.0],
    [0.0, 0.25, 0.0],
    [0.09, -0.86, -0.04],
    [-0.09, -0.86, -0.04],
    [0.0, 0.31, 0.02],
    [0.12, -0.92, 0.08],
    [-0.12, -0.92, 0.08],
    [0.0, 0.52, 0.0],
    [0.08, 0.42, 0.0],
    [-0.08, 0.42, 0.0],
    [0.0, 0.60, 0.05],
    [0.17, 0.45, -0.02],
    [-0.17, 0.45, -0.02],
    [0.43, 0.43, -0.04],
    [-0.43, 0.43, -0.04],
    [0.68, 0.44, -0.04],
    [-0.68, 0.44, -0.04],
    [0.76, 0.44, -0.05],
    [-0.76, 0.44, -0.05],
];

const RING_RADIUS: f64 = 0.04;

#[derive(Clone, Debug, PartialEq)]
pub struct BodyTemplate {
    rest_vertices: Matrix,
    /// `(3V) x 10`; row `3v + c` holds coordinate `c` of vertex `v`.
    shape_dirs: Matrix,
    skin_weights: Matrix,
    joint_regressor: Matrix,
    parents: Vec<Option<usize>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TemplateMeta {
    num_vertices: usize,
    num_joints: usize,
    num_betas: usize,
    /// -1 for the root.
    parents: Vec<i64>,
}

impl BodyTemplate {
    pub fn new(
        rest_vertices: Matrix,
        shape_dirs: Matrix,
        skin_weights: Matrix,
        joint_regressor: Matrix,
        parents: Vec<Option<usize>>,
    ) -> Result<Self> {
        let v = rest_vertices.rows();
        let shape_err = |what: String| Error::shape("body template", what);
        if rest_vertices.cols() != 3 || v == 0 {
            return Err(shape_err(format!("rest_vertices {:?}", rest_vertices.shape())));
        }
        if shape_dirs.shape() != (3 * v, NUM_BETAS) {
            return Err(shape_err(format!("shape_dirs {:?}", shape_dirs.shape())));
        }
        if skin_weights.shape() != (v, NUM_JOINTS) {
            return Err(shape_err(format!("skin_weights {:?}", skin_weights.shape())));
        }
        if joint_regressor.shape() != (NUM_JOINTS, v) {
            return Err(shape_err(format!("joint_regressor {:?}", joint_regressor.shape())));
        }
        if parents.len() != NUM_JOINTS || parents[0].is_some() {
            return Err(Error::InvalidArgument("parent array must have 24 entries with a root at 0".into()));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "joint {j} must have a parent with a smaller index"
                    )))
                }
            }
        }
        for (name, m) in [("skin_weights", &skin_weights), ("joint_regressor", &joint_regressor)] {
            for r in 0..m.rows() {
                let row = m.row(r);
                if row.iter().any(|&w| w < 0.0 || !w.is_finite()) {
                    return Err(Error::InvalidArgument(format!("{name} row {r} has a negative entry")));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!("{name} row {r} sums to {s}")));
                }
            }
        }
        if !rest_vertices.is_finite() || !shape_dirs.is_finite() {
            return Err(Error::NonFinite {
                context: "body template".into(),
            });
        }
        Ok(Self {
            rest_vertices,
            shape_dirs,
            skin_weights,
            joint_regressor,
            parents,
        })
    }

    /// Procedural humanoid: `verts_per_joint` vertices on a ring around each
    /// joint (perpendicular to its bone), skinned to the two nearest joints by
    /// inverse distance, with each joint regressed as the mean of its ring.
    pub fn procedural(verts_per_joint: usize, seed: u64) -> Result<Self> {
        if verts_per_joint == 0 {
            return Err(Error::InvalidArgument("verts_per_joint must be >= 1".into()));
        }
        let k = verts_per_joint;
        let v = NUM_JOINTS * k;
        let joints: Vec<Vector3<f64>> = REST_JOINTS.iter().map(|p| Vector3::from(*p)).collect();
        let mut rest = Matrix::zeros(v, 3);
        let mut owner = vec![0usize; v];
        let mut radial = vec![Vector3::zeros(); v];
        for j in 0..NUM_JOINTS {
            let dir = match SMPL_PARENTS[j] {
                Some(p) => (joints[j] - joints[p]).normalize(),
                None => Vector3::y(),
            };
            let helper = if dir.x.abs() < 0.9 { Vector3::x() } else { Vector3::z() };
            let u = dir.cross(&helper).normalize();
            let w = dir.cross(&u);
            for i in 0..k {
                let idx = j * k + i;
                let p = if k == 1 {
                    joints[j]
                } else {
                    let a = std::f64::consts::TAU * i as f64 / k as f64 + 0.25;
                    let r = u * a.cos() + w * a.sin();
                    radial[idx] = r;
                    joints[j] + r * RING_RADIUS
                };
                rest.row_mut(idx).copy_from_slice(p.as_slice());
                owner[idx] = j;
            }
        }

        let mut skin = Matrix::zeros(v, NUM_JOINTS);
        for idx in 0..v {
            let p = Vector3::from_row_slice(rest.row(idx));
            let mut d: Vec<(f64, usize)> = joints
                .iter()
                .enumerate()
                .map(|(j, q)| ((p - q).norm().max(1e-6), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (w0, w1) = (1.0 / d[0].0, 1.0 / d[1].0);
            skin.set(idx, d[0].1, w0 / (w0 + w1));
            skin.set(idx, d[1].1, w1 / (w0 + w1));
        }

        let mut regressor = Matrix::zeros(NUM_JOINTS, v);
        for (idx, &j) in owner.iter().enumerate() {
            regressor.set(j, idx, 1.0 / k as f64);
        }

        let mut dirs = Matrix::zeros(3 * v, NUM_BETAS);
        let mut r = rng::seeded(seed);
        let random_fields: Vec<Vec<Vector3<f64>>> = (4..NUM_BETAS)
            .map(|_| {
                (0..NUM_JOINTS)
                    .map(|_| Vector3::new(rng::normal(&mut r), rng::normal(&mut r), rng::normal(&mut r)) * 0.01)
                    .collect()
            })
            .collect();
        for idx in 0..v {
            let p = Vector3::from_row_slice(rest.row(idx));
            let j = owner[idx];
            let fields = [
                // stature
                Vector3::new(0.0, 0.06 * p.y, 0.0),
                // girth
                radial[idx] * 0.01,
                // shoulder breadth
                if p.y > 0.3 { Vector3::new(0.05 * p.x, 0.0, 0.0) } else { Vector3::zeros() },
                // leg length
                if p.y < -0.09 { Vector3::new(0.0, 0.05 * (p.y + 0.09), 0.0) } else { Vector3::zeros() },
            ];
            for (b, f) in fields.iter().enumerate() {
                for c in 0..3 {
                    dirs.set(3 * idx + c, b, f[c]);
                }
            }
            for (b, field) in random_fields.iter().enumerate() {
                for c in 0..3 {
                    dirs.set(3 * idx + c, 4 + b, field[j][c]);
                }
            }
        }

        Self::new(rest, dirs, skin, regressor, SMPL_PARENTS.to_vec())
    }

    pub fn num_vertices(&self) -> usize {
        self.rest_vertices.rows()
    }

    pub fn rest_vertices(&self) -> &Matrix {
        &self.rest_vertices
    }

    pub fn shape_dirs(&self) -> &Matrix {
        &self.shape_dirs
    }

    pub fn skin_weights(&self) -> &Matrix {
        &self.skin_weights
    }

    pub fn joint_regressor(&self) -> &Matrix {
        &self.joint_regressor
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    /// `(3V) x (3J)` matrix `R` with `joints_flat = mesh_flat * R`.
    pub fn flat_regressor(&self) -> Matrix {
        let v = self.num_vertices();
        let mut r = Matrix::zeros(3 * v, POSE_DIM);
        for j in 0..NUM_JOINTS {
            for i in 0..v {
                let w = self.joint_regressor.get(j, i);
                if w != 0.0 {
                    for c in 0..3 {
                        r.set(3 * i + c, 3 * j + c, w);
                    }
                }
            }
        }
        r
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = TemplateMeta {
            num_vertices: self.num_vertices(),
            num_joints: NUM_JOINTS,
            num_betas: NUM_BETAS,
            parents: self.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
        };
        archive::save(
            dir,
            "body-template",
            1,
            &meta,
            &[
                ("rest_vertices", &self.rest_vertices),
                ("shape_dirs", &self.shape_dirs),
                ("skin_weights", &self.skin_weights),
                ("joint_regressor", &self.joint_regressor),
            ],
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, arrays) = archive::load::<TemplateMeta>(dir, "body-template")?;
        let parents = manifest
            .meta
            .parents
            .iter()
            .map(|&p| if p < 0 { None } else { Some(p as usize) })
            .collect();
        Self::new(
            arrays.require(dir, "rest_vertices")?,
            arrays.require(dir, "shape_dirs")?,
            arrays.require(dir, "skin_weights")?,
            arrays.require(dir, "joint_regressor")?,
            parents,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraParams {
    pub s: f64,
    pub t: [f64; 2],
}

impl CameraParams {
    pub fn new(s: f64, t: [f64; 2]) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) || !t.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!("camera scale must be positive, got {s}")));
        }
        Ok(Self { s, t })
    }
}

fn skew(r: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -r.z, r.y, r.z, 0.0, -r.x, -r.y, r.x, 0.0)
}

/// Coefficients of `R = I + a K + b K^2` and their radial derivatives
/// divided by the angle.
fn rodrigues_coefficients(angle: f64) -> (f64, f64, f64, f64) {
    if angle < 1e-2 {
        let p2 = angle * angle;
        let p4 = p2 * p2;
        let p6 = p4 * p2;
        (
            1.0 - p2 / 6.0 + p4 / 120.0 - p6 / 5040.0,
            0.5 - p2 / 24.0 + p4 / 720.0 - p6 / 40320.0,
            -1.0 / 3.0 + p2 / 30.0 - p4 / 840.0 + p6 / 45360.0,
            -1.0 / 12.0 + p2 / 180.0 - p4 / 6720.0 + p6 / 453600.0,
        )
    } else {
        let (s, c) = angle.sin_cos();
        let half = (0.5 * angle).sin();
        let a = s / angle;
        let b = 2.0 * half * half / (angle * angle);
        let da = (angle * c - s) / angle.powi(3);
        let db = (angle * s - 2.0 * (1.0 - c)) / angle.powi(4);
        (a, b, da, db)
    }
}

/// Axis-angle to rotation matrix.
pub fn rodrigues(aa: [f64; 3]) -> Matrix3<f64> {
    let r = Vector3::from(aa);
    let (a, b, _, _) = rodrigues_coefficients(r.norm());
    let k = skew(&r);
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation and its partial derivatives with respect to each axis-angle
/// component.
pub fn rodrigues_with_jacobian(aa: [f64; 3]) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let r = Vector3::from(aa);
    let (a, b, da, db) = rodrigues_coefficients(r.norm());
    let k = skew(&r);
    let k2 = k * k;
    let rot = Matrix3::identity() + k * a + k2 * b;
    let jac = [0, 1, 2].map(|m| {
        let e = skew(&Vector3::ith(m, 1.0));
        k * (da * r[m]) + e * a + k2 * (db * r[m]) + (e * k + k * e) * b
    });
    (rot, jac)
}

/// `rest_vertices + sum_k beta_k * shape_dirs[.., k]`.
pub fn shaped_vertices(tmpl: &BodyTemplate, beta: &[f64]) -> Result<Matrix> {
    if beta.len() != NUM_BETAS {
        return Err(Error::shape("shaped_vertices", format!("beta has {} entries", beta.len())));
    }
    let mut out = tmpl.rest_vertices.clone();
    for (row, o) in out.as_mut_slice().iter_mut().enumerate() {
        let dirs = tmpl.shape_dirs.row(row);
        *o += dirs.iter().zip(beta).map(|(d, b)| d * b).sum::<f64>();
    }
    Ok(out)
}

/// Intermediate state of one forward evaluation, kept for the adjoint.
#[derive(Clone, Debug)]
pub struct PoseCache {
    shaped: Vec<Vector3<f64>>,
    rest_joints: Vec<Vector3<f64>>,
    local: Vec<Matrix3<f64>>,
    local_jac: Vec<[Matrix3<f64>; 3]>,
    global_rot: Vec<Matrix3<f64>>,
}

fn check_pose(theta: &[f64], beta: &[f64]) -> Result<()> {
    if theta.len() != POSE_DIM || beta.len() != NUM_BETAS {
        return Err(Error::shape(
            "body_mesh",
            format!("theta {} / beta {} entries", theta.len(), beta.len()),
        ));
    }
    Ok(())
}

fn forward_cached(tmpl: &BodyTemplate, theta: &[f64], beta: &[f64]) -> Result<(Vec<f64>, PoseCache)> {
    check_pose(theta, beta)?;
    let shaped_m = shaped_vertices(tmpl, beta)?;
    let v = tmpl.num_vertices();
    let shaped: Vec<Vector3<f64>> = (0..v).map(|i| Vector3::from_row_slice(shaped_m.row(i))).collect();
    let rest_joints: Vec<Vector3<f64>> = (0..NUM_JOINTS)
        .map(|j| {
            let w = tmpl.joint_regressor.row(j);
            shaped.iter().zip(w).fold(Vector3::zeros(), |acc, (p, &wi)| acc + p * wi)
        })
        .collect();

    let mut local = Vec::with_capacity(NUM_JOINTS);
    let mut local_jac = Vec::with_capacity(NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        let (r, d) = rodrigues_with_jacobian([theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]]);
        local.push(r);
        local_jac.push(d);
    }
    let mut global_rot = vec![Matrix3::zeros(); NUM_JOINTS];
    let mut global_trans = vec![Vector3::zeros(); NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        match tmpl.parents[j] {
            None => {
                global_rot[j] = local[j];
                global_trans[j] = rest_joints[j];
            }
            Some(p) => {
                global_rot[j] = global_rot[p] * local[j];
                global_trans[j] = global_rot[p] * (rest_joints[j] - rest_joints[p]) + global_trans[p];
            }
        }
    }

    let mut mesh = vec![0.0; 3 * v];
    for i in 0..v {
        let mut acc = Vector3::zeros();
        for (j, &w) in tmpl.skin_weights.row(i).iter().enumerate() {
            if w != 0.0 {
                acc += (global_rot[j] * (shaped[i] - rest_joints[j]) + global_trans[j]) * w;
            }
        }
        mesh[3 * i..3 * i + 3].copy_from_slice(acc.as_slice());
    }
    Ok((
        mesh,
        PoseCache {
            shaped,
            rest_joints,
            local,
            local_jac,
            global_rot,
        },
    ))
}

/// Adjoint of the forward pass: `(d theta, d beta)` given `d mesh` (flat).
fn backward_cached(tmpl: &BodyTemplate, cache: &PoseCache, dmesh: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let v = tmpl.num_vertices();
    let mut d_grot = vec![Matrix3::<f64>::zeros(); NUM_JOINTS];
    let mut d_gtrans = vec![Vector3::<f64>::zeros(); NUM_JOINTS];
    let mut d_shaped = vec![Vector3::<f64>::zeros(); v];
    let mut d_joints = vec![Vector3::<f64>::zeros(); NUM_JOINTS];

    for i in 0..v {
        let g = Vector3::new(dmesh[3 * i], dmesh[3 * i + 1], dmesh[3 * i + 2]);
        for (j, &w) in tmpl.skin_weights.row(i).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let rel = cache.shaped[i] - cache.rest_joints[j];
            d_grot[j] += (g * w) * rel.transpose();
            d_gtrans[j] += g * w;
            let u = cache.global_rot[j].transpose() * g * w;
            d_shaped[i] += u;
            d_joints[j] -= u;
        }
    }

    let mut d_local = vec![Matrix3::<f64>::zeros(); NUM_JOINTS];
    for j in (0..NUM_JOINTS).rev() {
        match tmpl.parents[j] {
            None => {
                d_local[j] += d_grot[j];
                d_joints[j] += d_gtrans[j];
            }
            Some(p) => {
                let bone = cache.rest_joints[j] - cache.rest_joints[p];
                let gp = cache.global_rot[p];
                let dg = d_grot[j];
                let dt = d_gtrans[j];
                d_grot[p] += dg * cache.local[j].transpose() + dt * bone.transpose();
                d_local[j] += gp.transpose() * dg;
                d_gtrans[p] += dt;
                let e = gp.transpose() * dt;
                d_joints[j] += e;
                d_joints[p] -= e;
            }
        }
    }

    let mut dtheta = vec![0.0; POSE_DIM];
    for j in 0..NUM_JOINTS {
        for m in 0..3 {
            dtheta[3 * j + m] = d_local[j].component_mul(&cache.local_jac[j][m]).sum();
        }
    }

    for j in 0..NUM_JOINTS {
        for (i, &w) in tmpl.joint_regressor.row(j).iter().enumerate() {
            if w != 0.0 {
                d_shaped[i] += d_joints[j] * w;
            }
        }
    }
    let mut dbeta = vec![0.0; NUM_BETAS];
    for i in 0..v {
        for c in 0..3 {
            let g = d_shaped[i][c];
            if g != 0.0 {
                for (db, d) in dbeta.iter_mut().zip(tmpl.shape_dirs.row(3 * i + c)) {
                    *db += g * d;
                }
            }
        }
    }
    (dtheta, dbeta)
}

/// Posed mesh `M(theta, beta)` as a `V x 3` matrix.
pub fn body_mesh(tmpl: &BodyTemplate, theta: &[f64], beta: &[f64]) -> Result<Matrix> {
    let (mesh, _) = forward_cached(tmpl, theta, beta)?;
    Matrix::from_vec(tmpl.num_vertices(), 3, mesh)
}

/// `J = W B`.
pub fn regress_joints(tmpl: &BodyTemplate, mesh: &Matrix) -> Result<Matrix> {
    if mesh.shape() != (tmpl.num_vertices(), 3) {
        return Err(Error::shape(
            "regress_joints",
            format!("mesh {:?} for {} vertices", mesh.shape(), tmpl.num_vertices()),
        ));
    }
    tmpl.joint_regressor.matmul(mesh)
}

/// Weak-perspective projection `K = s * xy + t`.
pub fn project(joints: &Matrix, cam: &CameraParams) -> Result<Matrix> {
    if joints.cols() != 3 {
        return Err(Error::shape("project", format!("joints {:?}", joints.shape())));
    }
    Ok(Matrix::from_fn(joints.rows(), 2, |r, c| cam.s * joints.get(r, c) + cam.t[c]))
}

struct BodyMeshOp {
    template: Arc<BodyTemplate>,
    caches: Vec<PoseCache>,
}

impl CustomOp for BodyMeshOp {
    fn backward(&self, _inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Vec<Matrix> {
        let b = self.caches.len();
        let mut dtheta = Matrix::zeros(b, POSE_DIM);
        let mut dbeta = Matrix::zeros(b, NUM_BETAS);
        for (s, cache) in self.caches.iter().enumerate() {
            let (dt, db) = backward_cached(&self.template, cache, grad.row(s));
            dtheta.row_mut(s).copy_from_slice(&dt);
            dbeta.row_mut(s).copy_from_slice(&db);
        }
        vec![dtheta, dbeta]
    }
}

/// Batched `M(theta, beta)` on a tape: `theta` is `B x 72`, `beta` is
/// `B x 10`, output is `B x 3V` (vertex-major xyz).
pub fn body_mesh_on_tape(tape: &mut Tape, tmpl: &Arc<BodyTemplate>, theta: Var, beta: Var) -> Result<Var> {
    let (tv, bv) = (tape.value(theta), tape.value(beta));
    if tv.cols() != POSE_DIM || bv.cols() != NUM_BETAS || tv.rows() != bv.rows() {
        return Err(Error::shape(
            "body_mesh_on_tape",
            format!("theta {:?}, beta {:?}", tv.shape(), bv.shape()),
        ));
    }
    let b = tv.rows();
    let v = tmpl.num_vertices();
    let mut out = Matrix::zeros(b, 3 * v);
    let mut caches = Vec::with_capacity(b);
    for s in 0..b {
        let (mesh, cache) = forward_cached(tmpl, tv.row(s), bv.row(s))?;
        out.row_mut(s).copy_from_slice(&mesh);
        caches.push(cache);
    }
    Ok(tape.custom(
        vec![theta, beta],
        out,
        Box::new(BodyMeshOp {
            template: Arc::clone(tmpl),
            caches,
        }),
    ))
}

/// Batched weak-perspective projection on a tape: `joints` is `B x 3J`,
/// `cam` is `B x 3` holding `(s, tx, ty)`; output is `B x 2J`.
pub fn project_on_tape(tape: &mut Tape, joints: Var, cam: Var) -> Result<Var> {
    let (jv, cv) = (tape.value(joints), tape.value(cam));
    if jv.cols() % 3 != 0 || cv.cols() != CAM_DIM || jv.rows() != cv.rows() {
        return Err(Error::shape(
            "project_on_tape",
            format!("joints {:?}, cam {:?}", jv.shape(), cv.shape()),
        ));
    }
    let (b, nj) = (jv.rows(), jv.cols() / 3);
    let xy_index: Vec<usize> = (0..b)
        .flat_map(|s| (0..nj).flat_map(move |j| [s * 3 * nj + 3 * j, s * 3 * nj + 3 * j + 1]))
        .collect();
    let t_index: Vec<usize> = (0..b)
        .flat_map(|s| (0..nj).flat_map(move |_| [s * 3 + 1, s * 3 + 2]))
        .collect();
    let xy = tape.gather(joints, xy_index, b, 2 * nj)?;
    let scale = tape.slice(cam, 0, b, 0, 1)?;
    let shift = tape.gather(cam, t_index, b, 2 * nj)?;
    let scaled = tape.mul_col(xy, scale)?;
    tape.add(scaled, shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_tape_function, GradCheckOptions};
    use nalgebra::{Quaternion, UnitQuaternion};

    fn template() -> BodyTemplate {
        BodyTemplate::procedural(4, 0).unwrap()
    }

    fn quaternion_oracle(aa: [f64; 3]) -> Matrix3<f64> {
        let r = Vector3::from(aa);
        let angle = r.norm();
        let axis = r / angle;
        let (s, c) = (0.5 * angle).sin_cos();
        let q = UnitQuaternion::from_quaternion(Quaternion::new(c, s * axis.x, s * axis.y, s * axis.z));
        q.to_rotation_matrix().into_inner()
    }

    fn random_pose(r: &mut rng::Rng, scale: f64) -> Vec<f64> {
        (0..POSE_DIM).map(|_| scale * rng::normal(r)).collect()
    }

    #[test]
    fn rodrigues_zero_is_identity() {
        assert_eq!(rodrigues([0.0; 3]), Matrix3::identity());
    }

    #[test]
    fn rodrigues_half_turn_about_x() {
        let r = rodrigues([std::f64::consts::PI, 0.0, 0.0]);
        let expected = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        assert!((r - expected).abs().max() < 1e-12);
    }

    #[test]
    fn rodrigues_matches_quaternion_oracle() {
        let mut r = rng::seeded(4);
        for _ in 0..200 {
            let aa = [rng::normal(&mut r), rng::normal(&mut r), rng::normal(&mut r)];
            let got = rodrigues(aa);
            assert!((got - quaternion_oracle(aa)).abs().max() < 1e-10);
            assert!((got.transpose() * got - Matrix3::identity()).abs().max() < 1e-9);
            assert!((got.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rodrigues_jacobian_matches_finite_differences() {
        let h = 1e-6;
        for aa in [[0.3, -0.2, 0.9], [1e-3, 2e-3, -1e-3], [0.0; 3], [2.5, 0.1, -0.4], [0.006, 0.0, 0.007]] {
            let (_, jac) = rodrigues_with_jacobian(aa);
            for m in 0..3 {
                let (mut p, mut q) = (aa, aa);
                p[m] += h;
                q[m] -= h;
                let fd = (rodrigues(p) - rodrigues(q)) / (2.0 * h);
                assert!((fd - jac[m]).abs().max() < 1e-8, "{aa:?} m={m}");
            }
        }
    }

    #[test]
    fn template_invariants() {
        let t = template();
        assert_eq!(t.num_vertices(), 96);
        for r in t.skin_weights.row_sums() {
            assert!((r - 1.0).abs() < 1e-9);
        }
        for r in t.joint_regressor.row_sums() {
            assert!((r - 1.0).abs() < 1e-9);
        }
        let joints = regress_joints(&t, &t.rest_vertices).unwrap();
        for j in 0..NUM_JOINTS {
            for c in 0..3 {
                assert!((joints.get(j, c) - REST_JOINTS[j][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_parent_tree_rejected() {
        let t = template();
        let mut parents = SMPL_PARENTS.to_vec();
        parents[3] = Some(5);
        assert!(BodyTemplate::new(
            t.rest_vertices.clone(),
            t.shape_dirs.clone(),
            t.skin_weights.clone(),
            t.joint_regressor.clone(),
            parents
        )
        .is_err());
    }

    #[test]
    fn zero_beta_gives_rest_vertices() {
        let t = template();
        assert_eq!(shaped_vertices(&t, &[0.0; NUM_BETAS]).unwrap(), t.rest_vertices);
    }

    #[test]
    fn unit_beta_adds_first_direction() {
        let t = template();
        let mut beta = [0.0; NUM_BETAS];
        beta[0] = 1.0;
        let got = shaped_vertices(&t, &beta).unwrap();
        for i in 0..t.num_vertices() {
            for c in 0..3 {
                let expected = t.rest_vertices.get(i, c) + t.shape_dirs.get(3 * i + c, 0);
                assert_eq!(got.get(i, c), expected);
            }
        }
    }

    #[test]
    fn random_beta_matches_loop_oracle() {
        let t = template();
        let mut r = rng::seeded(12);
        let beta: Vec<f64> = (0..NUM_BETAS).map(|_| rng::normal(&mut r)).collect();
        let got = shaped_vertices(&t, &beta).unwrap();
        for i in 0..t.num_vertices() {
            for c in 0..3 {
                let mut v = t.rest_vertices.get(i, c);
                for (k, b) in beta.iter().enumerate() {
                    v += b * t.shape_dirs.get(3 * i + c, k);
                }
                assert!((got.get(i, c) - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bind_pose_is_rest_mesh() {
        let t = template();
        let mesh = body_mesh(&t, &[0.0; POSE_DIM], &[0.0; NUM_BETAS]).unwrap();
        assert!(mesh.max_abs_diff(&t.rest_vertices) < 1e-12);
    }

    #[test]
    fn zero_pose_equals_shaped_vertices() {
        let t = template();
        let beta = [0.4, -1.0, 0.3, 0.0, 1.2, -0.5, 0.0, 0.1, 0.9, -2.0];
        let mesh = body_mesh(&t, &[0.0; POSE_DIM], &beta).unwrap();
        assert!(mesh.max_abs_diff(&shaped_vertices(&t, &beta).unwrap()) < 1e-12);
    }

    #[test]
    fn global_orientation_is_rigid_about_root() {
        let t = template();
        let mut theta = [0.0; POSE_DIM];
        theta[..3].copy_from_slice(&[0.4, -1.1, 0.7]);
        let mesh = body_mesh(&t, &theta, &[0.0; NUM_BETAS]).unwrap();
        let rot = rodrigues([0.4, -1.1, 0.7]);
        let root = Vector3::from(REST_JOINTS[0]);
        for i in 0..t.num_vertices() {
            let p = Vector3::from_row_slice(t.rest_vertices.row(i));
            let expected = rot * (p - root) + root;
            let got = Vector3::from_row_slice(mesh.row(i));
            assert!((expected - got).norm() < 1e-12);
        }
        // pairwise distances preserved
        for i in (0..t.num_vertices()).step_by(7) {
            for k in (0..t.num_vertices()).step_by(5) {
                let d0 = (Vector3::from_row_slice(t.rest_vertices.row(i))
                    - Vector3::from_row_slice(t.rest_vertices.row(k)))
                .norm();
                let d1 = (Vector3::from_row_slice(mesh.row(i)) - Vector3::from_row_slice(mesh.row(k))).norm();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    /// Independent LBS: per vertex, walk each influencing joint's chain
    /// from the root building 4x4 homogeneous transforms, then apply the
    /// inverse bind translation.
    fn lbs_oracle(t: &BodyTemplate, theta: &[f64], beta: &[f64]) -> Matrix {
        use nalgebra::Matrix4;
        let shaped = shaped_vertices(t, beta).unwrap();
        let joints = t.joint_regressor.matmul(&shaped).unwrap();
        let jp = |j: usize| Vector3::from_row_slice(joints.row(j));
        let world = |j: usize| -> Matrix4<f64> {
            let mut chain = vec![j];
            while let Some(p) = t.parents[*chain.last().unwrap()] {
                chain.push(p);
            }
            let mut m = Matrix4::identity();
            for &k in chain.iter().rev() {
                let offset = match t.parents[k] {
                    Some(p) => jp(k) - jp(p),
                    None => jp(k),
                };
                let mut local = Matrix4::identity();
                let r = quaternion_or_identity([theta[3 * k], theta[3 * k + 1], theta[3 * k + 2]]);
                local.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
                local.fixed_view_mut::<3, 1>(0, 3).copy_from(&offset);
                m *= local;
            }
            m
        };
        let mut out = Matrix::zeros(t.num_vertices(), 3);
        for i in 0..t.num_vertices() {
            let p = Vector3::from_row_slice(shaped.row(i));
            let mut acc = Vector3::zeros();
            for j in 0..NUM_JOINTS {
                let w = t.skin_weights.get(i, j);
                if w > 0.0 {
                    let local = (p - jp(j)).push(1.0);
                    acc += (world(j) * local).xyz() * w;
                }
            }
            out.row_mut(i).copy_from_slice(acc.as_slice());
        }
        out
    }

    fn quaternion_or_identity(aa: [f64; 3]) -> Matrix3<f64> {
        if Vector3::from(aa).norm() == 0.0 {
            Matrix3::identity()
        } else {
            quaternion_oracle(aa)
        }
    }

    #[test]
    fn lbs_matches_per_vertex_oracle() {
        let t = template();
        let mut r = rng::seeded(99);
        for _ in 0..5 {
            let theta = random_pose(&mut r, 0.3);
            let beta: Vec<f64> = (0..NUM_BETAS).map(|_| rng::normal(&mut r)).collect();
            let got = body_mesh(&t, &theta, &beta).unwrap();
            assert!(got.max_abs_diff(&lbs_oracle(&t, &theta, &beta)) < 1e-9);
        }
    }

    #[test]
    fn regress_selects_one_hot_vertices() {
        let t = template();
        let mut w = Matrix::zeros(NUM_JOINTS, t.num_vertices());
        for j in 0..NUM_JOINTS {
            w.set(j, 4 * j + 1, 1.0);
        }
        let t2 = BodyTemplate::new(
            t.rest_vertices.clone(),
            t.shape_dirs.clone(),
            t.skin_weights.clone(),
            w,
            t.parents.clone(),
        )
        .unwrap();
        let j = regress_joints(&t2, &t.rest_vertices).unwrap();
        for k in 0..NUM_JOINTS {
            assert_eq!(j.row(k), t.rest_vertices.row(4 * k + 1));
        }
        let zero = regress_joints(&t, &Matrix::zeros(96, 3)).unwrap();
        assert_eq!(zero, Matrix::zeros(NUM_JOINTS, 3));
    }

    #[test]
    fn regress_shape_mismatch() {
        assert!(regress_joints(&template(), &Matrix::zeros(10, 3)).is_err());
    }

    #[test]
    fn flat_regressor_agrees_with_matrix_form() {
        let t = template();
        let mut r = rng::seeded(1);
        let mesh = rng::normal_matrix(&mut r, 96, 3, 1.0);
        let a = regress_joints(&t, &mesh).unwrap();
        let flat = Matrix::from_vec(1, 288, mesh.into_vec()).unwrap();
        let b = flat.matmul(&t.flat_regressor()).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| (x - y).abs() < 1e-14));
    }

    #[test]
    fn projection_hand_values() {
        let j = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let k = project(&j, &CameraParams::new(2.0, [0.5, -0.5]).unwrap()).unwrap();
        assert_eq!(k.row(0), &[2.5, 3.5]);
        let k = project(&j, &CameraParams::new(1.0, [0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(k.row(0), &[1.0, 2.0]);
        assert!(CameraParams::new(0.0, [0.0, 0.0]).is_err());
    }

    #[test]
    fn tape_projection_matches_loop() {
        let mut r = rng::seeded(5);
        let joints = rng::normal_matrix(&mut r, 3, POSE_DIM, 1.0);
        let cam = Matrix::from_fn(3, 3, |i, c| if c == 0 { 0.8 + 0.1 * i as f64 } else { rng::normal(&mut r) });
        let mut tape = Tape::new();
        let (jv, cv) = (tape.constant(joints.clone()), tape.constant(cam.clone()));
        let k = project_on_tape(&mut tape, jv, cv).unwrap();
        let k = tape.value(k);
        for s in 0..3 {
            for j in 0..NUM_JOINTS {
                for c in 0..2 {
                    let expected = cam.get(s, 0) * joints.get(s, 3 * j + c) + cam.get(s, 1 + c);
                    assert!((k.get(s, 2 * j + c) - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mesh_gradients_pass_grad_check() {
        let t = Arc::new(template());
        let mut r = rng::seeded(21);
        let theta = rng::normal_matrix(&mut r, 2, POSE_DIM, 0.4);
        let beta = rng::normal_matrix(&mut r, 2, NUM_BETAS, 0.8);
        let w = rng::normal_matrix(&mut r, 2, 3 * t.num_vertices(), 1.0);
        let flat = t.flat_regressor();
        let cam = Matrix::from_rows(&[[0.9, 0.1, -0.2], [1.2, 0.0, 0.3]]).unwrap();
        let rep = check_tape_function(
            |tape, v| {
                let mesh = body_mesh_on_tape(tape, &t, v[0], v[1])?;
                let wv = tape.constant(w.clone());
                let m = tape.mul(mesh, wv)?;
                let s1 = tape.sum(m);
                let rv = tape.constant(flat.clone());
                let joints = tape.matmul(mesh, rv)?;
                let k = project_on_tape(tape, joints, v[2])?;
                let s2 = tape.sum_squares(k);
                tape.add(s1, s2)
            },
            &[theta, beta, cam],
            &GradCheckOptions {
                coords_per_tensor: 72,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "{rep:?}");
    }

    #[test]
    fn gradient_at_bind_pose_is_finite_and_checked() {
        let t = Arc::new(template());
        let rep = check_tape_function(
            |tape, v| {
                let mesh = body_mesh_on_tape(tape, &t, v[0], v[1])?;
                Ok(tape.sum_squares(mesh))
            },
            &[Matrix::zeros(1, POSE_DIM), Matrix::zeros(1, NUM_BETAS)],
            &GradCheckOptions {
                coords_per_tensor: 72,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "{rep:?}");
    }

    #[test]
    fn template_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = template();
        t.save(dir.path()).unwrap();
        assert_eq!(BodyTemplate::load(dir.path()).unwrap(), t);
    }
}
