//! Articulated linear-blend-skinning body with per-segment scaling.
//!
//! Rest-pose joints `J_k` form a tree. Scaling each segment about its
//! proximal joint moves the child joints (`J'_k = J'_p + S_p (J_k - J_p)`)
//! and every vertex (`x' = sum_k w_k (J'_k + S_k (x - J_k))`). Posing then
//! composes rotations down the tree (`A_k = A_p R_k`), with joint origins
//! `P_0 = J'_0 + t` and `P_k = P_p + A_p (J'_k - J'_p)`, and blends
//! `y = sum_k w_k (A_k (x' - J'_k) + P_k)`.

mod config;
pub mod humanoid;
mod prior;

pub use config::{BodyConfig, ConfigError, JointConfig};
pub use prior::{prior_losses, PriorConfig, PriorLosses, LAMBDA_BETA, LAMBDA_THETA};

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use thiserror::Error;

use crate::mesh::Mesh;

/// Valid per-axis scale range (exclusive).
pub const SCALE_RANGE: (f64, f64) = (0.25, 4.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BodyError {
    #[error("joint {0} has parent {1}, which does not precede it")]
    Parent(usize, usize),
    #[error("blend weights of vertex {0} are negative or do not sum to 1")]
    Weights(usize),
    #[error("joint {0} influences no vertex")]
    UnusedJoint(usize),
    #[error("weight table has {weights} rows for {vertices} vertices")]
    WeightCount { weights: usize, vertices: usize },
    #[error("scale {value} of segment {joint} axis {axis} outside (0.25, 4)")]
    Scale { joint: usize, axis: usize, value: f64 },
    #[error("rotation of joint {0} exceeds pi")]
    Rotation(usize),
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    pub rest: Point3<f64>,
}

/// Joint hierarchy plus per-vertex skinning data for one template.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicTree {
    pub joints: Vec<Joint>,
    /// Sparse blend weights `(joint, weight)` per template vertex.
    pub weights: Vec<Vec<(usize, f64)>>,
    /// Dominant joint per vertex.
    pub segments: Vec<usize>,
    /// Strict ancestors of each joint, nearest first.
    ancestors: Vec<Vec<usize>>,
}

impl KinematicTree {
    pub fn new(joints: Vec<Joint>, weights: Vec<Vec<(usize, f64)>>) -> Result<Self, BodyError> {
        for (k, j) in joints.iter().enumerate() {
            match j.parent {
                Some(p) if p >= k => return Err(BodyError::Parent(k, p)),
                None if k != 0 => return Err(BodyError::Parent(k, k)),
                _ => {}
            }
        }
        let mut used = vec![false; joints.len()];
        let mut segments = Vec::with_capacity(weights.len());
        for (v, row) in weights.iter().enumerate() {
            let sum: f64 = row.iter().map(|&(_, w)| w).sum();
            if row.is_empty()
                || (sum - 1.0).abs() > 1e-6
                || row.iter().any(|&(j, w)| w < 0.0 || j >= joints.len())
            {
                return Err(BodyError::Weights(v));
            }
            let mut best = row[0];
            for &(j, w) in row {
                if w > 0.0 {
                    used[j] = true;
                }
                if w > best.1 || (w == best.1 && j < best.0) {
                    best = (j, w);
                }
            }
            segments.push(best.0);
        }
        if let Some(k) = used.iter().position(|&u| !u) {
            return Err(BodyError::UnusedJoint(k));
        }
        let ancestors = (0..joints.len())
            .map(|k| {
                let mut chain = Vec::new();
                let mut cur = joints[k].parent;
                while let Some(p) = cur {
                    chain.push(p);
                    cur = joints[p].parent;
                }
                chain
            })
            .collect();
        Ok(KinematicTree {
            joints,
            weights,
            segments,
            ancestors,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn parameter_count(&self) -> usize {
        6 * self.joints.len() + 3
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// Strict ancestors of joint `k`, nearest first.
    pub fn ancestors(&self, k: usize) -> &[usize] {
        &self.ancestors[k]
    }

    /// Whether `k` is `j` or one of its descendants.
    pub fn in_subtree(&self, j: usize, k: usize) -> bool {
        k == j || self.ancestors[k].contains(&j)
    }
}

/// Template mesh with its skeleton.
#[derive(Debug, Clone)]
pub struct BodyModel {
    pub tree: KinematicTree,
    pub template: Mesh,
}

impl BodyModel {
    pub fn new(tree: KinematicTree, template: Mesh) -> Result<Self, BodyError> {
        if tree.weights.len() != template.vertex_count() {
            return Err(BodyError::WeightCount {
                weights: tree.weights.len(),
                vertices: template.vertex_count(),
            });
        }
        Ok(BodyModel { tree, template })
    }
}

/// Pose (axis-angle per joint), root translation and per-segment scales.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyParams {
    pub pose: Vec<Vector3<f64>>,
    pub translation: Vector3<f64>,
    pub scale: Vec<Vector3<f64>>,
}

impl BodyParams {
    /// Rest pose at unit scale.
    pub fn rest(joints: usize) -> Self {
        BodyParams {
            pose: vec![Vector3::zeros(); joints],
            translation: Vector3::zeros(),
            scale: vec![Vector3::repeat(1.0); joints],
        }
    }

    /// Flat layout: pose (3 per joint), translation (3), scale (3 per joint).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(6 * self.pose.len() + 3);
        for p in &self.pose {
            v.extend_from_slice(p.as_slice());
        }
        v.extend_from_slice(self.translation.as_slice());
        for s in &self.scale {
            v.extend_from_slice(s.as_slice());
        }
        v
    }

    pub fn from_slice(joints: usize, v: &[f64]) -> Result<Self, BodyError> {
        if v.len() != 6 * joints + 3 {
            return Err(BodyError::ParamCount {
                expected: 6 * joints + 3,
                got: v.len(),
            });
        }
        let vec3 = |i: usize| Vector3::new(v[i], v[i + 1], v[i + 2]);
        Ok(BodyParams {
            pose: (0..joints).map(|k| vec3(3 * k)).collect(),
            translation: vec3(3 * joints),
            scale: (0..joints).map(|k| vec3(3 * joints + 3 + 3 * k)).collect(),
        })
    }

    pub fn validate(&self) -> Result<(), BodyError> {
        for (k, s) in self.scale.iter().enumerate() {
            for a in 0..3 {
                if !(s[a] > SCALE_RANGE.0 && s[a] < SCALE_RANGE.1) {
                    return Err(BodyError::Scale {
                        joint: k,
                        axis: a,
                        value: s[a],
                    });
                }
            }
        }
        for (k, p) in self.pose.iter().enumerate() {
            if !(p.norm() <= std::f64::consts::PI) {
                return Err(BodyError::Rotation(k));
            }
        }
        Ok(())
    }
}

/// Offsets of the three parameter groups in the flat layout.
pub fn pose_offset(joint: usize) -> usize {
    3 * joint
}

pub fn translation_offset(joints: usize) -> usize {
    3 * joints
}

pub fn scale_offset(joints: usize, joint: usize) -> usize {
    3 * joints + 3 + 3 * joint
}

/// Derivative of `exp([v]x)` with respect to `v_c`, as `K_c R` with `K_c`
/// skew-symmetric; returns `K_c`.
fn rotation_generator(v: &Vector3<f64>, r: &Matrix3<f64>, c: usize) -> Matrix3<f64> {
    let theta2 = v.norm_squared();
    let e = Vector3::ith(c, 1.0);
    if theta2 < 1e-16 {
        return e.cross_matrix();
    }
    let w = v.cross(&((Matrix3::identity() - r) * e));
    (v.cross_matrix() * v[c] + w.cross_matrix()) / theta2
}

/// Forward-kinematics state for one parameter set.
#[derive(Debug, Clone)]
pub struct Posed {
    /// Scaled rest joints `J'`.
    pub scaled_joints: Vec<Point3<f64>>,
    /// World rotation `A_k` and origin `P_k` per joint.
    pub rotation: Vec<Matrix3<f64>>,
    pub origin: Vec<Point3<f64>>,
    /// Local rotations `R_k`.
    pub local: Vec<Matrix3<f64>>,
    /// Scaled rest vertices `x'`.
    pub scaled_vertices: Vec<Point3<f64>>,
    /// Skinned vertices.
    pub vertices: Vec<Point3<f64>>,
}

pub fn forward(model: &BodyModel, params: &BodyParams) -> Posed {
    let tree = &model.tree;
    let nj = tree.joint_count();
    // Joint displacements `J'_k - J_k` and transform offsets `P_k - J'_k`
    // are accumulated directly so identity parameters reproduce the
    // template bit for bit.
    let mut joint_shift: Vec<Vector3<f64>> = Vec::with_capacity(nj);
    let mut offset: Vec<Vector3<f64>> = Vec::with_capacity(nj);
    let mut scaled_joints = Vec::with_capacity(nj);
    let mut rotation = Vec::with_capacity(nj);
    let mut origin = Vec::with_capacity(nj);
    let mut local = Vec::with_capacity(nj);
    for (k, joint) in tree.joints.iter().enumerate() {
        let r = *Rotation3::new(params.pose[k]).matrix();
        local.push(r);
        match joint.parent {
            None => {
                joint_shift.push(Vector3::zeros());
                offset.push(params.translation);
                rotation.push(r);
            }
            Some(p) => {
                let bone = joint.rest - tree.joints[p].rest;
                let stretch = Matrix3::from_diagonal(&(params.scale[p] - Vector3::repeat(1.0)));
                let shift = joint_shift[p] + stretch * bone;
                let scaled_bone = bone + (shift - joint_shift[p]);
                offset.push(offset[p] + (rotation[p] - Matrix3::identity()) * scaled_bone);
                joint_shift.push(shift);
                rotation.push(rotation[p] * r);
            }
        }
        let jk = joint.rest + joint_shift[k];
        scaled_joints.push(jk);
        origin.push(jk + offset[k]);
    }
    let mut scaled_vertices = Vec::with_capacity(model.template.vertex_count());
    let mut vertices = Vec::with_capacity(model.template.vertex_count());
    for (x, row) in model.template.vertices().iter().zip(&tree.weights) {
        let mut dx = Vector3::zeros();
        for &(k, w) in row {
            let stretch = Matrix3::from_diagonal(&(params.scale[k] - Vector3::repeat(1.0)));
            dx += (joint_shift[k] + stretch * (x - tree.joints[k].rest)) * w;
        }
        let xs = x + dx;
        let mut dy = Vector3::zeros();
        for &(k, w) in row {
            dy += ((rotation[k] - Matrix3::identity()) * (xs - scaled_joints[k]) + offset[k]) * w;
        }
        scaled_vertices.push(xs);
        vertices.push(xs + dy);
    }
    Posed {
        scaled_joints,
        rotation,
        origin,
        local,
        scaled_vertices,
        vertices,
    }
}

/// Skinned template mesh.
pub fn skin(model: &BodyModel, params: &BodyParams) -> Result<Mesh, BodyError> {
    params.validate()?;
    Ok(model.template.with_positions(forward(model, params).vertices))
}

/// Cached per-parameter quantities shared by all vertices.
struct JacobianContext {
    /// `W_{j,c} = A_p(j) K_c A_p(j)^T` for each joint and axis.
    w: Vec<[Matrix3<f64>; 3]>,
}

impl JacobianContext {
    fn new(model: &BodyModel, params: &BodyParams, posed: &Posed) -> Self {
        let w = (0..model.tree.joint_count())
            .map(|j| {
                let parent_rot = match model.tree.joints[j].parent {
                    Some(p) => posed.rotation[p],
                    None => Matrix3::identity(),
                };
                let g = |c| {
                    parent_rot * rotation_generator(&params.pose[j], &posed.local[j], c) * parent_rot.transpose()
                };
                [g(0), g(1), g(2)]
            })
            .collect();
        JacobianContext { w }
    }
}

/// Calls `emit(parameter, dy/dparameter)` for every parameter that moves
/// vertex `v`; a parameter may be emitted more than once (contributions add).
fn vertex_partials(
    model: &BodyModel,
    params: &BodyParams,
    posed: &Posed,
    ctx: &JacobianContext,
    v: usize,
    mut emit: impl FnMut(usize, Vector3<f64>),
) {
    let tree = &model.tree;
    let nj = tree.joint_count();
    let row = &tree.weights[v];
    let x = model.template.vertices()[v];
    let xs = posed.scaled_vertices[v];
    let mut blend = Matrix3::zeros();
    for &(k, w) in row {
        blend += posed.rotation[k] * w;
    }
    for a in 0..3 {
        emit(translation_offset(nj) + a, Vector3::ith(a, 1.0));
    }
    for &(k, w) in row {
        if w == 0.0 {
            continue;
        }
        let g = posed.rotation[k] * (xs - posed.scaled_joints[k]) + posed.origin[k].coords;
        // Rotations of k and of every ancestor swing this joint's transform.
        for j in std::iter::once(k).chain(tree.ancestors(k).iter().copied()) {
            let arm = (g - posed.origin[j].coords) * w;
            for c in 0..3 {
                emit(pose_offset(j) + c, ctx.w[j][c] * arm);
            }
        }
        // Own scale: x' moves by w S-derivative applied to (x - J_k).
        let local = x - tree.joints[k].rest;
        for a in 0..3 {
            emit(scale_offset(nj, k) + a, blend.column(a) * (w * local[a]));
        }
        // Ancestor scales move J'_k (and P_k) by u = e_a (J_c - J_j)_a,
        // where c is the child of j on the path to k.
        let mut child = k;
        for &j in tree.ancestors(k) {
            let offset = tree.joints[child].rest - tree.joints[j].rest;
            let relative = posed.rotation[j] - posed.rotation[k];
            for a in 0..3 {
                let u = offset[a];
                if u == 0.0 {
                    continue;
                }
                let d = (blend.column(a) + relative.column(a)) * (w * u);
                emit(scale_offset(nj, j) + a, d);
            }
            child = j;
        }
    }
    let _ = params;
}

/// Dense Jacobian: for each vertex a 3 x P block, row-major
/// (`out[(v * 3 + i) * P + p]`).
pub fn skin_jacobian(model: &BodyModel, params: &BodyParams) -> Vec<f64> {
    let posed = forward(model, params);
    let ctx = JacobianContext::new(model, params, &posed);
    let np = model.tree.parameter_count();
    let nv = model.template.vertex_count();
    let mut out = vec![0.0; nv * 3 * np];
    for v in 0..nv {
        vertex_partials(model, params, &posed, &ctx, v, |p, d| {
            for i in 0..3 {
                out[(v * 3 + i) * np + p] += d[i];
            }
        });
    }
    out
}

/// Vector-Jacobian product: gradient of `sum_v g_v . y_v` with respect to
/// the flat parameter vector.
pub fn skin_vjp(model: &BodyModel, params: &BodyParams, posed: &Posed, grad: &[Vector3<f64>]) -> Vec<f64> {
    let ctx = JacobianContext::new(model, params, posed);
    let mut out = vec![0.0; model.tree.parameter_count()];
    for (v, g) in grad.iter().enumerate() {
        if *g == Vector3::zeros() {
            continue;
        }
        vertex_partials(model, params, posed, &ctx, v, |p, d| out[p] += g.dot(&d));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-bone chain along x with a strip of vertices.
    fn chain() -> BodyModel {
        let joints = vec![
            Joint {
                name: "root".into(),
                parent: None,
                rest: Point3::new(0.0, 0.0, 0.0),
            },
            Joint {
                name: "mid".into(),
                parent: Some(0),
                rest: Point3::new(1.0, 0.0, 0.0),
            },
            Joint {
                name: "tip".into(),
                parent: Some(1),
                rest: Point3::new(2.0, 0.0, 0.0),
            },
        ];
        let mut verts = Vec::new();
        let mut weights = Vec::new();
        for i in 0..7 {
            let x = i as f64 * 0.5;
            for y in [0.0, 0.2] {
                verts.push(Point3::new(x, y, 0.1 * i as f64));
                let w = match i {
                    0 | 1 => vec![(0, 1.0)],
                    2 => vec![(0, 0.5), (1, 0.5)],
                    3 => vec![(1, 1.0)],
                    4 => vec![(1, 0.3), (2, 0.7)],
                    _ => vec![(2, 1.0)],
                };
                weights.push(w);
            }
        }
        let mut faces = Vec::new();
        for i in 0..6 {
            let (a, b, c, d) = (2 * i, 2 * i + 2, 2 * i + 3, 2 * i + 1);
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
        let tree = KinematicTree::new(joints, weights).unwrap();
        BodyModel::new(tree, Mesh::new(verts, faces).unwrap()).unwrap()
    }

    #[test]
    fn rest_params_reproduce_template() {
        let m = chain();
        let out = skin(&m, &BodyParams::rest(3)).unwrap();
        assert_eq!(out.vertices(), m.template.vertices());
    }

    #[test]
    fn translation_shifts_everything() {
        let m = chain();
        let mut p = BodyParams::rest(3);
        p.translation = Vector3::new(0.5, -1.0, 2.0);
        let out = skin(&m, &p).unwrap();
        for (a, b) in out.vertices().iter().zip(m.template.vertices()) {
            assert!((a - b - p.translation).norm() < 1e-12);
        }
    }

    #[test]
    fn single_joint_rotation_is_rigid_about_joint() {
        let m = chain();
        let mut p = BodyParams::rest(3);
        p.pose[2] = Vector3::new(0.0, 0.0, 0.7);
        let out = skin(&m, &p).unwrap();
        let r = Rotation3::new(p.pose[2]);
        let center = m.tree.joints[2].rest;
        for v in 0..m.template.vertex_count() {
            if m.tree.weights[v] == vec![(2, 1.0)] {
                let expected = center + r * (m.template.vertices()[v] - center);
                assert!((out.vertices()[v] - expected).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_trees_and_params() {
        let m = chain();
        let mut joints = m.tree.joints.clone();
        joints[1].parent = Some(2);
        assert_eq!(
            KinematicTree::new(joints, m.tree.weights.clone()),
            Err(BodyError::Parent(1, 2))
        );
        let mut weights = m.tree.weights.clone();
        weights[0] = vec![(0, 0.7)];
        assert_eq!(
            KinematicTree::new(m.tree.joints.clone(), weights),
            Err(BodyError::Weights(0))
        );
        let mut p = BodyParams::rest(3);
        p.scale[1].y = 5.0;
        assert!(matches!(skin(&m, &p), Err(BodyError::Scale { joint: 1, axis: 1, .. })));
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let m = chain();
        let mut p = BodyParams::rest(3);
        p.pose = vec![
            Vector3::new(0.2, -0.1, 0.3),
            Vector3::new(-0.4, 0.25, 0.1),
            Vector3::new(0.05, 0.3, -0.2),
        ];
        p.translation = Vector3::new(0.1, 0.2, -0.3);
        p.scale = vec![
            Vector3::new(1.1, 0.9, 1.2),
            Vector3::new(0.8, 1.3, 1.05),
            Vector3::new(1.2, 1.1, 0.95),
        ];
        let jac = skin_jacobian(&m, &p);
        let base = p.to_vec();
        let np = base.len();
        let h = 1e-5;
        for q in 0..np {
            let mut plus = base.clone();
            plus[q] += h;
            let mut minus = base.clone();
            minus[q] -= h;
            let yp = forward(&m, &BodyParams::from_slice(3, &plus).unwrap()).vertices;
            let ym = forward(&m, &BodyParams::from_slice(3, &minus).unwrap()).vertices;
            for v in 0..m.template.vertex_count() {
                let fd = (yp[v] - ym[v]) / (2.0 * h);
                for i in 0..3 {
                    let a = jac[(v * 3 + i) * np + q];
                    assert!((a - fd[i]).abs() <= 1e-4 * fd[i].abs().max(1e-2), "param {q} vertex {v}: {a} vs {}", fd[i]);
                }
            }
        }
    }
}
