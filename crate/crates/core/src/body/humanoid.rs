//! Procedural low-poly humanoid: a smooth union of tapered capsules,
//! polygonized with marching tetrahedra, then decimated.
//!
//! Coordinates are z-up in meters; the body faces +y and its left side is +x.
//! Arms hang in an A-pose at 45 degrees.

use std::collections::HashMap;
use std::f64::consts::FRAC_1_SQRT_2;
use std::sync::OnceLock;

use nalgebra::{Point3, Vector3};
use thiserror::Error;

use super::{BodyError, BodyModel, Joint, KinematicTree, PriorConfig};
use crate::decimate::{qslim_decimate, DecimateError};
use crate::mesh::{repair, Mesh, MeshError};

/// Vertex count of the default template.
pub const DEFAULT_VERTICES: usize = 1250;

/// Joint names of the default skeleton, parents first.
pub const JOINT_NAMES: [&str; 16] = [
    "pelvis",
    "spine1",
    "spine2",
    "neck",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
];

const PARENTS: [Option<usize>; 16] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(0),
    Some(4),
    Some(5),
    Some(0),
    Some(7),
    Some(8),
    Some(2),
    Some(10),
    Some(11),
    Some(2),
    Some(13),
    Some(14),
];

const GRID_SPACING: f64 = 0.012;
const BLEND: f64 = 0.025;
const WEIGHT_FALLOFF: f64 = 0.01;
const SMOOTHING_PASSES: usize = 2;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Decimate(#[from] DecimateError),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error("template surface has genus {0}")]
    Genus(i64),
}

fn arm_point(side: f64, from: Point3<f64>, length: f64) -> Point3<f64> {
    from + Vector3::new(side * FRAC_1_SQRT_2, 0.0, -FRAC_1_SQRT_2) * length
}

fn rest_joints() -> Vec<Point3<f64>> {
    let mut j = vec![
        Point3::new(0.0, 0.0, 0.95),
        Point3::new(0.0, 0.0, 1.08),
        Point3::new(0.0, 0.0, 1.25),
        Point3::new(0.0, 0.0, 1.49),
    ];
    for side in [1.0, -1.0] {
        j.push(Point3::new(side * 0.1, 0.0, 0.9));
        j.push(Point3::new(side * 0.1, 0.0, 0.5));
        j.push(Point3::new(side * 0.1, 0.0, 0.09));
    }
    for side in [1.0, -1.0] {
        let shoulder = Point3::new(side * 0.19, 0.0, 1.42);
        let elbow = arm_point(side, shoulder, 0.28);
        let wrist = arm_point(side, elbow, 0.25);
        j.extend([shoulder, elbow, wrist]);
    }
    j
}

/// Default axis-angle bounds per joint, radians.
fn joint_ranges() -> Vec<([f64; 3], [f64; 3])> {
    let elbow = 2.3 * FRAC_1_SQRT_2;
    vec![
        ([-0.3, -0.3, -0.6], [0.3, 0.3, 0.6]),
        ([-0.4, -0.3, -0.4], [0.3, 0.3, 0.4]),
        ([-0.3, -0.2, -0.3], [0.2, 0.2, 0.3]),
        ([-0.5, -0.4, -0.7], [0.4, 0.4, 0.7]),
        ([-0.5, -0.7, -0.5], [1.6, 0.2, 0.5]),
        ([-2.4, -0.05, -0.05], [0.0, 0.05, 0.05]),
        ([-0.4, -0.2, -0.2], [0.4, 0.2, 0.2]),
        ([-0.5, -0.2, -0.5], [1.6, 0.7, 0.5]),
        ([-2.4, -0.05, -0.05], [0.0, 0.05, 0.05]),
        ([-0.4, -0.2, -0.2], [0.4, 0.2, 0.2]),
        ([-0.8, -0.6, -0.6], [0.8, 0.6, 0.6]),
        ([0.0, -0.1, 0.0], [elbow, 0.1, elbow]),
        ([-0.4, -0.4, -0.4], [0.4, 0.4, 0.4]),
        ([-0.8, -0.6, -0.6], [0.8, 0.6, 0.6]),
        ([0.0, -0.1, -elbow], [elbow, 0.1, 0.0]),
        ([-0.4, -0.4, -0.4], [0.4, 0.4, 0.4]),
    ]
}

/// Capsule whose radius varies linearly along its axis.
#[derive(Debug, Clone, Copy)]
struct Limb {
    a: Point3<f64>,
    b: Point3<f64>,
    ra: f64,
    rb: f64,
    joint: usize,
}

impl Limb {
    fn distance(&self, p: &Point3<f64>) -> f64 {
        let ab = self.b - self.a;
        let len2 = ab.norm_squared();
        let t = if len2 == 0.0 {
            0.0
        } else {
            ((p - self.a).dot(&ab) / len2).clamp(0.0, 1.0)
        };
        (p - (self.a + ab * t)).norm() - (self.ra + (self.rb - self.ra) * t)
    }
}

fn limbs(j: &[Point3<f64>]) -> Vec<Limb> {
    let limb = |a: Point3<f64>, b: Point3<f64>, ra, rb, joint| Limb { a, b, ra, rb, joint };
    let p = |x, y, z| Point3::new(x, y, z);
    let mut out = vec![
        limb(p(-0.08, 0.0, 0.92), p(0.08, 0.0, 0.92), 0.115, 0.115, 0),
        limb(p(0.0, 0.0, 0.98), p(0.0, 0.0, 1.18), 0.12, 0.125, 1),
        limb(p(-0.07, 0.0, 1.31), p(0.07, 0.0, 1.31), 0.125, 0.125, 2),
        limb(p(-0.12, 0.0, 1.41), p(0.12, 0.0, 1.41), 0.06, 0.06, 2),
        limb(j[3], p(0.0, 0.0, 1.56), 0.05, 0.045, 3),
        limb(p(0.0, 0.01, 1.66), p(0.0, 0.01, 1.68), 0.1, 0.09, 3),
    ];
    for (side, base) in [(1.0, 4), (-1.0, 7)] {
        let (hip, knee, ankle) = (j[base], j[base + 1], j[base + 2]);
        out.push(limb(hip, knee, 0.075, 0.052, base));
        out.push(limb(knee, ankle, 0.05, 0.035, base + 1));
        out.push(limb(
            p(side * 0.1, -0.03, 0.05),
            p(side * 0.1, 0.15, 0.035),
            0.04,
            0.032,
            base + 2,
        ));
    }
    for (side, base) in [(1.0, 10), (-1.0, 13)] {
        let (shoulder, elbow, wrist) = (j[base], j[base + 1], j[base + 2]);
        out.push(limb(shoulder, elbow, 0.048, 0.038, base));
        out.push(limb(elbow, wrist, 0.036, 0.028, base + 1));
        out.push(limb(wrist, arm_point(side, wrist, 0.08), 0.03, 0.026, base + 2));
    }
    out
}

fn smooth_min(a: f64, b: f64, k: f64) -> f64 {
    let h = (k - (a - b).abs()).max(0.0) / k;
    a.min(b) - h * h * k * 0.25
}

fn body_sdf(limbs: &[Limb], p: &Point3<f64>) -> f64 {
    limbs
        .iter()
        .map(|l| l.distance(p))
        .fold(f64::INFINITY, |acc, d| if acc.is_infinite() { d } else { smooth_min(acc, d, BLEND) })
}

/// Marching tetrahedra over a regular grid (six tetrahedra per cell sharing
/// the main diagonal). Triangles face away from the negative region.
fn polygonize(f: impl Fn(&Point3<f64>) -> f64 + Sync, lo: Point3<f64>, hi: Point3<f64>, h: f64) -> Result<Mesh, MeshError> {
    let dims = ((hi - lo) / h).map(|x| x.ceil() as usize + 1);
    let (nx, ny, nz) = (dims.x, dims.y, dims.z);
    let id = |i: usize, j: usize, k: usize| (k * ny + j) * nx + i;
    let pos = |n: usize| {
        let (i, j, k) = (n % nx, (n / nx) % ny, n / (nx * ny));
        lo + Vector3::new(i as f64, j as f64, k as f64) * h
    };
    use rayon::prelude::*;
    let values: Vec<f64> = (0..nx * ny * nz)
        .into_par_iter()
        .map(|n| {
            let v = f(&pos(n));
            if v == 0.0 {
                1e-12
            } else {
                v
            }
        })
        .collect();
    const CORNERS: [[usize; 3]; 8] = [
        [0, 0, 0],
        [1, 0, 0],
        [0, 1, 0],
        [1, 1, 0],
        [0, 0, 1],
        [1, 0, 1],
        [0, 1, 1],
        [1, 1, 1],
    ];
    const TETS: [[usize; 4]; 6] = [
        [0, 1, 3, 7],
        [0, 1, 5, 7],
        [0, 2, 3, 7],
        [0, 2, 6, 7],
        [0, 4, 5, 7],
        [0, 4, 6, 7],
    ];
    let mut verts: Vec<Point3<f64>> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let mut cut: HashMap<(usize, usize), usize> = HashMap::new();
    let mut crossing = |a: usize, b: usize, verts: &mut Vec<Point3<f64>>| {
        let key = (a.min(b), a.max(b));
        *cut.entry(key).or_insert_with(|| {
            let (fa, fb) = (values[key.0], values[key.1]);
            let t = fa / (fa - fb);
            verts.push(pos(key.0) + (pos(key.1) - pos(key.0)) * t);
            verts.len() - 1
        })
    };
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let corner = CORNERS.map(|c| id(i + c[0], j + c[1], k + c[2]));
                let signs = corner.map(|n| values[n] < 0.0);
                if signs.iter().all(|&s| s) || signs.iter().all(|&s| !s) {
                    continue;
                }
                for tet in TETS {
                    let nodes = tet.map(|c| corner[c]);
                    let inside: Vec<usize> = nodes.iter().copied().filter(|&n| values[n] < 0.0).collect();
                    let outside: Vec<usize> = nodes.iter().copied().filter(|&n| values[n] >= 0.0).collect();
                    let polys: Vec<[usize; 3]> = match inside.len() {
                        1 | 3 => {
                            let (lone, rest) = if inside.len() == 1 { (inside[0], &outside) } else { (outside[0], &inside) };
                            vec![[
                                crossing(lone, rest[0], &mut verts),
                                crossing(lone, rest[1], &mut verts),
                                crossing(lone, rest[2], &mut verts),
                            ]]
                        }
                        2 => {
                            let (a, b, c, d) = (inside[0], inside[1], outside[0], outside[1]);
                            let q = [
                                crossing(a, c, &mut verts),
                                crossing(a, d, &mut verts),
                                crossing(b, d, &mut verts),
                                crossing(b, c, &mut verts),
                            ];
                            vec![[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
                        }
                        _ => continue,
                    };
                    let centroid = |s: &[usize]| {
                        s.iter().fold(Vector3::zeros(), |acc, &n| acc + pos(n).coords) / s.len() as f64
                    };
                    let out_dir = centroid(&outside) - centroid(&inside);
                    for mut t in polys {
                        let n = (verts[t[1]] - verts[t[0]]).cross(&(verts[t[2]] - verts[t[0]]));
                        if n.dot(&out_dir) < 0.0 {
                            t.swap(1, 2);
                        }
                        faces.push(t);
                    }
                }
            }
        }
    }
    Mesh::new(verts, faces)
}

/// Sparse top-3 blend weights from per-joint surface proximity, smoothed
/// over the mesh graph.
fn blend_weights(mesh: &Mesh, limbs: &[Limb], joints: usize) -> Vec<Vec<(usize, f64)>> {
    let mut dense: Vec<Vec<f64>> = mesh
        .vertices()
        .iter()
        .map(|p| {
            let mut d = vec![f64::INFINITY; joints];
            for l in limbs {
                d[l.joint] = d[l.joint].min(l.distance(p));
            }
            let best = d.iter().copied().fold(f64::INFINITY, f64::min);
            d.iter().map(|&x| (-((x - best) / WEIGHT_FALLOFF).powi(2)).exp()).collect()
        })
        .collect();
    let neighbors = mesh.vertex_neighbors();
    for _ in 0..SMOOTHING_PASSES {
        dense = (0..dense.len())
            .map(|v| {
                let nb = &neighbors[v];
                (0..joints)
                    .map(|j| {
                        let mean = nb.iter().map(|&u| dense[u][j]).sum::<f64>() / nb.len().max(1) as f64;
                        0.5 * dense[v][j] + 0.5 * mean
                    })
                    .collect()
            })
            .collect();
    }
    dense
        .into_iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..joints).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let top: Vec<(usize, f64)> = idx[..3]
                .iter()
                .map(|&j| (j, row[j]))
                .filter(|&(_, w)| w >= 1e-3 * row[idx[0]])
                .collect();
            let sum: f64 = top.iter().map(|&(_, w)| w).sum();
            let mut out: Vec<(usize, f64)> = top.into_iter().map(|(j, w)| (j, w / sum)).collect();
            out.sort_by_key(|&(j, _)| j);
            out
        })
        .collect()
}

/// Builds the default humanoid with about `vertices` vertices.
pub fn humanoid(vertices: usize) -> Result<(BodyModel, PriorConfig), TemplateError> {
    let rest = rest_joints();
    let limbs = limbs(&rest);
    let raw = polygonize(
        |p| body_sdf(&limbs, p),
        Point3::new(-0.75, -0.2, -0.05),
        Point3::new(0.75, 0.3, 1.85),
        GRID_SPACING,
    )?;
    let clean = repair(&raw)?;
    let genus = clean.genus();
    if genus != 0 {
        return Err(TemplateError::Genus(genus));
    }
    let (mesh, _) = qslim_decimate(&clean, 3 * vertices - 6)?;
    let weights = blend_weights(&mesh, &limbs, rest.len());
    let joints = rest
        .iter()
        .enumerate()
        .map(|(k, &p)| Joint {
            name: JOINT_NAMES[k].to_string(),
            parent: PARENTS[k],
            rest: p,
        })
        .collect();
    let tree = KinematicTree::new(joints, weights)?;
    let (lo, hi): (Vec<_>, Vec<_>) = joint_ranges()
        .into_iter()
        .map(|(a, b)| (Vector3::from(a), Vector3::from(b)))
        .unzip();
    Ok((BodyModel::new(tree, mesh)?, PriorConfig::from_ranges(lo, hi)))
}

/// The default template, built once per process.
pub fn default_body() -> &'static (BodyModel, PriorConfig) {
    static BODY: OnceLock<(BodyModel, PriorConfig)> = OnceLock::new();
    BODY.get_or_init(|| humanoid(DEFAULT_VERTICES).expect("default humanoid builds"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Manifold;

    #[test]
    fn default_template_is_a_closed_sphere() {
        let (model, prior) = default_body();
        let m = &model.template;
        assert_eq!(m.validate_manifold().unwrap(), Manifold::Closed);
        assert_eq!(m.genus(), 0);
        assert_eq!(m.vertex_count(), DEFAULT_VERTICES);
        assert!(prior.is_consistent());
        let height = m.vertices().iter().map(|p| p.z).fold(f64::MIN, f64::max)
            - m.vertices().iter().map(|p| p.z).fold(f64::MAX, f64::min);
        assert!((1.6..1.9).contains(&height), "height {height}");
        // Mostly rigid segments with blending near joints.
        let single = model.tree.weights.iter().filter(|r| r.iter().any(|&(_, w)| w > 0.9)).count();
        assert!(single * 3 > m.vertex_count(), "{single} rigid of {}", m.vertex_count());
    }

    #[test]
    fn left_side_is_positive_x() {
        let (model, _) = default_body();
        let tree = &model.tree;
        let hand = tree.joint_index("l_wrist").unwrap();
        assert!(tree.joints[hand].rest.x > 0.4);
        for (v, p) in model.template.vertices().iter().enumerate() {
            if tree.segments[v] == hand {
                assert!(p.x > 0.3);
            }
        }
    }
}
