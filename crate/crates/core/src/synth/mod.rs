//! Synthetic training scans: posed bodies with ground-truth coordinates,
//! contact welding, extremity amputation and limited-view occlusion.

mod dataset;
mod weld;

pub use dataset::{generate_dataset, load_scan, read_manifest, ManifestRow, MANIFEST_HEADER};
pub use weld::{weld_contacts, WeldResult};

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::{forward, BodyModel, BodyParams, PriorConfig, SCALE_RANGE};
use crate::embedding::{CorrespondenceField, FieldSource, Sampling, TemplateEmbedding};
use crate::mesh::{repair_tracked, Mesh, MeshError, TriangleBvh};
use crate::surface_field::SteinerGraph;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("scan with seed {seed} rejected after {attempts} attempts: {last}")]
    Retries { seed: u64, attempts: usize, last: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("dataset file {path}: {message}")]
    Dataset { path: String, message: String },
}

/// Where the pose sampler's ranges are centered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseCenter {
    /// Midrange pose prior.
    Prior,
    /// All-zero rotations.
    Rest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub pose_center: PoseCenter,
    /// Half-width of each joint's sampling range as a fraction of its prior
    /// half-range; the range is clipped to the prior bounds.
    pub pose_spread: f64,
    /// Standard deviation of the log scale factors.
    pub shape_sigma: f64,
    pub amputation_probability: f64,
    /// Geodesic radius range (m) removed around an amputated extremity.
    pub amputation_radius: [f64; 2],
    pub weld: bool,
    /// Contact distance (m) below which surfaces are fused.
    pub weld_distance: f64,
    /// Number of scanner viewpoints; 0 disables occlusion.
    pub viewpoints: usize,
    pub viewpoint_radius: f64,
    pub max_retries: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            pose_center: PoseCenter::Prior,
            pose_spread: 0.35,
            shape_sigma: 0.08,
            amputation_probability: 0.1,
            amputation_radius: [0.05, 0.2],
            weld: true,
            weld_distance: 0.005,
            viewpoints: 8,
            viewpoint_radius: 3.0,
            max_retries: 10,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(m.to_string()));
        if !(0.0..=1.0).contains(&self.amputation_probability) {
            return bad("amputation_probability outside [0, 1]");
        }
        if !(self.weld_distance > 0.0) {
            return bad("weld_distance must be positive");
        }
        if !(self.pose_spread >= 0.0) || !(self.shape_sigma >= 0.0) {
            return bad("negative spread");
        }
        let [r0, r1] = self.amputation_radius;
        if !(r0 > 0.0 && r0 <= r1) {
            return bad("amputation_radius must satisfy 0 < min <= max");
        }
        if self.max_retries == 0 {
            return bad("max_retries must be at least 1");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| SynthError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }
}

/// A generated scan. `source` gives, per scan vertex, the template vertex it
/// came from; `labels` are the embedding coordinates of those vertices.
#[derive(Debug, Clone)]
pub struct SynthScan {
    pub mesh: Mesh,
    pub labels: CorrespondenceField,
    pub source: Vec<usize>,
    pub params: BodyParams,
    /// Amputated extremities (joint names).
    pub amputated: Vec<String>,
    pub welds: usize,
    pub seed: u64,
}

/// Mixes a base seed with an index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sampling interval of one pose component.
fn pose_interval(spec: &SynthSpec, prior: &PriorConfig, k: usize, a: usize) -> (f64, f64) {
    let (lo, hi) = (prior.theta_min[k][a], prior.theta_max[k][a]);
    let center = match spec.pose_center {
        PoseCenter::Prior => prior.theta_star[k][a],
        PoseCenter::Rest => 0.0,
    };
    let half = 0.5 * (hi - lo) * spec.pose_spread;
    ((center - half).max(lo.min(center)), (center + half).min(hi.max(center)))
}

/// Pose from unit-interval coordinates (one per pose component).
pub fn pose_from_unit(spec: &SynthSpec, prior: &PriorConfig, u: &[f64]) -> Vec<Vector3<f64>> {
    (0..prior.theta_star.len())
        .map(|k| {
            Vector3::from_fn(|a, _| {
                let (lo, hi) = pose_interval(spec, prior, k, a);
                lo + (hi - lo) * u[3 * k + a]
            })
        })
        .collect()
}

fn sample_shape(spec: &SynthSpec, joints: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let normal = Normal::new(0.0, spec.shape_sigma.max(0.0)).expect("finite sigma");
    (0..joints)
        .map(|_| {
            Vector3::from_fn(|_, _| {
                let s = if spec.shape_sigma > 0.0 { normal.sample(rng).exp() } else { 1.0 };
                s.clamp(SCALE_RANGE.0 * 1.01, SCALE_RANGE.1 * 0.99)
            })
        })
        .collect()
}

/// Leaf joints and, for each, the vertex of its segment farthest from the
/// joint in the rest pose (lowest index on ties).
pub fn extremity_seeds(model: &BodyModel) -> Vec<(usize, usize)> {
    let tree = &model.tree;
    let nj = tree.joint_count();
    let mut has_child = vec![false; nj];
    for j in &tree.joints {
        if let Some(p) = j.parent {
            has_child[p] = true;
        }
    }
    (0..nj)
        .filter(|&k| !has_child[k])
        .filter_map(|k| {
            let joint = tree.joints[k].rest;
            let mut best: Option<(f64, usize)> = None;
            for (v, p) in model.template.vertices().iter().enumerate() {
                if tree.segments[v] != k {
                    continue;
                }
                let d = (p - joint).norm();
                if best.is_none_or(|(bd, _)| d > bd) {
                    best = Some((d, v));
                }
            }
            best.map(|(_, v)| (k, v))
        })
        .collect()
}

/// Scanner positions on a ring around `center`, alternating elevation.
fn viewpoints(center: Point3<f64>, radius: f64, count: usize) -> Vec<Point3<f64>> {
    (0..count)
        .map(|i| {
            let az = std::f64::consts::TAU * i as f64 / count as f64;
            let el: f64 = if i % 2 == 0 { 0.35 } else { -0.15 };
            center + Vector3::new(az.cos() * el.cos(), az.sin() * el.cos(), el.sin()) * radius
        })
        .collect()
}

/// Faces whose centroid is directly visible from at least one viewpoint.
pub fn visible_faces(mesh: &Mesh, views: &[Point3<f64>]) -> Vec<bool> {
    let bvh = TriangleBvh::new(mesh);
    let eps = 1e-9;
    (0..mesh.face_count())
        .map(|f| {
            let c = mesh.face_centroid(f);
            views.iter().any(|o| {
                let d = c - o;
                let dist = d.norm();
                let dir = d / dist;
                match bvh.ray_hit(o, &dir, eps, dist * (1.0 + 1e-6) + 1e-9) {
                    Some((hit, _)) => hit == f,
                    None => true,
                }
            })
        })
        .collect()
}

/// Keeps the faces flagged in `keep`, repairs, and carries `source` along.
fn keep_faces(mesh: &Mesh, source: &[usize], keep: &[bool]) -> Result<(Mesh, Vec<usize>), MeshError> {
    let ids: Vec<usize> = (0..mesh.face_count()).filter(|&f| keep[f]).collect();
    let (sub, map1) = mesh.subset_faces(&ids)?;
    let (clean, map2) = repair_tracked(&sub)?;
    let mut new_source = vec![0; clean.vertex_count()];
    for (old, m) in map1.iter().enumerate() {
        if let Some(mid) = m {
            if let Some(new) = map2[*mid] {
                new_source[new] = source[old];
            }
        }
    }
    Ok((clean, new_source))
}

fn attempt(
    spec: &SynthSpec,
    model: &BodyModel,
    emb: &TemplateEmbedding,
    pose: Vec<Vector3<f64>>,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<SynthScan, String> {
    let nj = model.tree.joint_count();
    let params = BodyParams {
        pose,
        translation: Vector3::zeros(),
        scale: sample_shape(spec, nj, rng),
    };
    params.validate().map_err(|e| e.to_string())?;
    let posed = model.template.with_positions(forward(model, &params).vertices);
    let mut mesh = posed;
    let mut source: Vec<usize> = (0..mesh.vertex_count()).collect();
    let mut welds = 0;
    if spec.weld {
        let w = weld_contacts(&mesh, &source, &model.template, &model.tree.segments, spec.weld_distance)
            .map_err(|e| e.to_string())?;
        mesh = w.mesh;
        source = w.source;
        welds = w.welds;
    }
    let mut amputated = Vec::new();
    let mut seeds = extremity_seeds(model);
    seeds.sort_unstable();
    for (joint, seed_vertex) in seeds {
        if !(rng.gen::<f64>() < spec.amputation_probability) {
            continue;
        }
        let radius = rng.gen_range(spec.amputation_radius[0]..=spec.amputation_radius[1]);
        let Some(start) = source.iter().position(|&s| s == seed_vertex) else {
            continue;
        };
        let graph = SteinerGraph::new(&mesh);
        let dist = graph.vertex_distances(start);
        let keep: Vec<bool> = mesh
            .faces()
            .iter()
            .map(|f| f.iter().all(|&v| dist[v] > radius))
            .collect();
        let (m, s) = keep_faces(&mesh, &source, &keep).map_err(|e| e.to_string())?;
        mesh = m;
        source = s;
        amputated.push(model.tree.joints[joint].name.clone());
    }
    if spec.viewpoints > 0 {
        let center = mesh.area_weighted_centroid();
        let views = viewpoints(center, spec.viewpoint_radius, spec.viewpoints);
        let keep = visible_faces(&mesh, &views);
        let (m, s) = keep_faces(&mesh, &source, &keep).map_err(|e| e.to_string())?;
        mesh = m;
        source = s;
    }
    mesh.validate_manifold().map_err(|e| e.to_string())?;
    if mesh.face_count() < model.template.face_count() / 4 {
        return Err(format!("only {} faces left", mesh.face_count()));
    }
    let mut values = Vec::with_capacity(source.len() * emb.dim);
    for &s in &source {
        values.extend_from_slice(emb.omega(s));
    }
    Ok(SynthScan {
        labels: CorrespondenceField {
            values,
            dim: emb.dim,
            sampling: Sampling::Vertex,
            source: FieldSource::GroundTruth,
        },
        mesh,
        source,
        params,
        amputated,
        welds,
        seed,
    })
}

/// Generates one scan. The first attempt uses `unit_pose` (stratified
/// coordinates) when given; retries sample fresh uniform poses.
pub fn generate_scan_with(
    spec: &SynthSpec,
    model: &BodyModel,
    prior: &PriorConfig,
    emb: &TemplateEmbedding,
    seed: u64,
    unit_pose: Option<&[f64]>,
) -> Result<SynthScan, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = 3 * model.tree.joint_count();
    let mut last = String::new();
    for attempt_no in 0..spec.max_retries {
        let u: Vec<f64> = match unit_pose {
            Some(u) if attempt_no == 0 => u.to_vec(),
            _ => (0..dims).map(|_| rng.gen::<f64>()).collect(),
        };
        let pose = pose_from_unit(spec, prior, &u);
        match attempt(spec, model, emb, pose, &mut rng, seed) {
            Ok(scan) => return Ok(scan),
            Err(e) => last = e,
        }
    }
    Err(SynthError::Retries {
        seed,
        attempts: spec.max_retries,
        last,
    })
}

pub fn generate_scan(
    spec: &SynthSpec,
    model: &BodyModel,
    prior: &PriorConfig,
    emb: &TemplateEmbedding,
) -> Result<SynthScan, SynthError> {
    generate_scan_with(spec, model, prior, emb, spec.seed, None)
}
