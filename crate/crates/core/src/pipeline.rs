//! Glue between modules: scan preparation (cleanup, decimation, hierarchy,
//! features, projected ground truth) and correspondence metrics.

use nalgebra::Point3;
use rayon::prelude::*;
use thiserror::Error;

use crate::body::{forward, BodyModel};
use crate::conv_net::{build_patch_table, orient_levels, ConvError, MeshLevels, Sample, UMeshModel};
use crate::decimate::{build_pooling_map, qslim_decimate, DecimateError};
use crate::embedding::{CorrespondenceField, FieldSource, Sampling, TemplateEmbedding, TemplatePoint};
use crate::mesh::{edge_features, repair, EdgeFeatureMatrix, FeatureError, Manifold, Mesh, MeshError, TriangleBvh};
use crate::surface_field::{signal_function, GeodesicError, SignalKind};
use crate::synth::SynthScan;

/// Edge-count ratio between consecutive levels.
pub const LEVEL_RATIO: usize = 4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Decimate(#[from] DecimateError),
    #[error(transparent)]
    Geodesic(#[from] GeodesicError),
    #[error(transparent)]
    Conv(#[from] ConvError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("{0}")]
    Input(String),
}

/// Largest reachable edge count not above `want`: closed meshes lose
/// exactly 3 edges per collapse.
pub fn reachable_target(mesh: &Mesh, want: usize) -> usize {
    let e = mesh.edge_count();
    if want >= e {
        return e;
    }
    match mesh.validate_manifold() {
        Ok(Manifold::Closed) => want - (e - want) % 3,
        _ => want,
    }
}

/// Decimates toward `want` edges, stepping the target down when the exact
/// count cannot be met.
pub fn decimate_to(mesh: &Mesh, want: usize) -> Result<(Mesh, crate::decimate::CollapseTrace), DecimateError> {
    let mut target = reachable_target(mesh, want);
    let mut last = None;
    for _ in 0..3 {
        match qslim_decimate(mesh, target) {
            Ok(out) => return Ok(out),
            Err(e @ DecimateError::Parity { .. }) | Err(e @ DecimateError::Floor { .. }) => {
                last = Some(e);
                target = target.saturating_sub(1);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Repairs and decimates to `m0` edges; meshes already at or below `m0`
/// are only repaired.
pub fn preprocess_scan(mesh: &Mesh, m0: usize) -> Result<Mesh, PipelineError> {
    let clean = repair(mesh)?;
    if clean.edge_count() <= m0 {
        return Ok(clean);
    }
    let (out, _) = decimate_to(&clean, m0)?;
    out.validate_manifold()?;
    Ok(out)
}

/// Level meshes (finest first), patch tables and pooling maps.
pub fn build_levels(mesh: &Mesh, levels: usize, kind: SignalKind) -> Result<(MeshLevels, Vec<Mesh>), PipelineError> {
    if levels == 0 {
        return Err(PipelineError::Input("at least one level is required".into()));
    }
    let mut meshes = vec![mesh.clone()];
    let mut pools = Vec::new();
    for _ in 1..levels {
        let fine = meshes.last().expect("nonempty");
        let (coarse, trace) = decimate_to(fine, fine.edge_count() / LEVEL_RATIO)?;
        pools.push(build_pooling_map(&trace));
        meshes.push(coarse);
    }
    let patches = meshes
        .iter()
        .map(|m| {
            let signal = signal_function(m, kind)?;
            Ok(build_patch_table(m, &signal)?)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok((MeshLevels { patches, pools }, meshes))
}

/// Edge features with midpoints relative to the area-weighted centroid.
pub fn centered_features(mesh: &Mesh) -> Result<EdgeFeatureMatrix, PipelineError> {
    let mut f = edge_features(mesh)?;
    let c = mesh.area_weighted_centroid();
    for r in 0..f.rows {
        let row = f.row_mut(r);
        row[0] -= c.x;
        row[1] -= c.y;
        row[2] -= c.z;
    }
    Ok(f)
}

#[derive(Debug, Clone)]
pub struct PreparedScan {
    pub mesh: Mesh,
    pub levels: MeshLevels,
    pub input: EdgeFeatureMatrix,
}

pub fn prepare_mesh(mesh: &Mesh, m0: usize, levels: usize, kind: SignalKind) -> Result<PreparedScan, PipelineError> {
    let mesh = preprocess_scan(mesh, m0)?;
    let (lv, _) = build_levels(&mesh, levels, kind)?;
    let input = centered_features(&mesh)?;
    Ok(PreparedScan {
        mesh,
        levels: lv,
        input,
    })
}

/// Ground-truth template location of each vertex of a prepared scan: three
/// template vertices and barycentric weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthPoints {
    pub vertices: Vec<[usize; 3]>,
    pub weights: Vec<[f64; 3]>,
}

impl TruthPoints {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Locations evaluated on any vertex positions of the template.
    pub fn on(&self, positions: &[Point3<f64>]) -> Vec<Point3<f64>> {
        self.vertices
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| Point3::from((0..3).fold(nalgebra::Vector3::zeros(), |acc, c| acc + positions[v[c]].coords * w[c])))
            .collect()
    }

    /// Embedding coordinates interpolated at each location.
    pub fn field(&self, emb: &TemplateEmbedding) -> CorrespondenceField {
        let d = emb.dim;
        let mut values = Vec::with_capacity(self.len() * d);
        for (v, w) in self.vertices.iter().zip(&self.weights) {
            for k in 0..d {
                values.push((0..3).map(|c| w[c] * emb.omega(v[c])[k]).sum());
            }
        }
        CorrespondenceField {
            values,
            dim: d,
            sampling: Sampling::Vertex,
            source: FieldSource::GroundTruth,
        }
    }

    /// CSV rows `v0,v1,v2,w0,w1,w2` with a header.
    pub fn write_csv(&self, w: impl std::io::Write) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["v0", "v1", "v2", "w0", "w1", "w2"])?;
        for (v, wt) in self.vertices.iter().zip(&self.weights) {
            out.serialize((v[0], v[1], v[2], wt[0], wt[1], wt[2]))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl std::io::Read) -> Result<Self, csv::Error> {
        let mut rd = csv::Reader::from_reader(r);
        let mut vertices = Vec::new();
        let mut weights = Vec::new();
        for row in rd.deserialize() {
            let (a, b, c, x, y, z): (usize, usize, usize, f64, f64, f64) = row?;
            vertices.push([a, b, c]);
            weights.push([x, y, z]);
        }
        Ok(TruthPoints { vertices, weights })
    }
}

/// Projects each vertex of `mesh` onto the synthetic scan it was derived
/// from and reads off the template location there.
pub fn project_truth(mesh: &Mesh, scan: &SynthScan) -> Result<TruthPoints, PipelineError> {
    let bvh = TriangleBvh::new(&scan.mesh);
    let hits: Vec<_> = mesh
        .vertices()
        .par_iter()
        .map(|p| bvh.closest_point(p))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| PipelineError::Input("scan has no faces".into()))?;
    let faces = scan.mesh.faces();
    Ok(TruthPoints {
        vertices: hits.iter().map(|h| faces[h.face].map(|v| scan.source[v])).collect(),
        weights: hits.iter().map(|h| h.bary).collect(),
    })
}

/// A synthetic scan turned into a training sample, plus what evaluation
/// needs about it.
#[derive(Debug, Clone)]
pub struct PreparedSynth {
    pub prepared: PreparedScan,
    pub truth: TruthPoints,
    /// Ground-truth posed template (full body).
    pub posed: Vec<Point3<f64>>,
}

impl PreparedSynth {
    pub fn sample(&self, emb: &TemplateEmbedding) -> Sample {
        Sample {
            levels: self.prepared.levels.clone(),
            input: self.prepared.input.clone(),
            truth: self.truth.field(emb).vertex_to_edge(&self.prepared.mesh),
        }
    }
}

pub fn prepare_synth(
    scan: &SynthScan,
    model: &BodyModel,
    m0: usize,
    levels: usize,
    kind: SignalKind,
) -> Result<PreparedSynth, PipelineError> {
    let prepared = prepare_mesh(&scan.mesh, m0, levels, kind)?;
    let truth = project_truth(&prepared.mesh, scan)?;
    Ok(PreparedSynth {
        prepared,
        truth,
        posed: forward(model, &scan.params).vertices,
    })
}

/// Network prediction for a prepared scan; random-orientation levels use a
/// fixed rotation draw from `seed`.
pub fn predict_field(model: &UMeshModel, scan: &PreparedScan, seed: u64) -> Result<CorrespondenceField, PipelineError> {
    let levels = orient_levels(&scan.levels, seed);
    Ok(model.predict(&levels, &scan.input)?)
}

/// Mean distance (cm), measured on the posed body, between each vertex's
/// estimated template location and its true one.
pub fn correspondence_error(
    estimate: &[TemplatePoint],
    truth: &TruthPoints,
    template: &Mesh,
    posed: &[Point3<f64>],
) -> f64 {
    let body = template.with_positions(posed.to_vec());
    let want = truth.on(posed);
    let total: f64 = estimate
        .iter()
        .zip(&want)
        .map(|(t, w)| 100.0 * (t.position(&body) - w).norm())
        .sum();
    total / estimate.len().max(1) as f64
}

/// Where the true template location of each vertex of scan A lies on scan
/// B's posed body; the target for transfer errors from A to B.
pub fn transfer_truth(truth_a: &TruthPoints, posed_b: &[Point3<f64>]) -> Vec<Point3<f64>> {
    truth_a.on(posed_b)
}
