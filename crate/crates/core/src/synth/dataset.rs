//! Dataset generation: stratified poses, one derived seed per scan, files
//! plus a CSV manifest.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, generate_scan_with, SynthError, SynthScan, SynthSpec};
use crate::body::{BodyModel, BodyParams, PriorConfig};
use crate::embedding::{read_table, write_table, CorrespondenceField, FieldSource, Sampling, TemplateEmbedding};
use crate::mesh::{read_mesh, write_mesh, MeshFormat};

pub const MANIFEST_HEADER: [&str; 8] = ["id", "seed", "mesh", "labels", "source", "params", "amputated", "genus"];

/// One accepted scan. Paths are relative to the dataset directory;
/// `amputated` is a `;`-separated list of joint names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: usize,
    pub seed: u64,
    pub mesh: String,
    pub labels: String,
    /// Per scan vertex, the template vertex it came from.
    pub source: String,
    pub params: String,
    pub amputated: String,
    pub genus: i64,
}

/// Latin hypercube over the unit cube: `count` points in `dims` dimensions.
fn stratified(count: usize, dims: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; dims]; count];
    let mut perm: Vec<usize> = (0..count).collect();
    for d in 0..dims {
        perm.shuffle(rng);
        for (i, p) in points.iter_mut().enumerate() {
            p[d] = (perm[i] as f64 + rng.gen::<f64>()) / count as f64;
        }
    }
    points
}

fn write_scan(dir: &Path, id: usize, scan: &SynthScan) -> Result<ManifestRow, SynthError> {
    let stem = format!("scan_{id:05}");
    let mesh = format!("{stem}.ply");
    let labels = format!("{stem}.omega");
    let source = format!("{stem}.source.csv");
    let params = format!("{stem}.params.toml");
    std::fs::write(dir.join(&mesh), write_mesh(&scan.mesh, MeshFormat::PlyBinaryLittleEndian))?;
    let mut buf = Vec::new();
    write_table(&mut buf, &scan.labels.values, scan.labels.dim, 0.0)?;
    std::fs::write(dir.join(&labels), buf)?;
    std::fs::write(dir.join(&params), scan.params.to_toml())?;
    let mut w = csv::Writer::from_path(dir.join(&source))?;
    w.write_record(["template_vertex"])?;
    for v in &scan.source {
        w.write_record([v.to_string()])?;
    }
    w.flush()?;
    Ok(ManifestRow {
        id,
        seed: scan.seed,
        mesh,
        labels,
        source,
        params,
        amputated: scan.amputated.join(";"),
        genus: scan.mesh.genus(),
    })
}

/// Generates `count` scans into `dir` and writes `dir/manifest.csv`.
/// Returns the manifest rows and the rejected `(id, error)` pairs.
pub fn generate_dataset(
    spec: &SynthSpec,
    count: usize,
    model: &BodyModel,
    prior: &PriorConfig,
    emb: &TemplateEmbedding,
    dir: &Path,
) -> Result<(Vec<ManifestRow>, Vec<(usize, SynthError)>), SynthError> {
    spec.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let poses = stratified(count, 3 * model.tree.joint_count(), &mut rng);
    let results: Vec<Result<ManifestRow, SynthError>> = poses
        .par_iter()
        .enumerate()
        .map(|(id, u)| {
            let seed = derive_seed(spec.seed, id as u64);
            let scan = generate_scan_with(spec, model, prior, emb, seed, Some(u))?;
            write_scan(dir, id, &scan)
        })
        .collect();
    let mut rows = Vec::new();
    let mut rejected = Vec::new();
    for (id, r) in results.into_iter().enumerate() {
        match r {
            Ok(row) => rows.push(row),
            Err(e @ SynthError::Retries { .. }) => rejected.push((id, e)),
            Err(e) => return Err(e),
        }
    }
    let mut w = csv::Writer::from_path(dir.join("manifest.csv"))?;
    if rows.is_empty() {
        w.write_record(MANIFEST_HEADER)?;
    }
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok((rows, rejected))
}

pub fn read_manifest(r: impl Read) -> Result<Vec<ManifestRow>, SynthError> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<Result<_, _>>()?)
}

/// Reads the scan a manifest row describes back from `dir`.
pub fn load_scan(dir: &Path, row: &ManifestRow) -> Result<SynthScan, SynthError> {
    let bad = |file: &str, message: String| SynthError::Dataset {
        path: dir.join(file).display().to_string(),
        message,
    };
    let mesh = read_mesh(&dir.join(&row.mesh)).map_err(|e| bad(&row.mesh, e.to_string()))?;
    let bytes = std::fs::read(dir.join(&row.labels))?;
    let (values, dim, _) = read_table(&mut bytes.as_slice()).map_err(|e| bad(&row.labels, e.to_string()))?;
    let mut rd = csv::Reader::from_path(dir.join(&row.source))?;
    let source: Vec<usize> = rd.deserialize().collect::<Result<_, _>>()?;
    let text = std::fs::read_to_string(dir.join(&row.params))?;
    let params = BodyParams::from_toml(&text).map_err(|e| bad(&row.params, e.to_string()))?;
    let n = mesh.vertex_count();
    if source.len() != n || values.len() != n * dim {
        return Err(bad(&row.mesh, format!("{n} vertices, {} sources, {} label rows", source.len(), values.len() / dim)));
    }
    Ok(SynthScan {
        welds: 0,
        labels: CorrespondenceField {
            values,
            dim,
            sampling: Sampling::Vertex,
            source: FieldSource::GroundTruth,
        },
        mesh,
        source,
        params,
        amputated: row.amputated.split(';').filter(|s| !s.is_empty()).map(str::to_string).collect(),
        seed: row.seed,
    })
}
