//! Euclidean embedding of template geodesics by multidimensional scaling,
//! and the correspondence fields expressed in that space.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, Point3, SymmetricEigen};
use thiserror::Error;

use crate::mesh::Mesh;
use crate::surface_field::all_pairs_distances;

pub const DEFAULT_DIM: usize = 4;
pub const SMACOF_ITERATIONS: usize = 300;
pub const SMACOF_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("only {usable} positive eigenvalues, cannot embed in {requested} dimensions")]
    Rank { usable: usize, requested: usize },
    #[error("distance matrix has non-finite entries (disconnected template?)")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("malformed embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MdsMethod {
    Classical,
    /// Classical initialization refined by stress majorization.
    Smacof,
}

/// Result of classical MDS on a distance matrix.
#[derive(Debug, Clone)]
pub struct Mds {
    /// Row-major `n x d` coordinates.
    pub coords: Vec<f64>,
    pub dim: usize,
    /// All eigenvalues of the double-centered matrix, descending.
    pub eigenvalues: Vec<f64>,
}

impl Mds {
    /// Fraction of positive spectrum mass outside the top `d` eigenvalues.
    pub fn strain(&self, d: usize) -> f64 {
        strain_of(&self.eigenvalues, d)
    }
}

fn positive_floor(eigenvalues: &[f64]) -> f64 {
    eigenvalues.first().copied().unwrap_or(0.0).max(0.0) * 1e-12
}

fn strain_of(eigenvalues: &[f64], d: usize) -> f64 {
    let floor = positive_floor(eigenvalues);
    let positive: Vec<f64> = eigenvalues.iter().copied().filter(|&l| l > floor).collect();
    let total: f64 = positive.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let top: f64 = positive.iter().take(d).sum();
    (1.0 - top / total).max(0.0)
}

/// Double-centered Gram matrix `-1/2 J D² J` of a row-major distance matrix.
fn gram(dist: &[f64], n: usize) -> DMatrix<f64> {
    let sq = DMatrix::from_fn(n, n, |i, j| dist[i * n + j] * dist[i * n + j]);
    let row_mean: Vec<f64> = (0..n).map(|i| sq.row(i).sum() / n as f64).collect();
    let col_mean: Vec<f64> = (0..n).map(|j| sq.column(j).sum() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    DMatrix::from_fn(n, n, |i, j| -0.5 * (sq[(i, j)] - row_mean[i] - col_mean[j] + grand))
}

/// Classical MDS. Each eigenvector is signed so its largest-magnitude
/// component (lowest index on ties) is positive.
pub fn classical_mds(dist: &[f64], n: usize, d: usize) -> Result<Mds, EmbeddingError> {
    if dist.len() != n * n {
        return Err(EmbeddingError::Shape(format!("{} entries for n = {n}", dist.len())));
    }
    if dist.iter().any(|x| !x.is_finite()) {
        return Err(EmbeddingError::NonFinite);
    }
    let eig = SymmetricEigen::new(gram(dist, n));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let floor = positive_floor(&eigenvalues);
    let usable = eigenvalues.iter().filter(|&&l| l > floor).count();
    if usable < d {
        return Err(EmbeddingError::Rank {
            usable,
            requested: d,
        });
    }
    let mut coords = vec![0.0; n * d];
    for (k, &col) in order.iter().take(d).enumerate() {
        let v = eig.eigenvectors.column(col);
        let mut lead = 0;
        for i in 1..n {
            if v[i].abs() > v[lead].abs() {
                lead = i;
            }
        }
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        let scale = sign * eigenvalues[k].sqrt();
        for i in 0..n {
            coords[i * d + k] = v[i] * scale;
        }
    }
    Ok(Mds {
        coords,
        dim: d,
        eigenvalues,
    })
}

/// Raw stress `sum_{i<j} (|x_i - x_j| - d_ij)^2`.
pub fn stress(dist: &[f64], coords: &[f64], n: usize, d: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let r = euclid(&coords[i * d..(i + 1) * d], &coords[j * d..(j + 1) * d]) - dist[i * n + j];
            s += r * r;
        }
    }
    s
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Stress majorization (Guttman transform, unit weights) from `init`.
/// Stops after `iterations` or when the relative stress decrease falls
/// below `tolerance`.
pub fn smacof(dist: &[f64], n: usize, d: usize, init: &[f64], iterations: usize, tolerance: f64) -> Vec<f64> {
    let mut x = init.to_vec();
    let mut prev = stress(dist, &x, n, d);
    let mut next = vec![0.0; n * d];
    for _ in 0..iterations {
        next.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let xi = &x[i * d..(i + 1) * d];
            let mut diag = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let xj = &x[j * d..(j + 1) * d];
                let dij = euclid(xi, xj);
                let b = if dij > 0.0 { -dist[i * n + j] / dij } else { 0.0 };
                diag -= b;
                for k in 0..d {
                    next[i * d + k] += b * xj[k];
                }
            }
            for k in 0..d {
                next[i * d + k] += diag * xi[k];
            }
        }
        for v in &mut next {
            *v /= n as f64;
        }
        std::mem::swap(&mut x, &mut next);
        let s = stress(dist, &x, n, d);
        if prev - s <= tolerance * prev.max(f64::MIN_POSITIVE) {
            break;
        }
        prev = s;
    }
    x
}

/// Template surface with per-vertex coordinates in the embedding space.
#[derive(Debug, Clone)]
pub struct TemplateEmbedding {
    pub template: Mesh,
    /// Row-major `n x dim`.
    pub coords: Vec<f64>,
    pub dim: usize,
    pub strain: f64,
}

impl TemplateEmbedding {
    pub fn vertex_count(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn omega(&self, v: usize) -> &[f64] {
        &self.coords[v * self.dim..(v + 1) * self.dim]
    }

    /// Closest embedded template vertex to `q`, lowest index on ties.
    pub fn nn_query(&self, q: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for v in 0..self.vertex_count() {
            let d: f64 = self.omega(v).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, v);
            }
        }
        best.1
    }

    /// Median relative error `| |w_i - w_j| - g_ij | / g_ij` over every
    /// `stride`-th off-diagonal pair of the distance matrix.
    pub fn distortion_median(&self, dist: &[f64], stride: usize) -> f64 {
        let n = self.vertex_count();
        let mut rel = Vec::new();
        let mut k = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                k += 1;
                if k % stride.max(1) != 0 || dist[i * n + j] <= 0.0 {
                    continue;
                }
                let e = euclid(self.omega(i), self.omega(j));
                rel.push((e - dist[i * n + j]).abs() / dist[i * n + j]);
            }
        }
        rel.sort_by(f64::total_cmp);
        rel.get(rel.len() / 2).copied().unwrap_or(0.0)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_table(w, &self.coords, self.dim, self.strain)
    }

    /// Reads an embedding file paired with its template mesh.
    pub fn read_from(template: Mesh, r: &mut impl Read) -> Result<Self, EmbeddingError> {
        let (coords, dim, strain) = read_table(r)?;
        if coords.len() / dim != template.vertex_count() {
            return Err(EmbeddingError::Shape(format!(
                "{} rows for a template with {} vertices",
                coords.len() / dim,
                template.vertex_count()
            )));
        }
        Ok(TemplateEmbedding {
            template,
            coords,
            dim,
            strain,
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<(), EmbeddingError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_file(template: Mesh, path: &Path) -> Result<Self, EmbeddingError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(template, &mut bytes.as_slice())
    }
}

/// Binary table: `u32 rows, u32 dim, f64 scalar`, then row-major f32 values.
pub fn write_table(w: &mut impl Write, values: &[f64], dim: usize, scalar: f64) -> std::io::Result<()> {
    w.write_all(&((values.len() / dim) as u32).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&scalar.to_le_bytes())?;
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_table(r: &mut impl Read) -> Result<(Vec<f64>, usize, f64), EmbeddingError> {
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let rows = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let dim = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b8)?;
    let scalar = f64::from_le_bytes(b8);
    if dim == 0 {
        return Err(EmbeddingError::Format("zero dimension".into()));
    }
    let mut values = Vec::with_capacity(rows * dim);
    for _ in 0..rows * dim {
        r.read_exact(&mut b4)?;
        let v = f32::from_le_bytes(b4) as f64;
        if !v.is_finite() {
            return Err(EmbeddingError::Format("non-finite value".into()));
        }
        values.push(v);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(EmbeddingError::Format("trailing bytes".into()));
    }
    Ok((values, dim, scalar))
}

/// Embeds the template's geodesic distance matrix in `d` dimensions.
pub fn build_embedding(template: &Mesh, d: usize) -> Result<TemplateEmbedding, EmbeddingError> {
    build_embedding_with(template, d, MdsMethod::Classical)
}

pub fn build_embedding_with(template: &Mesh, d: usize, method: MdsMethod) -> Result<TemplateEmbedding, EmbeddingError> {
    embedding_from_distances(template, &all_pairs_distances(template), d, method)
}

/// As [`build_embedding_with`], from an already computed distance matrix.
pub fn embedding_from_distances(
    template: &Mesh,
    dist: &[f64],
    d: usize,
    method: MdsMethod,
) -> Result<TemplateEmbedding, EmbeddingError> {
    let n = template.vertex_count();
    if dist.len() != n * n {
        return Err(EmbeddingError::Shape(format!("{} distances for {n} vertices", dist.len())));
    }
    let mds = classical_mds(dist, n, d)?;
    let coords = match method {
        MdsMethod::Classical => mds.coords.clone(),
        MdsMethod::Smacof => smacof(dist, n, d, &mds.coords, SMACOF_ITERATIONS, SMACOF_TOLERANCE),
    };
    Ok(TemplateEmbedding {
        template: template.clone(),
        coords,
        dim: d,
        strain: mds.strain(d),
    })
}

/// Strain for each dimension in `dims`, from one eigendecomposition.
pub fn strain_curve(dist: &[f64], n: usize, dims: &[usize]) -> Result<Vec<(usize, f64)>, EmbeddingError> {
    let mds = classical_mds(dist, n, 1)?;
    Ok(dims.iter().map(|&d| (d, mds.strain(d))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Edge,
    Vertex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldSource {
    Predicted,
    GroundTruth,
}

/// Per-edge or per-vertex coordinates in the embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceField {
    /// Row-major `rows x dim`.
    pub values: Vec<f64>,
    pub dim: usize,
    pub sampling: Sampling,
    pub source: FieldSource,
}

impl CorrespondenceField {
    /// Table file; the scalar slot records the sampling (0 vertex, 1 edge).
    pub fn write_file(&self, path: &Path) -> Result<(), EmbeddingError> {
        let mut buf = Vec::new();
        let tag = match self.sampling {
            Sampling::Vertex => 0.0,
            Sampling::Edge => 1.0,
        };
        write_table(&mut buf, &self.values, self.dim, tag)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_file(path: &Path, source: FieldSource) -> Result<Self, EmbeddingError> {
        let bytes = std::fs::read(path)?;
        let (values, dim, tag) = read_table(&mut bytes.as_slice())?;
        let sampling = match tag {
            t if t == 0.0 => Sampling::Vertex,
            t if t == 1.0 => Sampling::Edge,
            t => return Err(EmbeddingError::Format(format!("unknown sampling tag {t}"))),
        };
        Ok(CorrespondenceField {
            values,
            dim,
            sampling,
            source,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Edge values as endpoint means of a vertex field.
    pub fn vertex_to_edge(&self, mesh: &Mesh) -> CorrespondenceField {
        assert_eq!(self.sampling, Sampling::Vertex);
        let d = self.dim;
        let mut values = Vec::with_capacity(mesh.edge_count() * d);
        for e in mesh.edges() {
            let [a, b] = e.vertices;
            for k in 0..d {
                values.push(0.5 * (self.values[a * d + k] + self.values[b * d + k]));
            }
        }
        CorrespondenceField {
            values,
            dim: d,
            sampling: Sampling::Edge,
            source: self.source,
        }
    }

    /// Vertex values as the mean over incident edges of an edge field.
    pub fn edge_to_vertex(&self, mesh: &Mesh) -> CorrespondenceField {
        assert_eq!(self.sampling, Sampling::Edge);
        let d = self.dim;
        let mut values = vec![0.0; mesh.vertex_count() * d];
        let mut count = vec![0usize; mesh.vertex_count()];
        for (ei, e) in mesh.edges().iter().enumerate() {
            for &v in &e.vertices {
                count[v] += 1;
                for k in 0..d {
                    values[v * d + k] += self.values[ei * d + k];
                }
            }
        }
        for (v, &c) in count.iter().enumerate() {
            if c > 0 {
                for k in 0..d {
                    values[v * d + k] /= c as f64;
                }
            }
        }
        CorrespondenceField {
            values,
            dim: d,
            sampling: Sampling::Vertex,
            source: self.source,
        }
    }
}

/// A point on the template surface in barycentric form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemplatePoint {
    pub face: usize,
    pub bary: [f64; 3],
}

impl TemplatePoint {
    pub fn vertex(template: &Mesh, v: usize) -> Self {
        let vf = template
            .faces()
            .iter()
            .position(|f| f.contains(&v))
            .expect("vertex is referenced by a face");
        let f = template.faces()[vf];
        let bary = f.map(|x| if x == v { 1.0 } else { 0.0 });
        TemplatePoint { face: vf, bary }
    }

    /// Position of the point on `mesh` (same connectivity as the template).
    pub fn position(&self, mesh: &Mesh) -> Point3<f64> {
        let f = mesh.faces()[self.face];
        Point3::from(
            (0..3).fold(nalgebra::Vector3::zeros(), |acc, c| acc + mesh.vertices()[f[c]].coords * self.bary[c]),
        )
    }

    pub fn is_valid(&self, template: &Mesh) -> bool {
        self.face < template.face_count()
            && self.bary.iter().all(|&b| b >= -1e-9)
            && (self.bary.iter().sum::<f64>() - 1.0).abs() < 1e-6
    }
}

/// Ground-truth coordinates per scan vertex, interpolated barycentrically.
pub fn ground_truth_field(
    scan: &Mesh,
    registration: &[TemplatePoint],
    emb: &TemplateEmbedding,
) -> Result<CorrespondenceField, EmbeddingError> {
    if registration.len() != scan.vertex_count() {
        return Err(EmbeddingError::Shape(format!(
            "{} template points for {} scan vertices",
            registration.len(),
            scan.vertex_count()
        )));
    }
    let d = emb.dim;
    let mut values = Vec::with_capacity(registration.len() * d);
    for (i, tp) in registration.iter().enumerate() {
        if !tp.is_valid(&emb.template) {
            return Err(EmbeddingError::Shape(format!("invalid template point for scan vertex {i}")));
        }
        let f = emb.template.faces()[tp.face];
        for k in 0..d {
            values.push((0..3).map(|c| tp.bary[c] * emb.omega(f[c])[k]).sum());
        }
    }
    Ok(CorrespondenceField {
        values,
        dim: d,
        sampling: Sampling::Vertex,
        source: FieldSource::GroundTruth,
    })
}

/// Mean Euclidean distance between corresponding rows.
pub fn mds_error(predicted: &CorrespondenceField, truth: &CorrespondenceField) -> Result<f64, EmbeddingError> {
    if predicted.dim != truth.dim || predicted.values.len() != truth.values.len() || predicted.rows() == 0 {
        return Err(EmbeddingError::Shape(format!(
            "{}x{} vs {}x{}",
            predicted.rows(),
            predicted.dim,
            truth.rows(),
            truth.dim
        )));
    }
    let total: f64 = (0..predicted.rows())
        .map(|i| euclid(predicted.row(i), truth.row(i)))
        .sum();
    Ok(total / predicted.rows() as f64)
}
