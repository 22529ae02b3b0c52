//! Approximate geodesic distances, the geodesic center of gravity, and the
//! scalar signal fields that orient convolution patches.
//!
//! Distances are shortest paths on a graph whose nodes are the mesh vertices
//! plus one Steiner point per edge midpoint, with every pair of nodes on a
//! common face joined by a straight segment. Segment lengths are quantized
//! to fixed point so path sums are exact integers: the graph metric is then
//! exactly symmetric and satisfies the triangle inequality without rounding.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::mesh::Mesh;

/// Fixed-point scale of graph weights (units per meter).
const SCALE: f64 = (1u64 << 32) as f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeodesicError {
    #[error("source vertex {vertex} out of range for {count} vertices")]
    Source { vertex: usize, count: usize },
    #[error("mesh is not connected: vertex {0} is unreachable")]
    Disconnected(usize),
}

/// Vertices followed by edge midpoints, joined within each face.
#[derive(Debug, Clone)]
pub struct SteinerGraph {
    vertex_count: usize,
    positions: Vec<Point3<f64>>,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    weights: Vec<u64>,
}

impl SteinerGraph {
    pub fn new(mesh: &Mesh) -> Self {
        let n = mesh.vertex_count();
        let mut positions = mesh.vertices().to_vec();
        positions.extend((0..mesh.edge_count()).map(|e| mesh.edge_midpoint(e)));
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(mesh.face_count() * 15);
        for f in 0..mesh.face_count() {
            let [a, b, c] = mesh.faces()[f];
            let [e0, e1, e2] = mesh.face_edges(f);
            let nodes = [a, b, c, n + e0, n + e1, n + e2];
            for i in 0..6 {
                for j in i + 1..6 {
                    let (x, y) = (nodes[i].min(nodes[j]), nodes[i].max(nodes[j]));
                    pairs.push((x, y));
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        let total = positions.len();
        let mut degree = vec![0usize; total + 1];
        for &(x, y) in &pairs {
            degree[x] += 1;
            degree[y] += 1;
        }
        let mut offsets = vec![0; total + 1];
        for i in 0..total {
            offsets[i + 1] = offsets[i] + degree[i];
        }
        let mut fill = offsets.clone();
        let mut targets = vec![0; offsets[total]];
        let mut weights = vec![0; offsets[total]];
        for &(x, y) in &pairs {
            let w = ((positions[x] - positions[y]).norm() * SCALE).round() as u64;
            targets[fill[x]] = y;
            weights[fill[x]] = w;
            fill[x] += 1;
            targets[fill[y]] = x;
            weights[fill[y]] = w;
            fill[y] += 1;
        }
        SteinerGraph {
            vertex_count: n,
            positions,
            offsets,
            targets,
            weights,
        }
    }

    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn position(&self, node: usize) -> Point3<f64> {
        self.positions[node]
    }

    /// Neighbors of a node with fixed-point weights.
    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = (usize, u64)> + '_ {
        let span = self.offsets[node]..self.offsets[node + 1];
        self.targets[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    /// Shortest-path lengths in fixed-point units from a set of sources;
    /// `u64::MAX` marks unreachable nodes.
    pub fn shortest_paths(&self, sources: &[usize]) -> Vec<u64> {
        let mut dist = vec![u64::MAX; self.node_count()];
        let mut heap = BinaryHeap::new();
        for &s in sources {
            dist[s] = 0;
            heap.push(Reverse((0u64, s)));
        }
        while let Some(Reverse((d, u))) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for (v, w) in self.neighbors(u) {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Reverse((nd, v)));
                }
            }
        }
        dist
    }

    /// Converts fixed-point graph lengths to meters.
    pub fn to_meters(d: u64) -> f64 {
        if d == u64::MAX {
            f64::INFINITY
        } else {
            d as f64 / SCALE
        }
    }

    /// Vertex-to-vertex distances in meters from one source vertex.
    pub fn vertex_distances(&self, source: usize) -> Vec<f64> {
        let d = self.shortest_paths(&[source]);
        d[..self.vertex_count].iter().map(|&x| Self::to_meters(x)).collect()
    }
}

/// Distances from a source with the per-face linear gradient.
#[derive(Debug, Clone)]
pub struct GeodesicField {
    pub distances: Vec<f64>,
    pub gradients: Vec<Vector3<f64>>,
}

/// Gradient of the piecewise-linear interpolant of `values` on each face.
/// Faces with a non-finite value or zero area get a zero gradient.
pub fn face_gradients(mesh: &Mesh, values: &[f64]) -> Vec<Vector3<f64>> {
    (0..mesh.face_count())
        .map(|f| {
            let t = mesh.faces()[f];
            let u = t.map(|v| values[v]);
            let cross = mesh.face_cross(f);
            let twice_area = cross.norm();
            if twice_area == 0.0 || u.iter().any(|x| !x.is_finite()) {
                return Vector3::zeros();
            }
            let n = cross / twice_area;
            let p = t.map(|v| mesh.vertices()[v]);
            let mut g = Vector3::zeros();
            for i in 0..3 {
                let opposite = p[(i + 2) % 3] - p[(i + 1) % 3];
                g += n.cross(&opposite) * (u[i] / twice_area);
            }
            g
        })
        .collect()
}

pub fn geodesic_distances(mesh: &Mesh, source: usize) -> Result<GeodesicField, GeodesicError> {
    if source >= mesh.vertex_count() {
        return Err(GeodesicError::Source {
            vertex: source,
            count: mesh.vertex_count(),
        });
    }
    let distances = SteinerGraph::new(mesh).vertex_distances(source);
    let gradients = face_gradients(mesh, &distances);
    Ok(GeodesicField {
        distances,
        gradients,
    })
}

/// Row-major all-pairs vertex distance matrix in meters.
pub fn all_pairs_distances(mesh: &Mesh) -> Vec<f64> {
    let graph = SteinerGraph::new(mesh);
    let n = mesh.vertex_count();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|s| graph.vertex_distances(s))
        .collect();
    let mut out = Vec::with_capacity(n * n);
    for r in rows {
        out.extend(r);
    }
    out
}

/// Area-weighted sum of squared distances to every vertex, per candidate
/// vertex. Errors if the mesh is not connected.
pub fn center_objective(mesh: &Mesh) -> Result<Vec<f64>, GeodesicError> {
    let graph = SteinerGraph::new(mesh);
    let areas = mesh.vertex_areas();
    let used = mesh.referenced_vertices();
    (0..mesh.vertex_count())
        .into_par_iter()
        .map(|p| {
            if !used[p] {
                return Ok(f64::INFINITY);
            }
            let d = graph.vertex_distances(p);
            let mut sum = 0.0;
            for (q, (&dq, &aq)) in d.iter().zip(&areas).enumerate() {
                if !dq.is_finite() {
                    if used[q] {
                        return Err(GeodesicError::Disconnected(q));
                    }
                    continue;
                }
                sum += aq * dq * dq;
            }
            Ok(sum)
        })
        .collect()
}

/// Vertex minimizing [`center_objective`], lowest index on ties.
pub fn geodesic_center(mesh: &Mesh) -> Result<usize, GeodesicError> {
    let obj = center_objective(mesh)?;
    let mut best = 0;
    for (i, &v) in obj.iter().enumerate() {
        if v < obj[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    GeodesicFromCenter,
    VerticalHeight,
    /// No field; patch orientation is randomized per patch instead.
    Random,
}

#[derive(Debug, Clone)]
pub struct SignalField {
    pub kind: SignalKind,
    pub values: Vec<f64>,
    pub gradients: Vec<Vector3<f64>>,
    /// Geodesic center, for [`SignalKind::GeodesicFromCenter`].
    pub center: Option<usize>,
}

pub fn signal_function(mesh: &Mesh, kind: SignalKind) -> Result<SignalField, GeodesicError> {
    let (values, center) = match kind {
        SignalKind::GeodesicFromCenter => {
            let c = geodesic_center(mesh)?;
            (SteinerGraph::new(mesh).vertex_distances(c), Some(c))
        }
        SignalKind::VerticalHeight => (mesh.vertices().iter().map(|p| p.z).collect(), None),
        SignalKind::Random => (vec![0.0; mesh.vertex_count()], None),
    };
    let gradients = face_gradients(mesh, &values);
    Ok(SignalField {
        kind,
        values,
        gradients,
        center,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::primitives;

    #[test]
    fn source_is_zero_and_neighbors_positive() {
        let m = primitives::icosphere(2);
        let f = geodesic_distances(&m, 5).unwrap();
        assert_eq!(f.distances[5], 0.0);
        let shortest = m
            .edges()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.vertices.contains(&5))
            .map(|(i, _)| m.edge_length(i))
            .fold(f64::INFINITY, f64::min);
        for nb in &m.vertex_neighbors()[5] {
            assert!(f.distances[*nb] >= shortest * (1.0 - 1e-9));
        }
    }

    #[test]
    fn disconnected_vertex_is_infinite() {
        let a = primitives::tetrahedron();
        let mut v = a.vertices().to_vec();
        v.extend(a.vertices().iter().map(|p| p + Vector3::new(5.0, 0.0, 0.0)));
        let mut f = a.faces().to_vec();
        f.extend(a.faces().iter().map(|t| t.map(|x| x + 4)));
        let m = Mesh::new(v, f).unwrap();
        let field = geodesic_distances(&m, 0).unwrap();
        assert!(field.distances[4].is_infinite());
        assert_eq!(geodesic_center(&m), Err(GeodesicError::Disconnected(4)));
    }

    #[test]
    fn vertical_height_gradient() {
        let m = primitives::icosphere(2);
        let s = signal_function(&m, SignalKind::VerticalHeight).unwrap();
        for f in 0..m.face_count() {
            let n = m.face_normal(f).unwrap();
            let g = s.gradients[f];
            let expected = Vector3::z() - n * n.z;
            assert!((g - expected).norm() < 1e-9);
            if n.z.abs() < 1.0 - 1e-9 {
                assert!(g.z > 0.0);
            }
        }
    }
}
