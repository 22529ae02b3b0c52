//! Indexed triangle meshes with a canonical edge list.
//!
//! Edges are undirected vertex pairs `(min, max)` sorted lexicographically, so
//! edge indices are a pure function of the face list. Everything downstream
//! (pooling maps, patch tables, features) indexes edges this way.

mod features;
mod io;
mod query;
pub mod primitives;
mod repair;

pub use features::{edge_features, EdgeFeatureMatrix, FeatureError};
pub use io::{parse_mesh, read_mesh, write_mesh, write_mesh_file, MeshFormat, ParseError};
pub use query::{closest_point_on_triangle, SurfaceHit, TriangleBvh};
pub use repair::{preprocess, repair, repair_tracked, PreprocessError};

use nalgebra::{Matrix3, Point3, Vector3};
use smallvec::SmallVec;
use thiserror::Error;

/// Tolerance on the unit length of stored normals.
pub const NORMAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("mesh has no faces")]
    Empty,
    #[error("face {face} references vertex {vertex}, but the mesh has {count} vertices")]
    IndexOutOfRange {
        face: usize,
        vertex: usize,
        count: usize,
    },
    #[error("face {0} repeats a vertex index")]
    DegenerateFace(usize),
    #[error("normal count {normals} does not match vertex count {vertices}")]
    NormalCount { normals: usize, vertices: usize },
    #[error("edge ({0}, {1}) has {2} incident faces")]
    NonManifoldEdge(usize, usize, usize),
    #[error("incident faces of vertex {0} do not form a single fan")]
    NonManifoldVertex(usize),
    #[error("edge ({0}, {1}) is traversed twice in the same direction")]
    InconsistentOrientation(usize, usize),
}

/// An undirected edge with its incident faces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    /// Endpoints, `vertices[0] < vertices[1]`.
    pub vertices: [usize; 2],
    pub faces: SmallVec<[usize; 2]>,
}

impl Edge {
    pub fn is_boundary(&self) -> bool {
        self.faces.len() == 1
    }

    pub fn other(&self, v: usize) -> usize {
        if self.vertices[0] == v {
            self.vertices[1]
        } else {
            self.vertices[0]
        }
    }
}

/// Result of manifold validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Manifold {
    /// Every edge has exactly two incident faces.
    Closed,
    /// At least one boundary edge.
    Open,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
    edges: Vec<Edge>,
    normals: Vec<Vector3<f64>>,
}

fn edge_key(a: usize, b: usize) -> [usize; 2] {
    if a < b {
        [a, b]
    } else {
        [b, a]
    }
}

fn build_edges(faces: &[[usize; 3]]) -> Vec<Edge> {
    let mut pairs: Vec<([usize; 2], usize)> = Vec::with_capacity(faces.len() * 3);
    for (fi, f) in faces.iter().enumerate() {
        for k in 0..3 {
            pairs.push((edge_key(f[k], f[(k + 1) % 3]), fi));
        }
    }
    pairs.sort_unstable();
    let mut edges: Vec<Edge> = Vec::with_capacity(pairs.len() / 2 + 1);
    for (key, fi) in pairs {
        match edges.last_mut() {
            Some(e) if e.vertices == key => e.faces.push(fi),
            _ => edges.push(Edge {
                vertices: key,
                faces: SmallVec::from_slice(&[fi]),
            }),
        }
    }
    edges
}

impl Mesh {
    /// Builds a mesh and computes area-weighted vertex normals.
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        Self::validate_faces(vertices.len(), &faces)?;
        let edges = build_edges(&faces);
        let mut mesh = Mesh {
            vertices,
            faces,
            edges,
            normals: Vec::new(),
        };
        mesh.normals = mesh.area_weighted_normals();
        Ok(mesh)
    }

    /// Builds a mesh with given vertex normals. Normals are renormalized; any
    /// zero-length normal is replaced by the area-weighted face average.
    pub fn with_normals(
        vertices: Vec<Point3<f64>>,
        faces: Vec<[usize; 3]>,
        normals: Vec<Vector3<f64>>,
    ) -> Result<Self, MeshError> {
        if normals.len() != vertices.len() {
            return Err(MeshError::NormalCount {
                normals: normals.len(),
                vertices: vertices.len(),
            });
        }
        let mut mesh = Self::new(vertices, faces)?;
        for (stored, given) in mesh.normals.iter_mut().zip(normals) {
            let len = given.norm();
            if len > 1e-12 && len.is_finite() {
                *stored = given / len;
            }
        }
        Ok(mesh)
    }

    fn validate_faces(count: usize, faces: &[[usize; 3]]) -> Result<(), MeshError> {
        if faces.is_empty() {
            return Err(MeshError::Empty);
        }
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= count {
                    return Err(MeshError::IndexOutOfRange {
                        face: fi,
                        vertex: v,
                        count,
                    });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(MeshError::DegenerateFace(fi));
            }
        }
        Ok(())
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn normals(&self) -> &[Vector3<f64>] {
        &self.normals
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Index of the edge joining `a` and `b`, if any.
    pub fn edge_index(&self, a: usize, b: usize) -> Option<usize> {
        let key = edge_key(a, b);
        self.edges.binary_search_by(|e| e.vertices.cmp(&key)).ok()
    }

    /// Unnormalized face normal (twice the area times the unit normal).
    pub fn face_cross(&self, f: usize) -> Vector3<f64> {
        let [a, b, c] = self.faces[f];
        let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        (pb - pa).cross(&(pc - pa))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * self.face_cross(f).norm()
    }

    pub fn face_normal(&self, f: usize) -> Option<Vector3<f64>> {
        let n = self.face_cross(f);
        let len = n.norm();
        (len > 0.0 && len.is_finite()).then(|| n / len)
    }

    pub fn face_centroid(&self, f: usize) -> Point3<f64> {
        let [a, b, c] = self.faces[f];
        Point3::from((self.vertices[a].coords + self.vertices[b].coords + self.vertices[c].coords) / 3.0)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Lumped (barycentric) vertex areas: one third of each incident face.
    pub fn vertex_areas(&self) -> Vec<f64> {
        let mut areas = vec![0.0; self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            let a = self.face_area(fi) / 3.0;
            for &v in f {
                areas[v] += a;
            }
        }
        areas
    }

    pub fn area_weighted_centroid(&self) -> Point3<f64> {
        let mut sum = Vector3::zeros();
        let mut total = 0.0;
        for fi in 0..self.faces.len() {
            let a = self.face_area(fi);
            sum += self.face_centroid(fi).coords * a;
            total += a;
        }
        if total > 0.0 {
            Point3::from(sum / total)
        } else {
            let n = self.vertices.len().max(1) as f64;
            Point3::from(self.vertices.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n)
        }
    }

    pub fn edge_length(&self, e: usize) -> f64 {
        let [a, b] = self.edges[e].vertices;
        (self.vertices[a] - self.vertices[b]).norm()
    }

    pub fn edge_midpoint(&self, e: usize) -> Point3<f64> {
        let [a, b] = self.edges[e].vertices;
        nalgebra::center(&self.vertices[a], &self.vertices[b])
    }

    pub fn mean_edge_length(&self) -> f64 {
        (0..self.edges.len()).map(|e| self.edge_length(e)).sum::<f64>() / self.edges.len() as f64
    }

    fn area_weighted_normals(&self) -> Vec<Vector3<f64>> {
        let mut normals = vec![Vector3::zeros(); self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            // |cross| is twice the area, so this is already area weighting.
            let n = self.face_cross(fi);
            for &v in f {
                normals[v] += n;
            }
        }
        for n in &mut normals {
            let len = n.norm();
            *n = if len > 1e-300 && len.is_finite() {
                *n / len
            } else {
                Vector3::z()
            };
        }
        normals
    }

    /// Incident faces per vertex, in increasing face order.
    pub fn vertex_faces(&self) -> Vec<Vec<usize>> {
        let mut vf = vec![Vec::new(); self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            for &v in f {
                vf[v].push(fi);
            }
        }
        vf
    }

    /// Vertex neighbors through edges, sorted.
    pub fn vertex_neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.vertices.len()];
        for e in &self.edges {
            let [a, b] = e.vertices;
            nb[a].push(b);
            nb[b].push(a);
        }
        for n in &mut nb {
            n.sort_unstable();
        }
        nb
    }

    /// Incident edges per vertex, in increasing edge order.
    pub fn vertex_edges(&self) -> Vec<Vec<usize>> {
        let mut ve = vec![Vec::new(); self.vertices.len()];
        for (ei, e) in self.edges.iter().enumerate() {
            ve[e.vertices[0]].push(ei);
            ve[e.vertices[1]].push(ei);
        }
        ve
    }

    /// The three edge indices of a face, in the order (v0v1, v1v2, v2v0).
    pub fn face_edges(&self, f: usize) -> [usize; 3] {
        let [a, b, c] = self.faces[f];
        let find = |x, y| self.edge_index(x, y).expect("face edge present in edge list");
        [find(a, b), find(b, c), find(c, a)]
    }

    pub fn is_boundary_vertex(&self) -> Vec<bool> {
        let mut flag = vec![false; self.vertices.len()];
        for e in &self.edges {
            if e.is_boundary() {
                flag[e.vertices[0]] = true;
                flag[e.vertices[1]] = true;
            }
        }
        flag
    }

    pub fn euler_characteristic(&self) -> i64 {
        let used = self.referenced_vertices().iter().filter(|&&u| u).count();
        used as i64 - self.edges.len() as i64 + self.faces.len() as i64
    }

    pub fn referenced_vertices(&self) -> Vec<bool> {
        let mut used = vec![false; self.vertices.len()];
        for f in &self.faces {
            for &v in f {
                used[v] = true;
            }
        }
        used
    }

    /// Number of boundary loops (cycles of boundary edges).
    pub fn boundary_loop_count(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.vertices.len()).collect();
        let mut on_boundary = vec![false; self.vertices.len()];
        for e in self.edges.iter().filter(|e| e.is_boundary()) {
            let [a, b] = e.vertices;
            on_boundary[a] = true;
            on_boundary[b] = true;
            union(&mut parent, a, b);
        }
        (0..self.vertices.len())
            .filter(|&v| on_boundary[v] && find(&mut parent, v) == v)
            .count()
    }

    /// Genus of a single connected manifold component, from
    /// `V - E + F = 2 - 2g - b`.
    pub fn genus(&self) -> i64 {
        let chi = self.euler_characteristic();
        let b = self.boundary_loop_count() as i64;
        (2 - chi - b) / 2
    }

    /// Connected components of faces (faces sharing a vertex are connected).
    /// Returns a component id per face and the component count.
    pub fn face_components(&self) -> (Vec<usize>, usize) {
        let mut parent: Vec<usize> = (0..self.vertices.len()).collect();
        for f in &self.faces {
            union(&mut parent, f[0], f[1]);
            union(&mut parent, f[1], f[2]);
        }
        let mut label = vec![usize::MAX; self.vertices.len()];
        let mut count = 0;
        let mut out = Vec::with_capacity(self.faces.len());
        for f in &self.faces {
            let root = find(&mut parent, f[0]);
            if label[root] == usize::MAX {
                label[root] = count;
                count += 1;
            }
            out.push(label[root]);
        }
        (out, count)
    }

    /// Checks the closed/open manifold invariants: every edge has one or two
    /// incident faces, every vertex's faces form one fan, and adjacent faces
    /// are consistently oriented.
    pub fn validate_manifold(&self) -> Result<Manifold, MeshError> {
        let mut open = false;
        for e in &self.edges {
            match e.faces.len() {
                1 => open = true,
                2 => {
                    let [a, b] = e.vertices;
                    if self.directed(e.faces[0], a, b) == self.directed(e.faces[1], a, b) {
                        return Err(MeshError::InconsistentOrientation(a, b));
                    }
                }
                n => return Err(MeshError::NonManifoldEdge(e.vertices[0], e.vertices[1], n)),
            }
        }
        let vf = self.vertex_faces();
        for (v, faces) in vf.iter().enumerate() {
            if !faces.is_empty() && self.fan_count(v, faces) != 1 {
                return Err(MeshError::NonManifoldVertex(v));
            }
        }
        Ok(if open { Manifold::Open } else { Manifold::Closed })
    }

    /// Whether face `f` traverses `a -> b` (as opposed to `b -> a`).
    pub fn directed(&self, f: usize, a: usize, b: usize) -> bool {
        let t = self.faces[f];
        (0..3).any(|k| t[k] == a && t[(k + 1) % 3] == b)
    }

    /// Number of edge-connected fans among the faces around `v`.
    pub(crate) fn fan_count(&self, v: usize, faces: &[usize]) -> usize {
        fan_groups(&self.faces, v, faces).1
    }

    pub fn translated(&self, t: &Vector3<f64>) -> Mesh {
        let mut m = self.clone();
        for p in &mut m.vertices {
            *p += t;
        }
        m
    }

    /// Applies `x -> r x + t`; normals are rotated.
    pub fn transformed(&self, r: &Matrix3<f64>, t: &Vector3<f64>) -> Mesh {
        let mut m = self.clone();
        for p in &mut m.vertices {
            *p = Point3::from(r * p.coords + t);
        }
        for n in &mut m.normals {
            *n = (r * *n).normalize();
        }
        m
    }

    /// Same connectivity, new positions; normals are recomputed.
    pub fn with_positions(&self, positions: Vec<Point3<f64>>) -> Mesh {
        assert_eq!(positions.len(), self.vertices.len());
        let mut m = Mesh {
            vertices: positions,
            faces: self.faces.clone(),
            edges: self.edges.clone(),
            normals: Vec::new(),
        };
        m.normals = m.area_weighted_normals();
        m
    }

    /// Removes vertices not referenced by any face, keeping relative order.
    /// Returns the compacted mesh and the old-to-new vertex map.
    pub fn compacted(&self) -> (Mesh, Vec<Option<usize>>) {
        let used = self.referenced_vertices();
        let mut map = vec![None; self.vertices.len()];
        let mut verts = Vec::new();
        let mut normals = Vec::new();
        for (v, &u) in used.iter().enumerate() {
            if u {
                map[v] = Some(verts.len());
                verts.push(self.vertices[v]);
                normals.push(self.normals[v]);
            }
        }
        if verts.len() == self.vertices.len() {
            return (self.clone(), map);
        }
        let faces: Vec<[usize; 3]> = self
            .faces
            .iter()
            .map(|f| f.map(|v| map[v].expect("referenced")))
            .collect();
        let mesh = Mesh {
            edges: build_edges(&faces),
            vertices: verts,
            faces,
            normals,
        };
        (mesh, map)
    }

    /// Keeps the listed faces (in the given order), dropping unreferenced
    /// vertices. Returns the old-to-new vertex map.
    pub fn subset_faces(&self, keep: &[usize]) -> Result<(Mesh, Vec<Option<usize>>), MeshError> {
        let faces: Vec<[usize; 3]> = keep.iter().map(|&f| self.faces[f]).collect();
        if faces.is_empty() {
            return Err(MeshError::Empty);
        }
        let tmp = Mesh {
            edges: build_edges(&faces),
            vertices: self.vertices.clone(),
            faces,
            normals: self.normals.clone(),
        };
        Ok(tmp.compacted())
    }
}

/// Groups the faces around `v` into edge-connected fans. Returns a group id
/// per entry of `faces` and the number of groups.
pub(crate) fn fan_groups(all: &[[usize; 3]], v: usize, faces: &[usize]) -> (Vec<usize>, usize) {
    let n = faces.len();
    let mut parent: Vec<usize> = (0..n).collect();
    // Two faces around v are adjacent iff they share a second vertex.
    for i in 0..n {
        for j in i + 1..n {
            let fi = all[faces[i]];
            let fj = all[faces[j]];
            let shared = fi.iter().any(|&x| x != v && fj.contains(&x));
            if shared {
                union(&mut parent, i, j);
            }
        }
    }
    let mut label = vec![usize::MAX; n];
    let mut count = 0;
    let mut out = vec![0; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if label[r] == usize::MAX {
            label[r] = count;
            count += 1;
        }
        out[i] = label[r];
    }
    (out, count)
}

pub(crate) fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

pub(crate) fn union(parent: &mut [usize], a: usize, b: usize) {
    let ra = find(parent, a);
    let rb = find(parent, b);
    if ra != rb {
        // Keep the smaller index as root so labels are order-stable.
        if ra < rb {
            parent[rb] = ra;
        } else {
            parent[ra] = rb;
        }
    }
}
