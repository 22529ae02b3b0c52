//! Oriented 13-edge patches: the edge, its four one-ring edges and the
//! eight edges of the faces beyond them.

use nalgebra::Vector3;
use rand::Rng;

use super::ConvError;
use crate::mesh::Mesh;
use crate::surface_field::{SignalField, SignalKind};

pub const PATCH: usize = 13;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchTable {
    /// Oriented rows: entry 0 is the edge, 1..5 ring one, 5..13 ring two.
    pub rows: Vec<[usize; PATCH]>,
    /// Rows before rotation, in counter-clockwise order from a canonical
    /// starting edge.
    base: Vec<[usize; PATCH]>,
    /// Ring-one rotation per row (ring two is rotated by twice as much).
    pub shifts: Vec<u8>,
    pub kind: SignalKind,
}

/// Face containing the directed edge `a -> b`, if any.
fn face_with(mesh: &Mesh, faces: &[usize], a: usize, b: usize) -> Option<usize> {
    faces.iter().copied().find(|&f| mesh.directed(f, a, b))
}

/// Third vertex of face `f` given two of its vertices.
fn apex(mesh: &Mesh, f: usize, a: usize, b: usize) -> usize {
    *mesh.faces()[f].iter().find(|&&v| v != a && v != b).expect("triangle")
}

fn rotate(base: &[usize; PATCH], s: usize) -> [usize; PATCH] {
    let mut row = *base;
    for j in 0..4 {
        row[1 + j] = base[1 + (j + s) % 4];
    }
    for j in 0..8 {
        row[5 + j] = base[5 + (j + 2 * s) % 8];
    }
    row
}

/// Builds the patch table. For [`SignalKind::Random`] the rows start
/// unrotated; call [`PatchTable::randomized`] to draw orientations.
pub fn build_patch_table(mesh: &Mesh, signal: &SignalField) -> Result<PatchTable, ConvError> {
    if signal.gradients.len() != mesh.face_count() {
        return Err(ConvError::Shape(format!(
            "{} signal gradients for {} faces",
            signal.gradients.len(),
            mesh.face_count()
        )));
    }
    let edges = mesh.edges();
    let mut base = Vec::with_capacity(edges.len());
    let mut shifts = Vec::with_capacity(edges.len());
    for (ei, e) in edges.iter().enumerate() {
        let [a, b] = e.vertices;
        let bad = || ConvError::NonManifoldEdge { edge: ei, a, b };
        if e.faces.len() > 2 || e.faces.is_empty() {
            return Err(bad());
        }
        let (p, q, f1) = match face_with(mesh, &e.faces, a, b) {
            Some(f) => (a, b, f),
            None => (b, a, face_with(mesh, &e.faces, b, a).ok_or_else(bad)?),
        };
        let f2 = e.faces.iter().copied().find(|&f| f != f1);
        if let Some(f) = f2 {
            if !mesh.directed(f, q, p) {
                return Err(bad());
            }
        }
        let c = apex(mesh, f1, p, q);
        // Diamond boundary, counter-clockwise: p -> d -> q -> c -> p.
        let ring1: [Option<(usize, usize, usize)>; 4] = match f2 {
            Some(f) => {
                let d = apex(mesh, f, p, q);
                [Some((p, d, f)), Some((d, q, f)), Some((q, c, f1)), Some((c, p, f1))]
            }
            None => [None, None, Some((q, c, f1)), Some((c, p, f1))],
        };
        let mut row = [ei; PATCH];
        let vertex_edges = |u: usize, w: usize| mesh.edge_index(u, w).expect("face edge");
        for (j, entry) in ring1.iter().enumerate() {
            let Some((u, w, inner)) = *entry else { continue };
            let re = vertex_edges(u, w);
            row[1 + j] = re;
            // Outer face across u -> w traverses w -> u; its apex x gives the
            // ring-two edges u-x and x-w in the same rotational sense.
            let outer = edges[re].faces.iter().copied().find(|&f| f != inner);
            if let Some(f) = outer {
                if !mesh.directed(f, w, u) {
                    return Err(ConvError::NonManifoldEdge {
                        edge: re,
                        a: edges[re].vertices[0],
                        b: edges[re].vertices[1],
                    });
                }
                let x = apex(mesh, f, u, w);
                row[5 + 2 * j] = vertex_edges(u, x);
                row[6 + 2 * j] = vertex_edges(x, w);
            }
        }
        let shift = if signal.kind == SignalKind::Random {
            0
        } else {
            let g: Vector3<f64> = e.faces.iter().map(|&f| signal.gradients[f]).sum();
            let mid = mesh.edge_midpoint(ei);
            let mut best = 0;
            let mut best_dot = f64::NEG_INFINITY;
            for j in 0..4 {
                if row[1 + j] == ei {
                    continue;
                }
                let dot = (mesh.edge_midpoint(row[1 + j]) - mid).dot(&g);
                if dot > best_dot {
                    best = j;
                    best_dot = dot;
                }
            }
            best as u8
        };
        base.push(row);
        shifts.push(shift);
    }
    let rows = base.iter().zip(&shifts).map(|(b, &s)| rotate(b, s as usize)).collect();
    Ok(PatchTable {
        rows,
        base,
        shifts,
        kind: signal.kind,
    })
}

impl PatchTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Same neighborhoods with a uniformly random rotation per patch.
    pub fn randomized(&self, rng: &mut impl Rng) -> PatchTable {
        let shifts: Vec<u8> = (0..self.base.len()).map(|_| rng.gen_range(0..4u8)).collect();
        let rows = self.base.iter().zip(&shifts).map(|(b, &s)| rotate(b, s as usize)).collect();
        PatchTable {
            rows,
            base: self.base.clone(),
            shifts,
            kind: self.kind,
        }
    }
}
