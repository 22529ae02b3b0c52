use nalgebra::Point3;
use smallvec::SmallVec;

use crate::mesh::Mesh;

/// Two edges fused into one by a collapse. Edge ids below the source edge
/// count are source edge indices; larger ids name edges created by merges.
#[derive(Debug, Clone, PartialEq)]
pub struct Merge {
    pub parents: [usize; 2],
    /// Length weights of the parents, summing to 1.
    pub weights: [f64; 2],
    pub child: usize,
}

/// One collapse of edge `(keep, remove)` onto vertex `keep`.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseRecord {
    pub keep: usize,
    pub remove: usize,
    pub position: Point3<f64>,
    /// Source-mesh face indices deleted by this collapse (one or two).
    pub removed_faces: SmallVec<[usize; 2]>,
    /// Id of the collapsed edge, which has no image on the coarse mesh.
    pub discarded: usize,
    pub merges: SmallVec<[Merge; 2]>,
}

/// Ordered edge collapses turning a source mesh into a coarser one.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseTrace {
    pub source_edge_count: usize,
    /// Midpoints of the source edges, used to fill unsupported fine edges.
    pub source_midpoints: Vec<Point3<f64>>,
    pub collapses: Vec<CollapseRecord>,
    /// Edge id of every canonical edge of the coarse mesh.
    pub target_edges: Vec<usize>,
}

impl CollapseTrace {
    pub fn empty(source: &Mesh) -> Self {
        CollapseTrace {
            source_edge_count: source.edge_count(),
            source_midpoints: (0..source.edge_count()).map(|e| source.edge_midpoint(e)).collect(),
            collapses: Vec::new(),
            target_edges: (0..source.edge_count()).collect(),
        }
    }

    pub fn target_edge_count(&self) -> usize {
        self.target_edges.len()
    }

    /// Applies the recorded collapses to `source`.
    pub fn replay(&self, source: &Mesh) -> Mesh {
        if self.collapses.is_empty() {
            return source.clone();
        }
        self.replay_with_origin(source).0
    }

    /// Replays and also returns, per output vertex, its source vertex index.
    pub(crate) fn replay_with_origin(&self, source: &Mesh) -> (Mesh, Vec<usize>) {
        let mut pos = source.vertices().to_vec();
        let mut faces = source.faces().to_vec();
        let mut alive = vec![true; faces.len()];
        let mut vf = source.vertex_faces();
        for c in &self.collapses {
            for &f in &c.removed_faces {
                alive[f] = false;
                for v in faces[f] {
                    vf[v].retain(|&g| g != f);
                }
            }
            let moved = std::mem::take(&mut vf[c.remove]);
            for &f in &moved {
                for v in &mut faces[f] {
                    if *v == c.remove {
                        *v = c.keep;
                    }
                }
            }
            vf[c.keep].extend(moved);
            pos[c.keep] = c.position;
        }
        let mut map = vec![usize::MAX; pos.len()];
        let mut origin = Vec::new();
        let mut verts = Vec::new();
        for (v, faces_of_v) in vf.iter().enumerate() {
            if !faces_of_v.is_empty() {
                map[v] = verts.len();
                origin.push(v);
                verts.push(pos[v]);
            }
        }
        let faces: Vec<[usize; 3]> = faces
            .iter()
            .zip(&alive)
            .filter(|(_, &a)| a)
            .map(|(f, _)| f.map(|v| map[v]))
            .collect();
        let mesh = Mesh::new(verts, faces).expect("collapse trace yields a valid mesh");
        (mesh, origin)
    }
}
