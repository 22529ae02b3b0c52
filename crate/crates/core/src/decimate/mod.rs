//! Quadric-error edge-collapse decimation with collapse tracing.
//!
//! Every collapse is recorded so the same sequence can be replayed on the
//! source mesh and composed into a [`PoolingMap`] between the two levels.

mod pooling;
mod trace;

pub use pooling::{build_pooling_map, PoolingError, PoolingMap, MAX_POOL_THRESHOLD};
pub use trace::{CollapseRecord, CollapseTrace, Merge};

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};

use nalgebra::{Matrix3, Matrix4, Point3, Vector3, Vector4};
use smallvec::SmallVec;
use thiserror::Error;

use crate::mesh::{Mesh, MeshError};

/// Quadric systems with a worse condition number fall back to the midpoint.
pub const MAX_CONDITION: f64 = 1e8;

/// Relative weight of the planes that pin boundary edges in place.
const BOUNDARY_WEIGHT: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecimateError {
    #[error("target of {0} edges is below the minimum of 6")]
    TargetTooSmall(usize),
    #[error("target of {target} edges exceeds the {edges} edges of the input")]
    TargetAboveSource { target: usize, edges: usize },
    #[error("a closed mesh loses 3 edges per collapse; cannot go from {edges} to {target}")]
    Parity { target: usize, edges: usize },
    #[error("no legal collapse left at {achieved} edges (target {target})")]
    Floor { target: usize, achieved: usize },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

fn key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    cost: f64,
    key: (usize, usize),
    stamp: (u32, u32),
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // Lexicographic vertex keys order like canonical edge indices.
        self.cost
            .total_cmp(&other.cost)
            .then(self.key.cmp(&other.key))
            .then(self.stamp.cmp(&other.stamp))
    }
}

enum Verdict {
    Legal { removes: usize },
    Illegal,
}

struct State {
    pos: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
    face_alive: Vec<bool>,
    vf: Vec<Vec<usize>>,
    quadric: Vec<Matrix4<f64>>,
    boundary: Vec<bool>,
    version: Vec<u32>,
    ids: HashMap<(usize, usize), usize>,
    next_id: usize,
    edge_count: usize,
}

fn plane_quadric(n: &Vector3<f64>, p: &Point3<f64>, weight: f64) -> Matrix4<f64> {
    let plane = Vector4::new(n.x, n.y, n.z, -n.dot(&p.coords));
    plane * plane.transpose() * weight
}

impl State {
    fn new(mesh: &Mesh) -> Self {
        let n = mesh.vertex_count();
        let mut quadric = vec![Matrix4::zeros(); n];
        for (fi, f) in mesh.faces().iter().enumerate() {
            if let Some(normal) = mesh.face_normal(fi) {
                let q = plane_quadric(&normal, &mesh.vertices()[f[0]], mesh.face_area(fi));
                for &v in f {
                    quadric[v] += q;
                }
            }
        }
        for e in mesh.edges().iter().filter(|e| e.is_boundary()) {
            let [u, v] = e.vertices;
            let Some(fnormal) = mesh.face_normal(e.faces[0]) else {
                continue;
            };
            let (pu, pv) = (mesh.vertices()[u], mesh.vertices()[v]);
            let dir = pv - pu;
            let side = dir.cross(&fnormal);
            let len = side.norm();
            if len > 0.0 {
                let q = plane_quadric(&(side / len), &pu, BOUNDARY_WEIGHT * dir.norm_squared());
                quadric[u] += q;
                quadric[v] += q;
            }
        }
        let ids = mesh
            .edges()
            .iter()
            .enumerate()
            .map(|(i, e)| ((e.vertices[0], e.vertices[1]), i))
            .collect();
        State {
            pos: mesh.vertices().to_vec(),
            faces: mesh.faces().to_vec(),
            face_alive: vec![true; mesh.face_count()],
            vf: mesh.vertex_faces(),
            quadric,
            boundary: mesh.is_boundary_vertex(),
            version: vec![0; n],
            ids,
            next_id: mesh.edge_count(),
            edge_count: mesh.edge_count(),
        }
    }

    fn neighbors(&self, v: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.vf[v]
            .iter()
            .flat_map(|&f| self.faces[f])
            .filter(|&x| x != v)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    fn faces_with(&self, a: usize, b: usize) -> SmallVec<[usize; 2]> {
        self.vf[a]
            .iter()
            .copied()
            .filter(|&f| self.faces[f].contains(&b))
            .collect()
    }

    fn third(&self, f: usize, a: usize, b: usize) -> usize {
        *self.faces[f].iter().find(|&&x| x != a && x != b).unwrap()
    }

    fn placement(&self, a: usize, b: usize, boundary_edge: bool) -> (Point3<f64>, f64) {
        let q = self.quadric[a] + self.quadric[b];
        let p = if !boundary_edge && self.boundary[a] != self.boundary[b] {
            // Keep the boundary where it is.
            if self.boundary[a] {
                self.pos[a]
            } else {
                self.pos[b]
            }
        } else {
            optimal_point(&q).unwrap_or_else(|| nalgebra::center(&self.pos[a], &self.pos[b]))
        };
        let h = Vector4::new(p.x, p.y, p.z, 1.0);
        (p, (h.transpose() * q * h)[0].max(0.0))
    }

    fn candidate(&self, a: usize, b: usize) -> Candidate {
        let boundary_edge = self.faces_with(a, b).len() == 1;
        let (_, cost) = self.placement(a, b, boundary_edge);
        Candidate {
            cost,
            key: (a, b),
            stamp: (self.version[a], self.version[b]),
        }
    }

    fn is_current(&self, c: &Candidate) -> bool {
        let (a, b) = c.key;
        !self.vf[a].is_empty()
            && !self.vf[b].is_empty()
            && (self.version[a], self.version[b]) == c.stamp
    }

    fn check(&self, a: usize, b: usize, p: &Point3<f64>) -> Verdict {
        let shared = self.faces_with(a, b);
        if shared.is_empty() || shared.len() > 2 {
            return Verdict::Illegal;
        }
        let boundary_edge = shared.len() == 1;
        if !boundary_edge && self.boundary[a] && self.boundary[b] {
            return Verdict::Illegal;
        }
        let mut opposite: SmallVec<[usize; 2]> = shared.iter().map(|&f| self.third(f, a, b)).collect();
        opposite.sort_unstable();
        let na = self.neighbors(a);
        let nb = self.neighbors(b);
        let common: SmallVec<[usize; 2]> = na.iter().copied().filter(|x| nb.binary_search(x).is_ok()).collect();
        if common != opposite {
            return Verdict::Illegal;
        }
        // Each merged edge must still border a face afterwards.
        for &c in &opposite {
            let rest = self
                .faces_with(a, c)
                .iter()
                .chain(self.faces_with(b, c).iter())
                .filter(|f| !shared.contains(f))
                .count();
            if rest == 0 {
                return Verdict::Illegal;
            }
        }
        let mut triples: Vec<[usize; 3]> = Vec::new();
        for &f in self.vf[a].iter().chain(self.vf[b].iter()) {
            if shared.contains(&f) {
                continue;
            }
            let old = self.faces[f];
            let new = old.map(|v| if v == b { a } else { v });
            let corner = |t: [usize; 3], moved: bool| {
                let q = |v: usize| if moved && v == a { *p } else { self.pos[v] };
                (q(t[1]) - q(t[0])).cross(&(q(t[2]) - q(t[0])))
            };
            let before = corner(old, false);
            let after = corner(new, true);
            let scale = before.norm();
            if scale > 0.0 && (after.dot(&before) < 0.0 || after.norm() <= 1e-12 * scale) {
                return Verdict::Illegal;
            }
            let mut t = new;
            t.sort_unstable();
            triples.push(t);
        }
        triples.sort_unstable();
        if triples.windows(2).any(|w| w[0] == w[1]) {
            return Verdict::Illegal;
        }
        Verdict::Legal {
            removes: if boundary_edge { 2 } else { 3 },
        }
    }

    fn collapse(&mut self, a: usize, b: usize, p: Point3<f64>) -> CollapseRecord {
        let mut shared = self.faces_with(a, b);
        shared.sort_unstable();
        let discarded = self.ids.remove(&key(a, b)).expect("collapsed edge is tracked");
        let mut merges = SmallVec::new();
        let mut opposite: SmallVec<[usize; 2]> = SmallVec::new();
        for &f in &shared {
            let c = self.third(f, a, b);
            opposite.push(c);
            let la = (self.pos[a] - self.pos[c]).norm();
            let lb = (self.pos[b] - self.pos[c]).norm();
            let weights = if la + lb > 0.0 {
                [la / (la + lb), lb / (la + lb)]
            } else {
                [0.5, 0.5]
            };
            let ac = self.ids.remove(&key(a, c)).expect("tracked");
            let bc = self.ids.remove(&key(b, c)).expect("tracked");
            let child = self.next_id;
            self.next_id += 1;
            self.ids.insert(key(a, c), child);
            merges.push(Merge {
                parents: [ac, bc],
                weights,
                child,
            });
        }
        for x in self.neighbors(b) {
            if x != a && !opposite.contains(&x) {
                let id = self.ids.remove(&key(b, x)).expect("tracked");
                self.ids.insert(key(a, x), id);
            }
        }
        for &f in &shared {
            self.face_alive[f] = false;
            for v in self.faces[f] {
                self.vf[v].retain(|&g| g != f);
            }
        }
        let moved = std::mem::take(&mut self.vf[b]);
        for &f in &moved {
            for v in &mut self.faces[f] {
                if *v == b {
                    *v = a;
                }
            }
        }
        self.vf[a].extend(moved);
        self.vf[a].sort_unstable();
        self.pos[a] = p;
        let qb = self.quadric[b];
        self.quadric[a] += qb;
        self.boundary[a] |= self.boundary[b];
        self.edge_count -= if shared.len() == 1 { 2 } else { 3 };
        CollapseRecord {
            keep: a,
            remove: b,
            position: p,
            removed_faces: shared,
            discarded,
            merges,
        }
    }
}

/// Minimizer of the quadric form, or `None` when the 3x3 system is too
/// badly conditioned.
fn optimal_point(q: &Matrix4<f64>) -> Option<Point3<f64>> {
    let a: Matrix3<f64> = q.fixed_view::<3, 3>(0, 0).into_owned();
    let rhs = -Vector3::new(q[(0, 3)], q[(1, 3)], q[(2, 3)]);
    let eig = a.symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let min = eig.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    if max == 0.0 || min * MAX_CONDITION < max {
        return None;
    }
    a.lu().solve(&rhs).map(Point3::from)
}

/// Collapses edges in order of increasing quadric error until the mesh has
/// exactly `target_edges` edges.
pub fn qslim_decimate(mesh: &Mesh, target_edges: usize) -> Result<(Mesh, CollapseTrace), DecimateError> {
    let m = mesh.edge_count();
    let mut trace = CollapseTrace::empty(mesh);
    if target_edges == m {
        return Ok((mesh.clone(), trace));
    }
    if target_edges < 6 {
        return Err(DecimateError::TargetTooSmall(target_edges));
    }
    if target_edges > m {
        return Err(DecimateError::TargetAboveSource {
            target: target_edges,
            edges: m,
        });
    }
    mesh.validate_manifold()?;
    let closed = mesh.edges().iter().all(|e| !e.is_boundary());
    if closed && (m - target_edges) % 3 != 0 {
        return Err(DecimateError::Parity {
            target: target_edges,
            edges: m,
        });
    }

    let mut st = State::new(mesh);
    let mut heap: BinaryHeap<Reverse<Candidate>> = mesh
        .edges()
        .iter()
        .map(|e| Reverse(st.candidate(e.vertices[0], e.vertices[1])))
        .collect();
    // Candidates that would overshoot the target; retried after the next collapse.
    let mut deferred: Vec<Candidate> = Vec::new();

    while st.edge_count > target_edges {
        let Some(Reverse(cand)) = heap.pop() else {
            return Err(DecimateError::Floor {
                target: target_edges,
                achieved: st.edge_count,
            });
        };
        if !st.is_current(&cand) {
            continue;
        }
        let (a, b) = cand.key;
        let boundary_edge = st.faces_with(a, b).len() == 1;
        let (p, _) = st.placement(a, b, boundary_edge);
        let removes = match st.check(a, b, &p) {
            Verdict::Illegal => continue,
            Verdict::Legal { removes } => removes,
        };
        let left = st.edge_count - target_edges;
        if removes > left || left - removes == 1 {
            deferred.push(cand);
            continue;
        }
        trace.collapses.push(st.collapse(a, b, p));

        let ring = st.neighbors(a);
        st.version[a] += 1;
        for &x in &ring {
            st.version[x] += 1;
        }
        let mut keys: Vec<(usize, usize)> = Vec::new();
        for &x in std::iter::once(&a).chain(ring.iter()) {
            for y in st.neighbors(x) {
                keys.push(key(x, y));
            }
        }
        keys.sort_unstable();
        keys.dedup();
        for (x, y) in keys {
            heap.push(Reverse(st.candidate(x, y)));
        }
        heap.extend(deferred.drain(..).map(Reverse));
    }

    let (out, origin) = trace.replay_with_origin(mesh);
    trace.target_edges = out
        .edges()
        .iter()
        .map(|e| {
            let k = key(origin[e.vertices[0]], origin[e.vertices[1]]);
            *st.ids.get(&k).expect("surviving edge is tracked")
        })
        .collect();
    Ok((out, trace))
}
