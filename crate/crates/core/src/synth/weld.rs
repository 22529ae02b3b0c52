//! Contact welding. Each near pair of vertices from different body segments
//! is fused by removing both vertex fans and stitching the two boundary
//! loops with a strip of triangles, which opens a handle between the
//! surfaces. Loop vertices keep their own template identity; the two fused
//! centers disappear.

use std::collections::{HashMap, HashSet};

use nalgebra::Point3;

use crate::mesh::{Mesh, MeshError};

/// Rest-pose distance below which two template vertices count as neighbors
/// on the body and are never welded.
pub const MIN_REST_SEPARATION: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct WeldResult {
    pub mesh: Mesh,
    pub source: Vec<usize>,
    pub welds: usize,
}

/// Ordered ring of `v` following the orientation of its fan, or `None` for
/// boundary or non-disk vertices.
fn ordered_ring(mesh: &Mesh, v: usize, fan: &[usize]) -> Option<Vec<usize>> {
    let mut next: HashMap<usize, usize> = HashMap::with_capacity(fan.len());
    for &f in fan {
        let t = mesh.faces()[f];
        let i = t.iter().position(|&x| x == v)?;
        next.insert(t[(i + 1) % 3], t[(i + 2) % 3]);
    }
    let start = *next.keys().min()?;
    let mut ring = vec![start];
    let mut cur = next[&start];
    while cur != start {
        if ring.len() > fan.len() {
            return None;
        }
        ring.push(cur);
        cur = *next.get(&cur)?;
    }
    (ring.len() == fan.len()).then_some(ring)
}

/// Triangles joining loop `xs` (traversed forward) to loop `ys` (traversed
/// backward), choosing the shorter diagonal at each step.
fn stitch(p: &[Point3<f64>], xs: &[usize], ys_forward: &[usize]) -> Vec<[usize; 3]> {
    let n = xs.len();
    let m = ys_forward.len();
    let mut ys: Vec<usize> = ys_forward.iter().rev().copied().collect();
    // Rotate so the start of `ys` is the vertex nearest `xs[0]`.
    let shift = (0..m)
        .min_by(|&a, &b| {
            (p[ys[a]] - p[xs[0]])
                .norm_squared()
                .total_cmp(&(p[ys[b]] - p[xs[0]]).norm_squared())
                .then(a.cmp(&b))
        })
        .unwrap_or(0);
    ys.rotate_left(shift);
    let x = |i: usize| xs[i % n];
    let y = |k: usize| ys[k % m];
    let (mut i, mut k) = (0, 0);
    let mut out = Vec::with_capacity(n + m);
    while i < n || k < m {
        // The path starts with an x step, ends with a y step and never
        // touches (n, 0); otherwise the wrap-around revisits a pair.
        let advance_x = if i == n || (i + 1 == n && k == 0) {
            false
        } else if i == 0 || k + 1 == m {
            true
        } else {
            (p[x(i + 1)] - p[y(k)]).norm_squared() <= (p[x(i)] - p[y(k + 1)]).norm_squared()
        };
        if advance_x {
            out.push([x(i), x(i + 1), y(k)]);
            i += 1;
        } else {
            out.push([x(i), y(k + 1), y(k)]);
            k += 1;
        }
    }
    out
}

/// Fuses every eligible contact. `source` maps mesh vertices to template
/// vertices, `segments` gives the dominant joint per template vertex.
pub fn weld_contacts(
    mesh: &Mesh,
    source: &[usize],
    template: &Mesh,
    segments: &[usize],
    distance: f64,
) -> Result<WeldResult, MeshError> {
    let p = mesh.vertices();
    let rest = template.vertices();
    let cell = |q: &Point3<f64>| {
        (
            (q.x / distance).floor() as i64,
            (q.y / distance).floor() as i64,
            (q.z / distance).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (v, q) in p.iter().enumerate() {
        grid.entry(cell(q)).or_default().push(v);
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (a, q) in p.iter().enumerate() {
        let (cx, cy, cz) = cell(q);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &b in bucket {
                        if b <= a {
                            continue;
                        }
                        let d = (p[b] - q).norm();
                        if d >= distance || segments[source[a]] == segments[source[b]] {
                            continue;
                        }
                        if (rest[source[a]] - rest[source[b]]).norm() <= MIN_REST_SEPARATION {
                            continue;
                        }
                        candidates.push((d, a, b));
                    }
                }
            }
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let vf = mesh.vertex_faces();
    let nbrs = mesh.vertex_neighbors();
    let boundary = mesh.is_boundary_vertex();
    let mut used = vec![false; p.len()];
    let mut dropped = vec![false; mesh.face_count()];
    let mut added: Vec<[usize; 3]> = Vec::new();
    let mut welds = 0;
    for &(_, a, b) in &candidates {
        if boundary[a] || boundary[b] {
            continue;
        }
        let closed = |v: usize| std::iter::once(v).chain(nbrs[v].iter().copied());
        if closed(a).chain(closed(b)).any(|v| used[v]) {
            continue;
        }
        let ring_a: HashSet<usize> = nbrs[a].iter().copied().collect();
        // The rings must be disjoint and not already joined by an edge.
        if closed(b).any(|v| ring_a.contains(&v) || v == a)
            || nbrs[b].iter().any(|&v| nbrs[v].iter().any(|u| ring_a.contains(u)))
        {
            continue;
        }
        let (Some(la), Some(lb)) = (ordered_ring(mesh, a, &vf[a]), ordered_ring(mesh, b, &vf[b])) else {
            continue;
        };
        for v in closed(a).chain(closed(b)) {
            used[v] = true;
        }
        for &f in vf[a].iter().chain(&vf[b]) {
            dropped[f] = true;
        }
        added.extend(stitch(p, &la, &lb));
        welds += 1;
    }
    if welds == 0 {
        return Ok(WeldResult {
            mesh: mesh.clone(),
            source: source.to_vec(),
            welds,
        });
    }
    let mut faces: Vec<[usize; 3]> = mesh
        .faces()
        .iter()
        .zip(&dropped)
        .filter(|(_, &d)| !d)
        .map(|(f, _)| *f)
        .collect();
    faces.extend(added);
    let (welded, map) = Mesh::new(p.to_vec(), faces)?.compacted();
    let mut new_source = vec![0; welded.vertex_count()];
    for (old, m) in map.iter().enumerate() {
        if let Some(v) = m {
            new_source[*v] = source[old];
        }
    }
    Ok(WeldResult {
        mesh: welded,
        source: new_source,
        welds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::primitives;

    /// Two unit icospheres almost touching along x.
    fn pair() -> (Mesh, Vec<usize>, Mesh, Vec<usize>) {
        let s = primitives::icosphere(2);
        let n = s.vertex_count();
        let xmax = s.vertices().iter().map(|q| q.x).fold(f64::MIN, f64::max);
        let gap = 2.0 * xmax + 1e-3;
        let mut verts = s.vertices().to_vec();
        // Mirror image across a plane just past the extreme vertex.
        verts.extend(s.vertices().iter().map(|q| Point3::new(gap - q.x, q.y, q.z)));
        let mut faces = s.faces().to_vec();
        faces.extend(s.faces().iter().map(|f| [f[0] + n, f[2] + n, f[1] + n]));
        let mesh = Mesh::new(verts, faces).unwrap();
        // At rest the spheres are far apart.
        let rest = mesh.with_positions(
            mesh.vertices()
                .iter()
                .enumerate()
                .map(|(v, q)| if v < n { *q } else { q + nalgebra::Vector3::x() * 10.0 })
                .collect(),
        );
        let segments = (0..2 * n).map(|v| v / n).collect();
        let source = (0..2 * n).collect();
        (mesh, source, rest, segments)
    }

    #[test]
    fn touching_spheres_fuse_into_one_surface() {
        let (mesh, source, template, segments) = pair();
        let out = weld_contacts(&mesh, &source, &template, &segments, 0.01).unwrap();
        assert!(out.welds >= 1);
        out.mesh.validate_manifold().unwrap();
        assert_eq!(out.mesh.face_components().1, 1);
        // Two spheres (chi 4); each tube lowers chi by 2.
        assert_eq!(out.mesh.euler_characteristic(), 4 - 2 * out.welds as i64);
        assert_eq!(out.source.len(), out.mesh.vertex_count());
        assert_eq!(out.mesh.vertex_count(), mesh.vertex_count() - 2 * out.welds);
    }

    #[test]
    fn same_segment_pairs_are_ignored() {
        let (mesh, source, template, _) = pair();
        let segments = vec![0; mesh.vertex_count()];
        let out = weld_contacts(&mesh, &source, &template, &segments, 0.01).unwrap();
        assert_eq!(out.welds, 0);
        assert_eq!(out.mesh, mesh);
    }

    proptest::proptest! {
        #[test]
        fn stitch_uses_each_pair_once(n in 3usize..12, m in 3usize..12, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<Point3<f64>> = (0..n + m)
                .map(|_| Point3::new(rng.gen(), rng.gen(), rng.gen()))
                .collect();
            let xs: Vec<usize> = (0..n).collect();
            let ys: Vec<usize> = (n..n + m).collect();
            let tris = stitch(&p, &xs, &ys);
            proptest::prop_assert_eq!(tris.len(), n + m);
            let mut directed = HashSet::new();
            for t in &tris {
                for j in 0..3 {
                    proptest::prop_assert!(directed.insert((t[j], t[(j + 1) % 3])));
                }
            }
            // Loop edges appear in the loops' own direction.
            for i in 0..n {
                proptest::prop_assert!(directed.contains(&(xs[i], xs[(i + 1) % n])));
            }
            for k in 0..m {
                proptest::prop_assert!(directed.contains(&(ys[k], ys[(k + 1) % m])));
            }
            // Every cross edge is shared by exactly two strip triangles.
            for &(a, b) in &directed {
                if (a < n) != (b < n) {
                    proptest::prop_assert!(directed.contains(&(b, a)));
                }
            }
        }
    }
}
