//! Scan cleanup: duplicate and non-manifold face removal, orientation
//! harmonization, and largest-component extraction.

use std::collections::VecDeque;

use thiserror::Error;

use super::{fan_groups, Mesh, MeshError};
use crate::decimate::{qslim_decimate, DecimateError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Decimate(#[from] DecimateError),
}

fn face_key(f: &[usize; 3]) -> [usize; 3] {
    let mut k = *f;
    k.sort_unstable();
    k
}

/// Faces to delete so no edge has more than two incident faces: the
/// smallest-area extras go first, higher index first on equal area.
fn overfull_edge_faces(mesh: &Mesh) -> Vec<usize> {
    let mut drop = Vec::new();
    for e in mesh.edges().iter().filter(|e| e.faces.len() > 2) {
        let mut fs: Vec<usize> = e.faces.to_vec();
        fs.sort_by(|&a, &b| {
            mesh.face_area(b)
                .total_cmp(&mesh.face_area(a))
                .then(a.cmp(&b))
        });
        drop.extend_from_slice(&fs[2..]);
    }
    drop
}

/// Faces of all but the largest fan at each pinched vertex.
fn pinched_vertex_faces(mesh: &Mesh) -> Vec<usize> {
    let mut drop = Vec::new();
    for (v, faces) in mesh.vertex_faces().iter().enumerate() {
        if faces.len() < 2 {
            continue;
        }
        let (group, count) = fan_groups(mesh.faces(), v, faces);
        if count < 2 {
            continue;
        }
        let mut area = vec![0.0; count];
        for (i, &f) in faces.iter().enumerate() {
            area[group[i]] += mesh.face_area(f);
        }
        let keep = (0..count)
            .max_by(|&a, &b| area[a].total_cmp(&area[b]).then(b.cmp(&a)))
            .unwrap();
        drop.extend(faces.iter().zip(&group).filter(|(_, &g)| g != keep).map(|(&f, _)| f));
    }
    drop
}

/// Flips faces so neighbors agree on orientation, component by component.
/// Faces that cannot be made consistent (non-orientable pieces) are returned
/// for deletion. Closed components end up with positive signed volume.
fn harmonize(faces: &mut [[usize; 3]], mesh: &Mesh) -> Vec<usize> {
    let n = faces.len();
    let mut seen = vec![false; n];
    let mut conflicts = Vec::new();
    let directed = |f: &[usize; 3], a: usize, b: usize| (0..3).any(|k| f[k] == a && f[(k + 1) % 3] == b);
    let face_edges: Vec<[usize; 3]> = (0..n).map(|f| mesh.face_edges(f)).collect();
    for seed in 0..n {
        if seen[seed] {
            continue;
        }
        seen[seed] = true;
        let mut component = vec![seed];
        let mut queue = VecDeque::from([seed]);
        let mut closed = true;
        while let Some(f) = queue.pop_front() {
            for &e in &face_edges[f] {
                let edge = &mesh.edges()[e];
                if edge.faces.len() != 2 {
                    closed = false;
                    continue;
                }
                let g = if edge.faces[0] == f { edge.faces[1] } else { edge.faces[0] };
                let [a, b] = edge.vertices;
                let same = directed(&faces[f], a, b) == directed(&faces[g], a, b);
                if !seen[g] {
                    seen[g] = true;
                    if same {
                        faces[g].swap(1, 2);
                    }
                    component.push(g);
                    queue.push_back(g);
                } else if same {
                    conflicts.push(f.max(g));
                }
            }
        }
        if closed && conflicts.is_empty() {
            let volume: f64 = component
                .iter()
                .map(|&f| {
                    let [a, b, c] = faces[f].map(|v| mesh.vertices()[v].coords);
                    a.dot(&b.cross(&c))
                })
                .sum();
            if volume < 0.0 {
                for &f in &component {
                    faces[f].swap(1, 2);
                }
            }
        }
    }
    conflicts.sort_unstable();
    conflicts.dedup();
    conflicts
}

/// Repairs connectivity by face deletion only and keeps the largest
/// connected component by area. Loops until nothing changes; a mesh that is
/// already a clean, consistently oriented single component is returned as is.
pub fn repair(mesh: &Mesh) -> Result<Mesh, MeshError> {
    Ok(repair_tracked(mesh)?.0)
}

/// [`repair`] plus the map from input vertices to output vertices.
pub fn repair_tracked(mesh: &Mesh) -> Result<(Mesh, Vec<Option<usize>>), MeshError> {
    let mut current = mesh.clone();
    let mut origin: Vec<Option<usize>> = (0..mesh.vertex_count()).map(Some).collect();
    let compose = |origin: &mut Vec<Option<usize>>, map: &[Option<usize>]| {
        for o in origin.iter_mut() {
            *o = o.and_then(|v| map[v]);
        }
    };
    loop {
        let n = current.face_count();
        let mut delete = vec![false; n];

        let mut seen: Vec<([usize; 3], usize)> =
            current.faces().iter().enumerate().map(|(i, f)| (face_key(f), i)).collect();
        seen.sort_unstable();
        for w in seen.windows(2) {
            if w[0].0 == w[1].0 {
                delete[w[1].1] = true;
            }
        }
        for f in 0..n {
            if current.face_area(f) <= 0.0 {
                delete[f] = true;
            }
        }
        if !delete.iter().any(|&d| d) {
            for f in overfull_edge_faces(&current) {
                delete[f] = true;
            }
        }
        if !delete.iter().any(|&d| d) {
            for f in pinched_vertex_faces(&current) {
                delete[f] = true;
            }
        }
        if !delete.iter().any(|&d| d) {
            let mut faces = current.faces().to_vec();
            let conflicts = harmonize(&mut faces, &current);
            if conflicts.is_empty() {
                if faces != current.faces() {
                    current = Mesh::new(current.vertices().to_vec(), faces)?;
                }
            } else {
                for f in conflicts {
                    delete[f] = true;
                }
            }
        }
        if !delete.iter().any(|&d| d) {
            let (component, count) = current.face_components();
            if count > 1 {
                let mut area = vec![0.0; count];
                for (f, &c) in component.iter().enumerate() {
                    area[c] += current.face_area(f);
                }
                let keep = (0..count)
                    .max_by(|&a, &b| area[a].total_cmp(&area[b]).then(b.cmp(&a)))
                    .unwrap();
                for (f, &c) in component.iter().enumerate() {
                    delete[f] = c != keep;
                }
            }
        }
        if !delete.iter().any(|&d| d) {
            let (compact, map) = current.compacted();
            compose(&mut origin, &map);
            return Ok((compact, origin));
        }
        let keep: Vec<usize> = (0..n).filter(|&f| !delete[f]).collect();
        let (next, map) = current.subset_faces(&keep)?;
        compose(&mut origin, &map);
        current = next;
    }
}

/// Repairs the mesh, keeps its largest component and decimates it to
/// exactly `target_edges` edges.
pub fn preprocess(mesh: &Mesh, target_edges: usize) -> Result<Mesh, PreprocessError> {
    let clean = repair(mesh)?;
    let (out, _) = qslim_decimate(&clean, target_edges)?;
    out.validate_manifold()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{primitives, Manifold};
    use nalgebra::{Point3, Vector3};

    fn merge(a: &Mesh, b: &Mesh) -> Mesh {
        let mut v = a.vertices().to_vec();
        v.extend_from_slice(b.vertices());
        let off = a.vertex_count();
        let mut f = a.faces().to_vec();
        f.extend(b.faces().iter().map(|t| t.map(|x| x + off)));
        Mesh::new(v, f).unwrap()
    }

    #[test]
    fn keeps_larger_tetrahedron() {
        let small = primitives::tetrahedron();
        let big = primitives::tetrahedron()
            .transformed(&(nalgebra::Matrix3::identity() * 2.0), &Vector3::new(5.0, 0.0, 0.0));
        let out = repair(&merge(&small, &big)).unwrap();
        assert_eq!(out.face_count(), 4);
        assert!(out.vertices().iter().all(|p| p.x > 3.0));
        let out = preprocess(&merge(&small, &big), 6).unwrap();
        assert_eq!(out.edge_count(), 6);
    }

    #[test]
    fn clean_icosphere_untouched() {
        let ico = primitives::icosphere(2);
        let out = preprocess(&ico, ico.edge_count()).unwrap();
        assert_eq!(out.faces(), ico.faces());
        assert_eq!(out.vertices(), ico.vertices());
    }

    #[test]
    fn icosphere_to_480_edges() {
        let out = preprocess(&primitives::icosphere(3), 480).unwrap();
        assert_eq!(out.edge_count(), 480);
        assert_eq!(out.validate_manifold().unwrap(), Manifold::Closed);
        assert_eq!(out.euler_characteristic(), 2);
    }

    #[test]
    fn fin_face_is_removed() {
        let mut m = primitives::icosphere(1);
        let [a, b, _] = m.faces()[0];
        let mut v = m.vertices().to_vec();
        // A small fin: the smallest of the three faces on edge (a, b).
        v.push(Point3::from(nalgebra::center(&v[a], &v[b]).coords * 1.05));
        let mut f = m.faces().to_vec();
        f.push([a, b, v.len() - 1]);
        m = Mesh::new(v, f).unwrap();
        assert!(m.validate_manifold().is_err());
        let out = repair(&m).unwrap();
        assert_eq!(out.validate_manifold().unwrap(), Manifold::Closed);
        assert_eq!(out.face_count(), 80);
    }

    #[test]
    fn flipped_faces_are_reoriented() {
        let ico = primitives::icosphere(1);
        let mut f = ico.faces().to_vec();
        for t in f.iter_mut().step_by(3) {
            t.swap(0, 1);
        }
        for t in &mut f {
            t.swap(1, 2);
        }
        let out = repair(&Mesh::new(ico.vertices().to_vec(), f).unwrap()).unwrap();
        assert_eq!(out.validate_manifold().unwrap(), Manifold::Closed);
        for fi in 0..out.face_count() {
            assert!(out.face_normal(fi).unwrap().dot(&out.face_centroid(fi).coords) > 0.0);
        }
    }

    #[test]
    fn duplicate_faces_are_dropped() {
        let ico = primitives::icosphere(1);
        let mut f = ico.faces().to_vec();
        f.push(f[3]);
        let out = repair(&Mesh::new(ico.vertices().to_vec(), f).unwrap()).unwrap();
        assert_eq!(out.faces(), ico.faces());
    }

    #[test]
    fn preprocess_is_idempotent() {
        let mut m = primitives::capped_tube(16, 12, 0.3, 2.0);
        let mut f = m.faces().to_vec();
        f.truncate(f.len() - 5);
        m = Mesh::new(m.vertices().to_vec(), f).unwrap();
        let once = preprocess(&m, 300).unwrap();
        let twice = preprocess(&once, 300).unwrap();
        assert_eq!(once, twice);
    }
}
