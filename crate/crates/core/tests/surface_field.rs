use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Vector3};
use umesh::mesh::{primitives, Mesh};
use umesh::surface_field::{
    all_pairs_distances, geodesic_center, geodesic_distances, signal_function, SignalKind, SteinerGraph,
};

/// All-pairs shortest paths by Floyd-Warshall over the same graph.
fn floyd_warshall(g: &SteinerGraph) -> Vec<u64> {
    let n = g.node_count();
    let mut d = vec![u64::MAX; n * n];
    for u in 0..n {
        d[u * n + u] = 0;
        for (v, w) in g.neighbors(u) {
            d[u * n + v] = d[u * n + v].min(w);
        }
    }
    for k in 0..n {
        for i in 0..n {
            let dik = d[i * n + k];
            if dik == u64::MAX {
                continue;
            }
            for j in 0..n {
                let dkj = d[k * n + j];
                if dkj != u64::MAX && dik + dkj < d[i * n + j] {
                    d[i * n + j] = dik + dkj;
                }
            }
        }
    }
    d
}

#[test]
fn dijkstra_matches_floyd_warshall() {
    let m = primitives::icosphere(1);
    let g = SteinerGraph::new(&m);
    let n = g.node_count();
    let fw = floyd_warshall(&g);
    for s in 0..n {
        assert_eq!(g.shortest_paths(&[s]), fw[s * n..(s + 1) * n].to_vec());
    }
    // Symmetric and metric, exactly.
    for i in 0..n {
        for j in 0..n {
            assert_eq!(fw[i * n + j], fw[j * n + i]);
            for k in (0..n).step_by(7) {
                assert!(fw[i * n + j] <= fw[i * n + k] + fw[k * n + j]);
            }
        }
    }
}

#[test]
fn antipodal_icosphere_distance_is_near_pi() {
    let m = primitives::icosphere(3);
    let top = (0..m.vertex_count()).max_by(|&a, &b| m.vertices()[a].z.total_cmp(&m.vertices()[b].z)).unwrap();
    let p = m.vertices()[top];
    let anti = (0..m.vertex_count())
        .min_by(|&a, &b| (m.vertices()[a] + p.coords).coords.norm().total_cmp(&(m.vertices()[b] + p.coords).coords.norm()))
        .unwrap();
    assert!((m.vertices()[anti] + p.coords).coords.norm() < 1e-9);
    let d = geodesic_distances(&m, top).unwrap().distances[anti];
    assert!((PI * 0.95..=PI * 1.05).contains(&d), "{d}");
}

#[test]
fn flat_strip_distances_are_planar() {
    let m = primitives::grid(40, 3, 0.05);
    let src = 0;
    let d = geodesic_distances(&m, src).unwrap().distances;
    let p0 = m.vertices()[src];
    for (v, p) in m.vertices().iter().enumerate() {
        let e = (p - p0).norm();
        if e > 0.5 {
            assert!((d[v] - e).abs() <= 0.03 * e, "vertex {v}: {} vs {e}", d[v]);
        }
    }
}

#[test]
fn source_is_zero_and_neighbors_are_not_closer_than_shortest_edge() {
    let m = primitives::torus(20, 10, 1.0, 0.3);
    let f = geodesic_distances(&m, 7).unwrap();
    assert_eq!(f.distances[7], 0.0);
    let shortest = m.edges().iter().enumerate().filter(|(_, e)| e.vertices.contains(&7)).map(|(i, _)| m.edge_length(i)).fold(f64::INFINITY, f64::min);
    for (i, e) in m.edges().iter().enumerate() {
        if e.vertices.contains(&7) {
            let other = e.other(7);
            assert!(f.distances[other] >= shortest * (1.0 - 1e-6));
            assert!(f.distances[other] <= m.edge_length(i) + 1e-6);
        }
    }
}

/// Objective recomputed from the all-pairs matrix and lumped areas.
fn brute_force_center(m: &Mesh) -> (usize, Vec<f64>) {
    let n = m.vertex_count();
    let d = all_pairs_distances(m);
    let mut area = vec![0.0; n];
    for (f, t) in m.faces().iter().enumerate() {
        for &v in t {
            area[v] += m.face_area(f) / 3.0;
        }
    }
    let obj: Vec<f64> = (0..n).map(|p| (0..n).map(|q| area[q] * d[p * n + q] * d[p * n + q]).sum()).collect();
    let best = (0..n).min_by(|&a, &b| obj[a].total_cmp(&obj[b])).unwrap();
    (best, obj)
}

#[test]
fn center_is_the_brute_force_argmin() {
    for m in [primitives::icosphere(2), primitives::torus(12, 6, 1.0, 0.4), primitives::capped_tube(12, 24, 0.1, 1.0)] {
        let c = geodesic_center(&m).unwrap();
        let (best, obj) = brute_force_center(&m);
        assert!(obj[c] <= obj[best] * (1.0 + 1e-9), "{} vs {}", obj[c], obj[best]);
    }
}

#[test]
fn sphere_center_is_near_optimal_everywhere() {
    let m = primitives::icosphere(2);
    let (_, obj) = brute_force_center(&m);
    let c = geodesic_center(&m).unwrap();
    let min = obj.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(obj[c] <= 1.01 * min);
}

#[test]
fn limb_center_lies_in_the_middle_third() {
    let m = primitives::capped_tube(12, 30, 0.08, 1.0);
    let c = geodesic_center(&m).unwrap();
    let z = m.vertices()[c].z;
    assert!((1.0 / 3.0..=2.0 / 3.0).contains(&z), "{z}");
}

#[test]
fn center_is_invariant_to_rigid_motion() {
    // Jittered so the minimum is not shared by symmetric copies.
    let tube = primitives::capped_tube(10, 20, 0.1, 1.0);
    let v = tube
        .vertices()
        .iter()
        .enumerate()
        .map(|(i, p)| p + Vector3::new(0.0, 0.0, 0.004 * ((i * 7919) % 13) as f64 / 13.0))
        .collect();
    let m = tube.with_positions(v);
    let r: Matrix3<f64> = *Rotation3::from_euler_angles(0.3, -1.1, 0.7).matrix();
    let moved = m.transformed(&r, &Vector3::new(2.0, -3.0, 0.5));
    assert_eq!(geodesic_center(&m).unwrap(), geodesic_center(&moved).unwrap());
}

#[test]
fn height_signal_gradient_is_the_plane_slope() {
    let m = primitives::icosphere(2);
    let s = signal_function(&m, SignalKind::VerticalHeight).unwrap();
    for (f, g) in s.gradients.iter().enumerate() {
        let n = m.face_normal(f).unwrap();
        // Projection of +z onto the face plane.
        let want = Vector3::z() - n * n.z;
        assert!((g - want).norm() < 1e-9);
        if n.z.abs() < 1.0 - 1e-9 {
            assert!(g.z > 0.0);
        }
    }
}

#[test]
fn geodesic_signal_is_minimal_at_the_center() {
    let m = primitives::capped_tube(10, 20, 0.1, 1.0);
    let s = signal_function(&m, SignalKind::GeodesicFromCenter).unwrap();
    let c = s.center.unwrap();
    assert_eq!(s.values[c], 0.0);
    assert!(s.values.iter().all(|&v| v >= 0.0));
}
