use nalgebra::{Point3, Vector3};
use proptest::prelude::*;
use umesh::mesh::{edge_features, parse_mesh, preprocess, primitives, write_mesh, Manifold, Mesh, MeshFormat};

const FORMATS: [MeshFormat; 3] = [MeshFormat::Obj, MeshFormat::PlyAscii, MeshFormat::PlyBinaryLittleEndian];

#[test]
fn tetrahedron_features_have_unit_normals_and_midpoints() {
    let m = primitives::tetrahedron();
    let f = edge_features(&m).unwrap();
    assert_eq!(f.rows, 6);
    for (e, edge) in m.edges().iter().enumerate() {
        let [a, b] = edge.vertices;
        let mid = nalgebra::center(&m.vertices()[a], &m.vertices()[b]);
        let row = f.row(e);
        assert!((Vector3::new(row[0], row[1], row[2]) - mid.coords).norm() < 1e-12);
        assert!((Vector3::new(row[3], row[4], row[5]).norm() - 1.0).abs() < 1e-9);
        // Outward on a convex solid centered near the origin.
        let c = m.vertices().iter().fold(Vector3::zeros(), |s, p| s + p.coords) / 4.0;
        assert!(Vector3::new(row[3], row[4], row[5]).dot(&(mid.coords - c)) > 0.0);
    }
}

#[test]
fn closed_meshes_satisfy_edge_face_count() {
    for m in [primitives::tetrahedron(), primitives::cube(), primitives::icosphere(3), primitives::torus(12, 8, 1.0, 0.3)] {
        assert_eq!(m.validate_manifold().unwrap(), Manifold::Closed);
        assert_eq!(2 * m.edge_count(), 3 * m.face_count());
    }
    let ico = primitives::icosphere(3);
    assert_eq!((ico.vertex_count(), ico.face_count(), ico.edge_count()), (642, 1280, 1920));
}

#[test]
fn preprocess_is_idempotent_on_a_dirty_scan() {
    // Icosphere plus a stray triangle and a duplicated face.
    let base = primitives::icosphere(2);
    let mut v = base.vertices().to_vec();
    let mut f = base.faces().to_vec();
    let off = v.len();
    v.extend([Point3::new(5.0, 0.0, 0.0), Point3::new(5.1, 0.0, 0.0), Point3::new(5.0, 0.1, 0.0)]);
    f.push([off, off + 1, off + 2]);
    f.push(f[0]);
    let dirty = Mesh::new(v, f).unwrap();
    let once = preprocess(&dirty, 300).unwrap();
    let twice = preprocess(&once, 300).unwrap();
    assert_eq!(once.edge_count(), 300);
    assert_eq!(once.faces(), twice.faces());
    assert_eq!(once.vertices(), twice.vertices());
    assert_eq!(once.euler_characteristic(), 2);
}

fn jittered(level: usize, seed: u64) -> Mesh {
    use rand::{Rng, SeedableRng};
    let m = primitives::icosphere(level);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let v = m
        .vertices()
        .iter()
        .map(|p| p * rng.gen_range(0.5..2.0) + Vector3::new(rng.gen_range(-1.0..1.0), 0.0, rng.gen_range(-1.0..1.0)))
        .collect();
    m.with_positions(v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn write_then_parse_round_trips(level in 0usize..3, seed in any::<u64>(), fmt in 0usize..3) {
        let m = jittered(level, seed);
        let bytes = write_mesh(&m, FORMATS[fmt]);
        let back = parse_mesh(&bytes, FORMATS[fmt]).unwrap();
        prop_assert_eq!(back.faces(), m.faces());
        for (a, b) in back.vertices().iter().zip(m.vertices()) {
            prop_assert!((a - b).norm() < 1e-6);
        }
    }
}
