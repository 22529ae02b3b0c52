use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umesh::body::humanoid::default_body;
use umesh::embedding::{
    build_embedding, classical_mds, ground_truth_field, mds_error, strain_curve, CorrespondenceField, FieldSource,
    Sampling, TemplateEmbedding, TemplatePoint,
};
use umesh::mesh::primitives;
use umesh::surface_field::all_pairs_distances;

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn distance_matrix(points: &[f64], n: usize, dim: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] = euclid(&points[i * dim..(i + 1) * dim], &points[j * dim..(j + 1) * dim]);
        }
    }
    d
}

fn sphere_embedding() -> TemplateEmbedding {
    build_embedding(&primitives::icosphere(1), 3).unwrap()
}

#[test]
fn cycle_spectrum_matches_the_circulant_formula() {
    let n = 12;
    let pts: Vec<f64> = (0..n)
        .flat_map(|i| {
            let a = 2.0 * PI * i as f64 / n as f64;
            [a.cos(), a.sin()]
        })
        .collect();
    let d = distance_matrix(&pts, n, 2);
    let mds = classical_mds(&d, n, 2).unwrap();
    // -1/2 J D² J is circulant with first row c_j; its eigenvalues are the
    // DFT of that row.
    let sq: Vec<f64> = (0..n).map(|j| d[j] * d[j]).collect();
    let mean = sq.iter().sum::<f64>() / n as f64;
    let row: Vec<f64> = (0..n).map(|j| -0.5 * (sq[j] - 2.0 * mean + mean)).collect();
    let mut want: Vec<f64> = (0..n)
        .map(|k| (0..n).map(|j| row[j] * (2.0 * PI * (j * k) as f64 / n as f64).cos()).sum())
        .collect();
    want.sort_by(|a: &f64, b| b.total_cmp(a));
    for (a, b) in mds.eigenvalues.iter().zip(&want) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    assert!((want[0] - 6.0).abs() < 1e-9 && (want[1] - 6.0).abs() < 1e-9);
    let back = distance_matrix(&mds.coords, n, 2);
    for (a, b) in back.iter().zip(&d) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn strain_falls_with_dimension_with_diminishing_returns() {
    let m = primitives::capped_tube(8, 12, 0.1, 1.0);
    let d = all_pairs_distances(&m);
    let curve = strain_curve(&d, m.vertex_count(), &[1, 2, 3, 4, 6, 8]).unwrap();
    for w in curve.windows(2) {
        assert!(w[1].1 <= w[0].1 + 1e-12);
    }
    assert!(curve[0].1 - curve[1].1 >= curve[4].1 - curve[5].1);
}

#[test]
fn template_embedding_is_centered_and_not_too_distorted() {
    let (body, _) = default_body();
    let t = &body.template;
    let emb = build_embedding(t, 4).unwrap();
    assert_eq!(emb.dim, 4);
    for k in 0..4 {
        let mean: f64 = (0..emb.vertex_count()).map(|v| emb.omega(v)[k]).sum::<f64>() / emb.vertex_count() as f64;
        assert!(mean.abs() < 1e-6);
    }
    assert!(emb.coords.iter().all(|x| x.is_finite()));
    let d = all_pairs_distances(t);
    let med = emb.distortion_median(&d, 7);
    assert!(med <= 0.35, "median distortion {med}");
}

#[test]
fn reordering_vertices_permutes_the_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 25;
    let pts: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let d = distance_matrix(&pts, n, 3);
    let perm: Vec<usize> = (0..n).rev().collect();
    let dp: Vec<f64> = (0..n * n).map(|k| d[perm[k / n] * n + perm[k % n]]).collect();
    let a = classical_mds(&d, n, 3).unwrap();
    let b = classical_mds(&dp, n, 3).unwrap();
    for i in 0..n {
        for k in 0..3 {
            assert!((a.coords[perm[i] * 3 + k].abs() - b.coords[i * 3 + k].abs()).abs() < 1e-9);
        }
    }
}

#[test]
fn ground_truth_interpolates_vertices_and_face_centers() {
    let emb = sphere_embedding();
    let t = &emb.template;
    let mut reg: Vec<TemplatePoint> = (0..t.vertex_count()).map(|v| TemplatePoint::vertex(t, v)).collect();
    let field = ground_truth_field(t, &reg, &emb).unwrap();
    assert_eq!(field.values, emb.coords);

    reg[0] = TemplatePoint {
        face: 5,
        bary: [1.0 / 3.0; 3],
    };
    let field = ground_truth_field(t, &reg, &emb).unwrap();
    let f = t.faces()[5];
    for k in 0..3 {
        let mean = f.iter().map(|&v| emb.omega(v)[k]).sum::<f64>() / 3.0;
        assert!((field.row(0)[k] - mean).abs() < 1e-12);
    }
}

#[test]
fn nearest_neighbor_queries() {
    let emb = sphere_embedding();
    for v in 0..emb.vertex_count() {
        assert_eq!(emb.nn_query(emb.omega(v)), v);
    }
    let mid: Vec<f64> = emb.omega(3).iter().zip(emb.omega(9)).map(|(a, b)| 0.5 * (a + b)).collect();
    let hit = emb.nn_query(&mid);
    let (d3, d9) = (euclid(&mid, emb.omega(3)), euclid(&mid, emb.omega(9)));
    let dh = euclid(&mid, emb.omega(hit));
    assert!(dh <= d3.min(d9) + 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let hit = emb.nn_query(&q);
        let best = (0..emb.vertex_count()).map(|v| euclid(&q, emb.omega(v))).fold(f64::INFINITY, f64::min);
        assert_eq!(euclid(&q, emb.omega(hit)), best);
    }
}

fn field(values: Vec<f64>, dim: usize) -> CorrespondenceField {
    CorrespondenceField {
        values,
        dim,
        sampling: Sampling::Vertex,
        source: FieldSource::Predicted,
    }
}

#[test]
fn mds_error_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let truth = field(t.clone(), 4);
    assert_eq!(mds_error(&truth, &truth).unwrap(), 0.0);
    let off = [0.3, -0.4, 1.2, 0.0];
    let c = off.iter().map(|x| x * x).sum::<f64>().sqrt();
    let shifted = field(t.iter().enumerate().map(|(i, x)| x + off[i % 4]).collect(), 4);
    assert!((mds_error(&shifted, &truth).unwrap() - c).abs() < 1e-12);
    let p: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let want = (0..10).map(|r| euclid(&p[r * 4..r * 4 + 4], &t[r * 4..r * 4 + 4])).sum::<f64>() / 10.0;
    assert!((mds_error(&field(p, 4), &truth).unwrap() - want).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn euclidean_configurations_are_reconstructed(seed in any::<u64>(), dim in 1usize..4, extra in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 15;
        let pts: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = distance_matrix(&pts, n, dim);
        let mds = classical_mds(&d, n, dim).unwrap();
        let back = distance_matrix(&mds.coords, n, dim);
        for (a, b) in back.iter().zip(&d) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        // Asking for more dimensions than the data has is a rank error.
        if extra > 0 {
            prop_assert!(classical_mds(&d, n, dim + extra).is_err());
        }
    }

    #[test]
    fn random_barycentric_samples_match_direct_interpolation(seed in any::<u64>()) {
        let emb = sphere_embedding();
        let t = &emb.template;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reg: Vec<TemplatePoint> = (0..t.vertex_count())
            .map(|_| {
                let (a, b): (f64, f64) = (rng.gen(), rng.gen());
                let (a, b) = if a + b > 1.0 { (1.0 - a, 1.0 - b) } else { (a, b) };
                TemplatePoint { face: rng.gen_range(0..t.face_count()), bary: [a, b, 1.0 - a - b] }
            })
            .collect();
        let got = ground_truth_field(t, &reg, &emb).unwrap();
        for (i, tp) in reg.iter().enumerate() {
            let f = t.faces()[tp.face];
            for k in 0..3 {
                let want = tp.bary[0] * emb.coords[f[0] * 3 + k] + tp.bary[1] * emb.coords[f[1] * 3 + k] + tp.bary[2] * emb.coords[f[2] * 3 + k];
                prop_assert!((got.values[i * 3 + k] - want).abs() < 1e-12);
            }
        }
    }
}
