use std::collections::HashMap;

use nalgebra::{Point3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umesh::body::humanoid::default_body;
use umesh::conv_net::{
    build_patch_table, conv, edge_loss, read_checkpoint, train, write_checkpoint, Architecture, ConvError, MeshLevels,
    Sample, Schedule, TrainConfig, UMeshModel, LOSS_EPSILON, PATCH,
};
use umesh::embedding::{build_embedding, CorrespondenceField, FieldSource, Sampling};
use umesh::mesh::{primitives, EdgeFeatureMatrix, Mesh};
use umesh::pipeline::{build_levels, centered_features, decimate_to, prepare_synth};
use umesh::surface_field::{signal_function, SignalKind};
use umesh::synth::{generate_scan, SynthSpec};

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> EdgeFeatureMatrix {
    EdgeFeatureMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn edge_field(m: &EdgeFeatureMatrix) -> CorrespondenceField {
    CorrespondenceField {
        values: m.data.clone(),
        dim: m.cols,
        sampling: Sampling::Edge,
        source: FieldSource::GroundTruth,
    }
}

/// Icosphere with a fixed jitter so no two patch neighbors tie under the
/// height signal.
fn jittered_sphere(levels: usize) -> Mesh {
    let m = primitives::icosphere(levels);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let v = m
        .vertices()
        .iter()
        .map(|p| p + Vector3::new(rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02)))
        .collect();
    m.with_positions(v)
}

/// Toy hierarchy: 48 edges on the fine level.
fn toy_levels(levels: usize) -> (MeshLevels, Mesh) {
    let (fine, _) = decimate_to(&jittered_sphere(1), 48).unwrap();
    assert_eq!(fine.edge_count(), 48);
    let (lv, _) = build_levels(&fine, levels, SignalKind::VerticalHeight).unwrap();
    (lv, fine)
}

fn sphere_patches() -> (umesh::conv_net::PatchTable, Mesh) {
    let m = jittered_sphere(2);
    let sig = signal_function(&m, SignalKind::VerticalHeight).unwrap();
    (build_patch_table(&m, &sig).unwrap(), m)
}

#[test]
fn conv_identity_kernel_returns_input() {
    let (t, m) = sphere_patches();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = 5;
    let f = random_matrix(m.edge_count(), k, &mut rng);
    let mut kernel = vec![0.0; PATCH * k * k];
    for i in 0..k {
        kernel[i * k + i] = 1.0;
    }
    let out = conv(&t, &f, &kernel, &vec![0.0; k]).unwrap();
    assert_eq!(out, f);
}

#[test]
fn conv_all_ones_sums_the_patch() {
    let (t, m) = sphere_patches();
    let k = 3;
    let c = [0.5, -2.0, 0.25];
    let f = EdgeFeatureMatrix::from_vec(m.edge_count(), k, c.repeat(m.edge_count()));
    let out = conv(&t, &f, &vec![1.0; PATCH * k], &[0.0]).unwrap();
    let want = 13.0 * c.iter().sum::<f64>();
    assert!(out.data.iter().all(|&x| (x - want).abs() < 1e-12));
}

#[test]
fn conv_matches_per_patch_loop() {
    let (t, m) = sphere_patches();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (ki, ko) = (4, 3);
    let f = random_matrix(m.edge_count(), ki, &mut rng);
    let kernel: Vec<f64> = (0..PATCH * ki * ko).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let bias: Vec<f64> = (0..ko).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let out = conv(&t, &f, &kernel, &bias).unwrap();
    for (e, row) in t.rows.iter().enumerate() {
        for o in 0..ko {
            let mut want = bias[o];
            for (s, &n) in row.iter().enumerate() {
                for i in 0..ki {
                    want += f.get(n, i) * kernel[(s * ki + i) * ko + o];
                }
            }
            assert!((out.get(e, o) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_rejects_mismatched_kernel() {
    let (t, m) = sphere_patches();
    let f = EdgeFeatureMatrix::zeros(m.edge_count(), 2);
    assert!(matches!(conv(&t, &f, &[0.0; 5], &[0.0]), Err(ConvError::Shape(_))));
}

#[test]
fn patches_follow_a_quarter_turn_about_z() {
    let m = jittered_sphere(2);
    let n = m.vertex_count();
    // Rotate by 90 degrees about z and relabel vertices in reverse order.
    let relabel = |v: usize| n - 1 - v;
    let mut verts = vec![Point3::origin(); n];
    for (v, p) in m.vertices().iter().enumerate() {
        verts[relabel(v)] = Point3::new(-p.y, p.x, p.z);
    }
    let mut faces: Vec<[usize; 3]> = m.faces().iter().map(|f| f.map(relabel)).collect();
    faces.reverse();
    let r = Mesh::new(verts, faces).unwrap();

    let table = |mesh: &Mesh| build_patch_table(mesh, &signal_function(mesh, SignalKind::VerticalHeight).unwrap()).unwrap();
    let (ta, tb) = (table(&m), table(&r));
    let index_b: HashMap<(usize, usize), usize> = r
        .edges()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let [a, b] = e.vertices;
            ((a.min(b), a.max(b)), i)
        })
        .collect();
    let map = |e: usize| {
        let [a, b] = m.edges()[e].vertices.map(relabel);
        index_b[&(a.min(b), a.max(b))]
    };
    for (e, row) in ta.rows.iter().enumerate() {
        let mapped: Vec<usize> = row.iter().map(|&x| map(x)).collect();
        assert_eq!(mapped, tb.rows[map(e)].to_vec(), "edge {e}");
    }
}

#[test]
fn zero_parameters_give_zero_output() {
    let (lv, mesh) = toy_levels(2);
    let model = UMeshModel::zeros(Architecture::new(2, 8, 6, 4)).unwrap();
    let out = model.forward(&lv, &centered_features(&mesh).unwrap()).unwrap();
    assert_eq!(out.rows, 48);
    assert!(out.data.iter().all(|&x| x == 0.0));
}

#[test]
fn single_level_identity_model_is_a_projection() {
    let (lv, mesh) = toy_levels(1);
    let mut model = UMeshModel::zeros(Architecture::new(1, 6, 6, 3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let head = model.layers.last_mut().unwrap();
    assert_eq!((head.taps, head.k_in, head.k_out), (1, 6, 3));
    head.weight = p.clone();
    let f0 = centered_features(&mesh).unwrap();
    let out = model.forward(&lv, &f0).unwrap();
    for e in 0..f0.rows {
        for o in 0..3 {
            let want: f64 = (0..6).map(|i| f0.get(e, i) * p[i * 3 + o]).sum();
            assert!((out.get(e, o) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let (lv, mesh) = toy_levels(2);
    let f0 = centered_features(&mesh).unwrap();
    let a = UMeshModel::new(Architecture::new(2, 8, 6, 4), 9).unwrap();
    let b = UMeshModel::new(Architecture::new(2, 8, 6, 4), 9).unwrap();
    assert_eq!(a.forward(&lv, &f0).unwrap(), b.forward(&lv, &f0).unwrap());
}

#[test]
fn gradients_match_central_differences() {
    let (lv, mesh) = toy_levels(2);
    let f0 = centered_features(&mesh).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let truth = edge_field(&random_matrix(48, 3, &mut rng));
    let mut arch = Architecture::new(2, 4, 6, 3);
    arch.widths = vec![4, 5];
    let mut model = UMeshModel::new(arch, 6).unwrap();
    // Nonzero biases so every bias gradient is exercised.
    let mut flat = model.to_flat();
    for x in flat.iter_mut() {
        if *x == 0.0 {
            *x = rng.gen_range(-0.1..0.1);
        }
    }
    model.set_flat(&flat).unwrap();
    let (_, grad) = model.loss_and_gradients(&lv, &f0, &truth).unwrap();
    assert_eq!(grad.len(), flat.len());
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let mut p = flat.clone();
        p[i] = flat[i] + h;
        model.set_flat(&p).unwrap();
        let up = model.loss_and_gradients(&lv, &f0, &truth).unwrap().0;
        p[i] = flat[i] - h;
        model.set_flat(&p).unwrap();
        let down = model.loss_and_gradients(&lv, &f0, &truth).unwrap().0;
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn loss_is_epsilon_at_the_truth_and_homogeneous() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = random_matrix(30, 4, &mut rng);
    let (loss, grad) = edge_loss(&t, &edge_field(&t)).unwrap();
    assert!((loss - LOSS_EPSILON).abs() < 1e-20);
    assert!(grad.data.iter().all(|g| g.abs() < 1e-12));

    let offset = random_matrix(30, 4, &mut rng);
    let shifted = |s: f64| {
        let data = t.data.iter().zip(&offset.data).map(|(a, o)| a + s * o).collect();
        edge_field(&EdgeFeatureMatrix::from_vec(30, 4, data))
    };
    let l1 = edge_loss(&t, &shifted(1.0)).unwrap().0;
    let l2 = edge_loss(&t, &shifted(2.0)).unwrap().0;
    assert!((l2 / l1 - 2.0).abs() < 1e-12);
}

#[test]
fn translation_changes_only_the_coordinate_channels() {
    let (lv, mesh) = toy_levels(2);
    let t = Vector3::new(0.7, -1.3, 2.1);
    let a = centered_features(&mesh).unwrap();
    let raw = umesh::mesh::edge_features(&mesh).unwrap();
    let raw_t = umesh::mesh::edge_features(&mesh.translated(&t)).unwrap();
    for e in 0..raw.rows {
        for c in 0..6 {
            let shift = if c < 3 { t[c] } else { 0.0 };
            assert!((raw_t.get(e, c) - raw.get(e, c) - shift).abs() < 1e-12);
        }
    }
    let zeroed = |f: &EdgeFeatureMatrix| {
        let mut f = f.clone();
        for r in 0..f.rows {
            f.row_mut(r)[..3].fill(0.0);
        }
        f
    };
    let model = UMeshModel::new(Architecture::new(2, 8, 6, 3), 3).unwrap();
    let out_a = model.forward(&lv, &zeroed(&a)).unwrap();
    let out_b = model.forward(&lv, &zeroed(&raw_t)).unwrap();
    for (x, y) in out_a.data.iter().zip(&out_b.data) {
        assert!((x - y).abs() < 1e-10);
    }
    // The translated mesh rebuilds the same hierarchy.
    let (lv_t, _) = build_levels(&mesh.translated(&t), 2, SignalKind::VerticalHeight).unwrap();
    assert_eq!(lv_t.patches[0].rows, lv.patches[0].rows);
}

#[test]
fn training_overfits_one_synthetic_scan() {
    let (body, prior) = default_body();
    let emb = build_embedding(&body.template, 4).unwrap();
    let spec = SynthSpec {
        seed: 11,
        amputation_probability: 0.0,
        ..SynthSpec::default()
    };
    let scan = generate_scan(&spec, body, prior, &emb).unwrap();
    let prepared = prepare_synth(&scan, body, 384, 2, SignalKind::GeodesicFromCenter).unwrap();
    let sample = prepared.sample(&emb);
    let mut model = UMeshModel::new(Architecture::new(2, 16, 6, 4), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 500,
        batch_size: 1,
        schedule: Schedule::Cosine,
        ..TrainConfig::default()
    };
    let h = train(&mut model, std::slice::from_ref(&sample), &[], &cfg).unwrap();
    let losses: Vec<f64> = h.epochs.iter().map(|e| e.train_loss).collect();
    assert_eq!(losses.len(), 500);
    // Per-step jitter under Adam is expected; 10-epoch means must fall.
    let means: Vec<f64> = losses[50..].chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
    for (i, w) in means.windows(2).enumerate() {
        assert!(w[1] < w[0], "mean loss rose in block {} ({} -> {})", i + 1, w[0], w[1]);
    }
    assert!(losses[499] < 0.1 * losses[0], "{} -> {}", losses[0], losses[499]);
}

fn small_problem() -> (Vec<Sample>, UMeshModel) {
    let (lv, mesh) = toy_levels(2);
    let f0 = centered_features(&mesh).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let samples = (0..3)
        .map(|_| Sample {
            levels: lv.clone(),
            input: f0.clone(),
            truth: edge_field(&random_matrix(48, 2, &mut rng)),
        })
        .collect();
    (samples, UMeshModel::new(Architecture::new(2, 6, 6, 2), 1).unwrap())
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let (samples, model) = small_problem();
    let mut trained = model.clone();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let h = train(&mut trained, &samples, &[], &cfg).unwrap();
    assert!(h.epochs.is_empty());
    assert_eq!(trained, model);
}

#[test]
fn same_seed_gives_the_same_history() {
    let (samples, model) = small_problem();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 2,
        seed: 42,
        ..TrainConfig::default()
    };
    let (mut a, mut b) = (model.clone(), model);
    let ha = train(&mut a, &samples[..2], &samples[2..], &cfg).unwrap();
    let hb = train(&mut b, &samples[..2], &samples[2..], &cfg).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a, b);
    assert!(ha.epochs.iter().all(|e| e.val_loss.is_some()));
    let mut csv = Vec::new();
    ha.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("epoch,train_loss,val_loss\n"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn non_finite_loss_aborts_with_the_batch() {
    let (mut samples, mut model) = small_problem();
    samples[1].truth.values[0] = f64::NAN;
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let err = train(&mut model, &samples, &[], &cfg).unwrap_err();
    assert!(matches!(err, ConvError::NonFinite { epoch: 0, .. }), "{err}");
}

#[test]
fn checkpoint_round_trip() {
    let (samples, model) = small_problem();
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    let back = read_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(back.arch, model.arch);
    for (x, y) in back.to_flat().iter().zip(model.to_flat()) {
        assert_eq!(*x, y as f32 as f64);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    back.write_file(&path).unwrap();
    assert_eq!(UMeshModel::read_file(&path).unwrap(), back);
    let s = &samples[0];
    assert!(back.forward(&s.levels, &s.input).unwrap().data.iter().all(|x| x.is_finite()));
    buf[0] = b'X';
    assert!(matches!(read_checkpoint(&mut buf.as_slice()), Err(ConvError::Checkpoint(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn patch_rows_are_valid_edges(level in 0usize..3, seed in any::<u64>()) {
        let m = primitives::icosphere(level);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sig = signal_function(&m, SignalKind::Random).unwrap();
        let t = build_patch_table(&m, &sig).unwrap().randomized(&mut rng);
        for (e, row) in t.rows.iter().enumerate() {
            prop_assert_eq!(row[0], e);
            prop_assert!(row.iter().all(|&x| x < m.edge_count()));
        }
    }
}
