mod common;

use common::{fixture, ok, run_pipeline, s, umesh};
use umesh::body::{forward, BodyParams};
use umesh::embedding::{CorrespondenceField, FieldSource, Sampling};
use umesh::mesh::{primitives, read_mesh, write_mesh_file};
use umesh::pipeline::TruthPoints;
use umesh::register::{read_points_csv, transfer_correspondence, transfer_errors};

fn error_line(stderr: &[u8]) -> serde_json::Value {
    let text = String::from_utf8_lossy(stderr);
    let last = text.lines().last().expect("an error line");
    serde_json::from_str(last).expect("machine-readable error line")
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let help = umesh(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("m0 = 12288"));

    let unknown = umesh(&["preprocess", "--frobnicate"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert_eq!(error_line(&unknown.stderr)["kind"], "usage");

    let missing = dir.path().join("absent.ply");
    let out = umesh(&["preprocess", s(&missing), s(&dir.path().join("o.ply")), "--edges", "30"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out.stderr)["exit"], 2);

    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "m0 = 12288\nbogus_knob = 1\n").unwrap();
    assert_eq!(umesh(&["--config", s(&bad_cfg), "config"]).status.code(), Some(2));
    std::fs::write(&bad_cfg, "dim = 0\n").unwrap();
    assert_eq!(umesh(&["--config", s(&bad_cfg), "config"]).status.code(), Some(2));
    std::fs::write(&bad_cfg, "[paths]\nembedding = \"nowhere.emb\"\n").unwrap();
    assert_eq!(umesh(&["--config", s(&bad_cfg), "config"]).status.code(), Some(2));

    // A file that exists but is not a mesh is a runtime failure.
    let junk = dir.path().join("junk.obj");
    std::fs::write(&junk, "v 0 0 0\nf 1 2 3\n").unwrap();
    let out = umesh(&["preprocess", s(&junk), s(&dir.path().join("o.ply")), "--edges", "30"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out.stderr)["kind"], "runtime");
}

#[test]
fn printed_defaults_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["config"]);
    let p = dir.path().join("c.toml");
    std::fs::write(&p, &text).unwrap();
    assert_eq!(ok(&["--config", s(&p), "config"]), text);
    let desk = ok(&["--desk-scale", "config"]);
    assert!(desk.contains("m0 = 1536"));
}

#[test]
fn preprocess_reaches_the_edge_count() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("sphere.obj");
    write_mesh_file(&primitives::icosphere(3), &input).unwrap();
    let output = dir.path().join("small.ply");
    ok(&["preprocess", s(&input), s(&output), "--edges", "900"]);
    let m = read_mesh(&output).unwrap();
    assert_eq!(m.edge_count(), 900);
    assert_eq!(m.euler_characteristic(), 2);
}

#[test]
fn embed_writes_a_falling_strain_curve() {
    let dir = tempfile::tempdir().unwrap();
    // The icosahedron: twelve points.
    let t = dir.path().join("ico.ply");
    write_mesh_file(&primitives::icosphere(0), &t).unwrap();
    let e = dir.path().join("ico.emb");
    ok(&["embed", "--template", s(&t), "--dim", "2", "--out", s(&e)]);
    let mut rd = csv::Reader::from_path(dir.path().join("ico.emb.strain.csv")).unwrap();
    let curve: Vec<(usize, f64)> = rd.deserialize().map(Result::unwrap).collect();
    assert_eq!(curve[0].0, 1);
    assert!(curve[1].1 < curve[0].1);
    assert!(curve.windows(2).all(|w| w[1].1 <= w[0].1));
    assert!(std::fs::read_to_string(dir.path().join("ico.emb.strain.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn register_identity_scan_is_exact_and_repeatable() {
    let f = fixture();
    let (model, prior) = f.body();
    let emb = f.embedding();
    let dir = tempfile::tempdir().unwrap();
    let mesh = dir.path().join("scan.ply");
    write_mesh_file(&model.template.with_positions(forward(&model, &prior.mean_params()).vertices), &mesh).unwrap();
    let field = dir.path().join("scan.field");
    CorrespondenceField {
        values: emb.coords.clone(),
        dim: emb.dim,
        sampling: Sampling::Vertex,
        source: FieldSource::GroundTruth,
    }
    .write_file(&field)
    .unwrap();
    let c = s(&f.config);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["--config", c, "register", "--mesh", s(&mesh), "--field", s(&field), "--out", s(out)]);
    }
    let report: toml::Value = toml::from_str(&std::fs::read_to_string(a.join("report.toml")).unwrap()).unwrap();
    let data = report["data_error"].as_float().unwrap();
    assert!(data < 1e-8, "data error {data}");
    assert_eq!(common::snapshot(&a), common::snapshot(&b));
    let params = BodyParams::from_toml(&std::fs::read_to_string(a.join("params.toml")).unwrap()).unwrap();
    let want = prior.mean_params().to_vec();
    assert!(params.to_vec().iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-4));

    // Field rows must match the scan.
    let short = dir.path().join("short.field");
    CorrespondenceField {
        values: emb.coords[..emb.dim * 10].to_vec(),
        dim: emb.dim,
        sampling: Sampling::Vertex,
        source: FieldSource::GroundTruth,
    }
    .write_file(&short)
    .unwrap();
    let out = umesh(&["--config", c, "register", "--mesh", s(&mesh), "--field", s(&short), "--out", s(&a)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_equals_the_library_transfer_metric() {
    let f = fixture();
    let work = tempfile::tempdir().unwrap();
    run_pipeline(f, work.path());
    let w = work.path();
    let (model, _) = f.body();
    let pa = read_points_csv(std::fs::File::open(w.join("raw/0/points.csv")).unwrap()).unwrap();
    let pb = read_points_csv(std::fs::File::open(w.join("raw/1/points.csv")).unwrap()).unwrap();
    let mesh_b = read_mesh(&w.join("pred/1.field.ply")).unwrap();
    let truth_a = TruthPoints::read_csv(std::fs::File::open(w.join("truth/0.truth.csv")).unwrap()).unwrap();
    let params_b = BodyParams::from_toml(&std::fs::read_to_string(w.join("truth/1.params.toml")).unwrap()).unwrap();
    let target = truth_a.on(&forward(&model, &params_b).vertices);
    let map = transfer_correspondence(&pa, &pb, &model.template);
    let errors = transfer_errors(&map, mesh_b.vertices(), &target);
    let want = errors.iter().sum::<f64>() / errors.len() as f64;

    let mut rd = csv::Reader::from_path(w.join("report.csv")).unwrap();
    let rows: Vec<(String, String, usize, f64)> = rd.deserialize().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].0.as_str(), rows[0].1.as_str(), rows[0].2), ("0", "1", pa.len()));
    assert_eq!(rows[0].3, want);

    let mut rd = csv::Reader::from_path(w.join("report.csv.cumulative.csv")).unwrap();
    let curve: Vec<(f64, f64)> = rd.deserialize().map(Result::unwrap).collect();
    assert!(curve.windows(2).all(|p| p[1].1 >= p[0].1));
    for &(t, frac) in curve.iter().step_by(10) {
        let below = errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64;
        assert_eq!(frac, below);
    }
    // Training artifacts.
    for name in ["model.ckpt", "model.ckpt.loss.csv", "model.ckpt.loss.svg", "model.ckpt.split.csv"] {
        assert!(w.join(name).is_file(), "{name}");
    }
    for name in ["params.toml", "fitted.ply", "matches.csv", "log.csv", "points.csv", "report.toml"] {
        assert!(w.join("icp/0").join(name).is_file(), "{name}");
    }
}
