use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::json;
use umesh::body::humanoid::default_body;
use umesh::body::{forward, BodyConfig, BodyModel, BodyParams, PriorConfig};
use umesh::conv_net::{train, Architecture, UMeshModel};
use umesh::embedding::{
    build_embedding, embedding_from_distances, strain_curve, CorrespondenceField, FieldSource, MdsMethod, Sampling,
    TemplateEmbedding, TemplatePoint,
};
use umesh::mesh::{preprocess, read_mesh, write_mesh_file, Mesh, MeshFormat};
use umesh::pipeline::{predict_field, prepare_mesh, prepare_synth, project_truth, TruthPoints};
use umesh::register::{
    coregister, guided_icp, initial_params, nonrigid_refine, raw_template_points, read_points_csv, transfer_correspondence,
    transfer_errors, write_log_csv, write_matches_csv, write_points_csv, Registration, ScanInput,
};
use umesh::surface_field::all_pairs_distances;
use umesh::synth::{generate_dataset, load_scan, read_manifest, SynthSpec};

use crate::config::PipelineConfig;
use crate::plot::{line_chart, Series};
use crate::{Command, Failure};

type Res<T> = Result<T, Failure>;

/// Cumulative-error thresholds (cm).
const CUMULATIVE_STEP: f64 = 0.25;
const CUMULATIVE_MAX: f64 = 20.0;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn runtime(e: anyhow::Error) -> Failure {
    Failure::Runtime(e)
}

fn input_file(p: &Path) -> Res<&Path> {
    if p.is_file() {
        Ok(p)
    } else {
        Err(usage(format!("missing file {}", p.display())))
    }
}

fn input_dir(p: &Path) -> Res<&Path> {
    if p.is_dir() {
        Ok(p)
    } else {
        Err(usage(format!("missing directory {}", p.display())))
    }
}

fn mesh_output(p: &Path) -> Res<()> {
    MeshFormat::from_path(p)
        .map(|_| ())
        .ok_or_else(|| usage(format!("unknown mesh extension: {}", p.display())))
}

/// `path` with `suffix` appended to its file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create_parent(path: &Path) -> Res<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime)?;
    }
    Ok(())
}

fn body(cfg: &PipelineConfig) -> Res<(BodyModel, PriorConfig)> {
    match (&cfg.paths.template, &cfg.paths.body) {
        (None, _) => Ok(default_body().clone()),
        (Some(t), body) => {
            let template = read_mesh(t).with_context(|| format!("template {}", t.display())).map_err(runtime)?;
            let bc = match body {
                Some(b) => BodyConfig::read_file(b).map_err(|e| usage(format!("body config {}: {e}", b.display())))?,
                None => {
                    let (m, p) = default_body();
                    BodyConfig::from_model(m, p)
                }
            };
            Ok(bc.build(template)?)
        }
    }
}

fn embedding(cfg: &PipelineConfig, model: &BodyModel) -> Res<TemplateEmbedding> {
    match &cfg.paths.embedding {
        Some(p) => {
            let emb = TemplateEmbedding::read_file(model.template.clone(), p)
                .with_context(|| format!("embedding {}", p.display()))
                .map_err(runtime)?;
            if emb.dim != cfg.dim {
                return Err(usage(format!("embedding {} has dimension {}, config asks for {}", p.display(), emb.dim, cfg.dim)));
            }
            Ok(emb)
        }
        None => Ok(build_embedding(&model.template, cfg.dim)?),
    }
}

fn write_text(path: &Path, text: &str) -> Res<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(runtime)
}

fn create(path: &Path) -> Res<File> {
    File::create(path).with_context(|| format!("writing {}", path.display())).map_err(runtime)
}

pub fn run(command: &Command, cfg: &PipelineConfig) -> Res<serde_json::Value> {
    match command {
        Command::Config => Ok(serde_json::Value::String(cfg.to_toml())),
        Command::ExportTemplate { out } => export_template(cfg, out),
        Command::Preprocess { input, output, edges } => preprocess_cmd(input, output, *edges),
        Command::Embed {
            template,
            dim,
            out,
            max_dim,
            smacof,
        } => embed(template, *dim, out, *max_dim, *smacof),
        Command::Synth { spec, count, out } => synth(cfg, spec, *count, out),
        Command::Train { data, out } => train_cmd(cfg, data, out),
        Command::Predict {
            model,
            mesh,
            out,
            mesh_out,
            random_baseline,
        } => predict(cfg, model.as_deref(), mesh, out, mesh_out.as_deref(), *random_baseline),
        Command::Register {
            mesh,
            field,
            out,
            nonrigid,
            raw,
        } => register(cfg, mesh, field, out, *nonrigid, *raw),
        Command::Coregister {
            manifest,
            out,
            shared_shape,
        } => coregister_cmd(cfg, manifest, out, *shared_shape),
        Command::Truth { data, id, mesh, out } => truth(cfg, data, *id, mesh, out),
        Command::Eval { pairs, truth, out } => eval(cfg, pairs, truth, out),
    }
}

fn export_template(cfg: &PipelineConfig, out: &Path) -> Res<serde_json::Value> {
    let (model, prior) = body(cfg)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).map_err(runtime)?;
    write_mesh_file(&model.template, &out.join("template.ply"))?;
    write_text(&out.join("body.toml"), &BodyConfig::from_model(&model, &prior).to_toml())?;
    Ok(json!({"status": "ok", "vertices": model.template.vertex_count(), "joints": model.tree.joint_count()}))
}

fn preprocess_cmd(input: &Path, output: &Path, edges: usize) -> Res<serde_json::Value> {
    let mesh = read_mesh(input_file(input)?)?;
    mesh_output(output)?;
    let out = preprocess(&mesh, edges)?;
    create_parent(output)?;
    write_mesh_file(&out, output)?;
    Ok(json!({"status": "ok", "vertices": out.vertex_count(), "edges": out.edge_count(), "faces": out.face_count()}))
}

fn embed(template: &Path, dim: usize, out: &Path, max_dim: usize, smacof: bool) -> Res<serde_json::Value> {
    let t = read_mesh(input_file(template)?)?;
    let n = t.vertex_count();
    if dim == 0 || dim >= n {
        return Err(usage(format!("dim must be in 1..{n}")));
    }
    let dist = all_pairs_distances(&t);
    let method = if smacof { MdsMethod::Smacof } else { MdsMethod::Classical };
    let emb = embedding_from_distances(&t, &dist, dim, method)?;
    create_parent(out)?;
    emb.write_file(out)?;
    let dims: Vec<usize> = (1..=max_dim.max(dim).min(n - 1)).collect();
    let curve = strain_curve(&dist, n, &dims)?;
    let mut w = csv::Writer::from_writer(create(&sibling(out, ".strain.csv"))?);
    w.write_record(["dim", "strain"])?;
    for &(d, s) in &curve {
        w.serialize((d, s))?;
    }
    w.flush()?;
    let svg = line_chart(
        "Embedding strain",
        "dimension",
        "strain",
        &[Series {
            name: "strain",
            points: curve.iter().map(|&(d, s)| (d as f64, s)).collect(),
        }],
    );
    write_text(&sibling(out, ".strain.svg"), &svg)?;
    Ok(json!({"status": "ok", "vertices": n, "dim": dim, "strain": emb.strain}))
}

fn synth(cfg: &PipelineConfig, spec: &Path, count: usize, out: &Path) -> Res<serde_json::Value> {
    let text = std::fs::read_to_string(input_file(spec)?).map_err(|e| usage(format!("{}: {e}", spec.display())))?;
    let spec = SynthSpec::from_toml(&text).map_err(|e| usage(format!("{}: {e}", spec.display())))?;
    let (model, prior) = body(cfg)?;
    let emb = embedding(cfg, &model)?;
    let (rows, rejected) = generate_dataset(&spec, count, &model, &prior, &emb, out)?;
    let mut w = csv::Writer::from_writer(create(&out.join("rejected.csv"))?);
    w.write_record(["index", "reason"])?;
    for (i, e) in &rejected {
        w.write_record([i.to_string(), e.to_string()])?;
    }
    w.flush()?;
    Ok(json!({"status": "ok", "accepted": rows.len(), "rejected": rejected.len()}))
}

fn train_cmd(cfg: &PipelineConfig, data: &Path, out: &Path) -> Res<serde_json::Value> {
    let manifest = input_file(&input_dir(data)?.join("manifest.csv"))?.to_path_buf();
    let rows = read_manifest(File::open(&manifest).map_err(|e| runtime(e.into()))?)?;
    if rows.is_empty() {
        return Err(usage(format!("{} lists no scans", manifest.display())));
    }
    let (model, _) = body(cfg)?;
    let emb = embedding(cfg, &model)?;
    let samples = rows
        .par_iter()
        .map(|row| {
            let scan = load_scan(data, row)?;
            let prep = prepare_synth(&scan, &model, cfg.m0, cfg.levels, cfg.signal)
                .with_context(|| format!("scan {}", row.id))?;
            Ok(prep.sample(&emb))
        })
        .collect::<anyhow::Result<Vec<_>>>()
        .map_err(runtime)?;

    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_val = ((rows.len() as f64 * cfg.validation_fraction) as usize).min(rows.len() - 1);
    let mut is_val = vec![false; rows.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train_set, mut val_set) = (Vec::new(), Vec::new());
    for (i, s) in samples.into_iter().enumerate() {
        if is_val[i] {
            val_set.push(s);
        } else {
            train_set.push(s);
        }
    }
    let arch = Architecture::new(cfg.levels, cfg.width, train_set[0].input.cols, emb.dim);
    let mut net = UMeshModel::new(arch, cfg.seed)?;
    let history = train(&mut net, &train_set, &val_set, &cfg.train)?;

    create_parent(out)?;
    net.write_file(out)?;
    history.write_csv(create(&sibling(out, ".loss.csv"))?)?;
    let mut series = vec![Series {
        name: "train",
        points: history.epochs.iter().map(|e| (e.epoch as f64, e.train_loss)).collect(),
    }];
    if !val_set.is_empty() {
        series.push(Series {
            name: "validation",
            points: history.epochs.iter().filter_map(|e| e.val_loss.map(|v| (e.epoch as f64, v))).collect(),
        });
    }
    write_text(&sibling(out, ".loss.svg"), &line_chart("Training loss", "epoch", "mean edge loss", &series))?;
    let mut w = csv::Writer::from_writer(create(&sibling(out, ".split.csv"))?);
    w.write_record(["id", "role"])?;
    for (row, &v) in rows.iter().zip(&is_val) {
        w.write_record([row.id.to_string(), if v { "validation" } else { "train" }.to_string()])?;
    }
    w.flush()?;
    let last = history.epochs.last();
    Ok(json!({
        "status": "ok",
        "train_scans": train_set.len(),
        "validation_scans": val_set.len(),
        "train_loss": last.map(|e| e.train_loss),
        "val_loss": last.and_then(|e| e.val_loss),
    }))
}

fn predict(
    cfg: &PipelineConfig,
    model_path: Option<&Path>,
    mesh_path: &Path,
    out: &Path,
    mesh_out: Option<&Path>,
    random_baseline: bool,
) -> Res<serde_json::Value> {
    let mesh = read_mesh(input_file(mesh_path)?)?;
    let mesh_out = mesh_out.map(Path::to_path_buf).unwrap_or_else(|| sibling(out, ".ply"));
    mesh_output(&mesh_out)?;
    let (field, processed) = if random_baseline {
        let processed = umesh::pipeline::preprocess_scan(&mesh, cfg.m0)?;
        let (model, _) = body(cfg)?;
        let emb = embedding(cfg, &model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let values = (0..processed.vertex_count())
            .flat_map(|_| emb.omega(rng.gen_range(0..emb.vertex_count())).to_vec())
            .collect();
        let field = CorrespondenceField {
            values,
            dim: emb.dim,
            sampling: Sampling::Vertex,
            source: FieldSource::Predicted,
        };
        (field, processed)
    } else {
        let path = model_path.ok_or_else(|| usage("--model is required"))?;
        let net = UMeshModel::read_file(input_file(path)?)?;
        let prep = prepare_mesh(&mesh, cfg.m0, net.arch.levels(), cfg.signal)?;
        let field = predict_field(&net, &prep, cfg.seed)?.edge_to_vertex(&prep.mesh);
        (field, prep.mesh)
    };
    create_parent(out)?;
    create_parent(&mesh_out)?;
    field.write_file(out)?;
    write_mesh_file(&processed, &mesh_out)?;
    Ok(json!({"status": "ok", "vertices": processed.vertex_count(), "edges": processed.edge_count(), "dim": field.dim}))
}

fn read_field(path: &Path) -> Res<CorrespondenceField> {
    Ok(CorrespondenceField::read_file(input_file(path)?, FieldSource::Predicted)?)
}

fn write_registration(dir: &Path, reg: &Registration, scan: &Mesh) -> Res<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime)?;
    write_text(&dir.join("params.toml"), &reg.params.to_toml())?;
    write_mesh_file(&reg.fitted, &dir.join("fitted.ply"))?;
    write_matches_csv(create(&dir.join("matches.csv"))?, reg, scan)?;
    write_log_csv(create(&dir.join("log.csv"))?, &reg.log)?;
    write_points_csv(create(&dir.join("points.csv"))?, &reg.template_points)?;
    let report = json!({
        "mode": "guided_icp",
        "data_error": reg.data_error,
        "scan_to_model": reg.scan_to_model,
        "model_to_scan": reg.model_to_scan,
        "outer_iterations": reg.log.len(),
    });
    write_text(&dir.join("report.toml"), &toml::to_string(&report).map_err(|e| runtime(e.into()))?)
}

fn register(cfg: &PipelineConfig, mesh: &Path, field: &Path, out: &Path, nonrigid: bool, raw: bool) -> Res<serde_json::Value> {
    let scan = read_mesh(input_file(mesh)?)?;
    let field = read_field(field)?;
    let (model, prior) = body(cfg)?;
    let emb = embedding(cfg, &model)?;
    if field.dim != emb.dim || field.rows() != scan.vertex_count() {
        return Err(usage(format!(
            "field has {} rows of dimension {}; scan has {} vertices, embedding dimension {}",
            field.rows(),
            field.dim,
            scan.vertex_count(),
            emb.dim
        )));
    }
    if raw {
        let points = raw_template_points(&scan, &field, &emb);
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).map_err(runtime)?;
        write_points_csv(create(&out.join("points.csv"))?, &points)?;
        write_text(&out.join("report.toml"), "mode = \"raw\"\n")?;
        return Ok(json!({"status": "ok", "mode": "raw", "points": points.len()}));
    }
    let input = ScanInput { mesh: scan, field };
    let init = initial_params(&model, &prior, &input.mesh);
    let mut reg = guided_icp(&input, &model, &prior, &emb, &cfg.register.weights(), &init)?;
    if nonrigid {
        reg = nonrigid_refine(&reg, &input.mesh, &model, cfg.register.nonrigid_mu, cfg.register.nonrigid_steps)?;
    }
    write_registration(out, &reg, &input.mesh)?;
    Ok(json!({"status": "ok", "mode": "guided_icp", "data_error": reg.data_error, "scan_to_model": reg.scan_to_model}))
}

#[derive(Deserialize)]
struct CoregisterRow {
    mesh: PathBuf,
    field: PathBuf,
}

fn coregister_cmd(cfg: &PipelineConfig, list: &Path, out: &Path, shared_shape: bool) -> Res<serde_json::Value> {
    let base = input_file(list)?.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut rd = csv::Reader::from_path(list)?;
    let rows: Vec<CoregisterRow> = rd.deserialize().collect::<Result<_, _>>().map_err(|e| usage(format!("{}: {e}", list.display())))?;
    if rows.is_empty() {
        return Err(usage(format!("{} lists no scans", list.display())));
    }
    let (model, prior) = body(cfg)?;
    let emb = embedding(cfg, &model)?;
    let scans = rows
        .iter()
        .map(|r| {
            let mesh = read_mesh(input_file(&base.join(&r.mesh))?)?;
            let field = read_field(&base.join(&r.field))?;
            Ok(ScanInput { mesh, field })
        })
        .collect::<Res<Vec<_>>>()?;
    let regs = coregister(&scans, shared_shape, &model, &prior, &emb, &cfg.register.weights())?;
    for (i, (reg, scan)) in regs.iter().zip(&scans).enumerate() {
        write_registration(&out.join(format!("scan_{i:03}")), reg, &scan.mesh)?;
    }
    let errors: Vec<f64> = regs.iter().map(|r| r.data_error).collect();
    Ok(json!({"status": "ok", "scans": regs.len(), "shared_shape": shared_shape, "data_error": errors}))
}

fn truth(cfg: &PipelineConfig, data: &Path, id: usize, mesh: &Path, out: &Path) -> Res<serde_json::Value> {
    let manifest = input_file(&input_dir(data)?.join("manifest.csv"))?.to_path_buf();
    let rows = read_manifest(File::open(&manifest).map_err(|e| runtime(e.into()))?)?;
    let row = rows
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| usage(format!("scan {id} is not in {}", manifest.display())))?;
    let scan = load_scan(data, row)?;
    let processed = read_mesh(input_file(mesh)?)?;
    let (model, _) = body(cfg)?;
    if scan.source.iter().any(|&v| v >= model.template.vertex_count()) {
        return Err(usage("dataset was generated from a different template"));
    }
    let t = project_truth(&processed, &scan)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).map_err(runtime)?;
    t.write_csv(create(&out.join(format!("{id}.truth.csv")))?)?;
    write_text(&out.join(format!("{id}.params.toml")), &scan.params.to_toml())?;
    Ok(json!({"status": "ok", "id": id, "points": t.len()}))
}

#[derive(Deserialize)]
struct PairRow {
    a: String,
    b: String,
    a_points: PathBuf,
    b_points: PathBuf,
    b_mesh: PathBuf,
}

fn read_points(path: &Path) -> Res<Vec<TemplatePoint>> {
    Ok(read_points_csv(File::open(input_file(path)?).map_err(|e| runtime(e.into()))?)?)
}

fn eval(cfg: &PipelineConfig, pairs: &Path, truth_dir: &Path, out: &Path) -> Res<serde_json::Value> {
    let base = input_file(pairs)?.parent().unwrap_or(Path::new(".")).to_path_buf();
    input_dir(truth_dir)?;
    let mut rd = csv::Reader::from_path(pairs)?;
    let rows: Vec<PairRow> = rd.deserialize().collect::<Result<_, _>>().map_err(|e| usage(format!("{}: {e}", pairs.display())))?;
    let (model, _) = body(cfg)?;
    let template = &model.template;
    let mut truths: BTreeMap<String, TruthPoints> = BTreeMap::new();
    let mut posed: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for r in &rows {
        if !truths.contains_key(&r.a) {
            let p = truth_dir.join(format!("{}.truth.csv", r.a));
            truths.insert(r.a.clone(), TruthPoints::read_csv(File::open(input_file(&p)?).map_err(|e| runtime(e.into()))?)?);
        }
        if !posed.contains_key(&r.b) {
            let p = truth_dir.join(format!("{}.params.toml", r.b));
            let text = std::fs::read_to_string(input_file(&p)?).map_err(|e| runtime(e.into()))?;
            let params = BodyParams::from_toml(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            if params.pose.len() != model.tree.joint_count() {
                return Err(usage(format!("{}: joint count does not match the body model", p.display())));
            }
            posed.insert(r.b.clone(), forward(&model, &params).vertices);
        }
    }

    let mut per_pair = Vec::with_capacity(rows.len());
    let mut all_errors = Vec::new();
    for r in &rows {
        let pa = read_points(&base.join(&r.a_points))?;
        let pb = read_points(&base.join(&r.b_points))?;
        let mesh_b = read_mesh(input_file(&base.join(&r.b_mesh))?)?;
        let truth_a = &truths[&r.a];
        if pa.len() != truth_a.len() || pb.len() != mesh_b.vertex_count() {
            return Err(usage(format!("pair {},{}: point counts do not match the truth or mesh", r.a, r.b)));
        }
        if pa.iter().chain(&pb).any(|p| !p.is_valid(template)) {
            return Err(usage(format!("pair {},{}: template points do not lie on the template", r.a, r.b)));
        }
        let map = transfer_correspondence(&pa, &pb, template);
        let target = truth_a.on(&posed[&r.b]);
        let errors = transfer_errors(&map, mesh_b.vertices(), &target);
        let mean = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
        per_pair.push(mean);
        all_errors.extend(errors);
    }

    create_parent(out)?;
    let mut w = csv::Writer::from_writer(create(out)?);
    w.write_record(["a", "b", "points", "mean_cm"])?;
    for (r, (m, n)) in rows.iter().zip(per_pair.iter().zip(rows.iter().map(|r| truths[&r.a].len()))) {
        w.serialize((&r.a, &r.b, n, m))?;
    }
    w.flush()?;

    all_errors.sort_by(f64::total_cmp);
    let steps = (CUMULATIVE_MAX / CUMULATIVE_STEP).round() as usize;
    let curve: Vec<(f64, f64)> = (0..=steps)
        .map(|i| {
            let t = i as f64 * CUMULATIVE_STEP;
            let below = all_errors.partition_point(|&e| e <= t);
            (t, below as f64 / all_errors.len().max(1) as f64)
        })
        .collect();
    let mut w = csv::Writer::from_writer(create(&sibling(out, ".cumulative.csv"))?);
    w.write_record(["threshold_cm", "fraction"])?;
    for &(t, f) in &curve {
        w.serialize((t, f))?;
    }
    w.flush()?;
    let svg = line_chart(
        "Cumulative correspondence error",
        "error (cm)",
        "fraction of points",
        &[Series { name: "transfer", points: curve }],
    );
    write_text(&sibling(out, ".cumulative.svg"), &svg)?;
    let mean = per_pair.iter().sum::<f64>() / per_pair.len().max(1) as f64;
    Ok(json!({"status": "ok", "pairs": rows.len(), "mean_cm": mean}))
}
