#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use umesh::body::{BodyConfig, BodyModel, PriorConfig};
use umesh::embedding::TemplateEmbedding;
use umesh::mesh::read_mesh;

pub fn umesh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_umesh"))
        .args(args)
        .env_remove("UMESH_CONFIG")
        .env_remove("UMESH_TEMPLATE")
        .env_remove("UMESH_BODY")
        .env_remove("UMESH_EMBEDDING")
        .output()
        .expect("binary runs")
}

/// Runs and requires success.
pub fn ok(args: &[&str]) -> String {
    let out = umesh(args);
    assert!(
        out.status.success(),
        "umesh {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Exported humanoid with its embedding and a config pointing at both,
/// shared by every test in the binary.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
}

impl Fixture {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn body(&self) -> (BodyModel, PriorConfig) {
        let template = read_mesh(&self.path("template.ply")).unwrap();
        BodyConfig::read_file(&self.path("body.toml")).unwrap().build(template).unwrap()
    }

    pub fn embedding(&self) -> TemplateEmbedding {
        TemplateEmbedding::read_file(self.body().0.template, &self.path("template.emb")).unwrap()
    }

    /// Config file in the fixture directory with extra TOML appended.
    pub fn config_with(&self, name: &str, extra: &str) -> PathBuf {
        let p = self.path(name);
        let text = format!(
            "{extra}\n[paths]\ntemplate = \"template.ply\"\nbody = \"body.toml\"\nembedding = \"template.emb\"\n"
        );
        std::fs::write(&p, text).unwrap();
        p
    }
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        ok(&["export-template", "--out", s(dir.path())]);
        let t = dir.path().join("template.ply");
        let e = dir.path().join("template.emb");
        ok(&["embed", "--template", s(&t), "--dim", "4", "--out", s(&e)]);
        let mut f = Fixture {
            dir,
            config: PathBuf::new(),
        };
        f.config = f.config_with("pipeline.toml", "");
        f
    })
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Small synth, train, predict, register, truth and eval run inside `work`.
/// Scans 0 and 1 are evaluated as the pair (0, 1).
pub fn run_pipeline(f: &Fixture, work: &Path) {
    std::fs::create_dir_all(work).unwrap();
    let spec = work.join("spec.toml");
    std::fs::write(&spec, "seed = 5\n").unwrap();
    let cfg = work.join("pipe.toml");
    let paths = format!(
        "[paths]\ntemplate = \"{}\"\nbody = \"{}\"\nembedding = \"{}\"\n",
        s(&f.path("template.ply")),
        s(&f.path("body.toml")),
        s(&f.path("template.emb"))
    );
    std::fs::write(
        &cfg,
        format!("seed = 3\nm0 = 1536\nlevels = 2\nwidth = 8\nvalidation_fraction = 0.34\n{paths}\n[train]\nepochs = 3\nbatch_size = 1\n"),
    )
    .unwrap();
    let c = s(&cfg);
    let data = work.join("data");
    ok(&["--config", c, "synth", "--spec", s(&spec), "--count", "3", "--out", s(&data)]);
    let ckpt = work.join("model.ckpt");
    ok(&["--config", c, "train", "--data", s(&data), "--out", s(&ckpt)]);
    for id in 0..2 {
        let field = work.join(format!("pred/{id}.field"));
        let mesh = work.join(format!("pred/{id}.field.ply"));
        let scan = data.join(format!("scan_{id:05}.ply"));
        ok(&["--config", c, "predict", "--model", s(&ckpt), "--mesh", s(&scan), "--out", s(&field)]);
        ok(&["--config", c, "register", "--mesh", s(&mesh), "--field", s(&field), "--out", s(&work.join(format!("raw/{id}"))), "--raw"]);
        ok(&["--config", c, "truth", "--data", s(&data), "--id", &id.to_string(), "--mesh", s(&mesh), "--out", s(&work.join("truth"))]);
    }
    ok(&[
        "--config", c, "register", "--mesh", s(&work.join("pred/0.field.ply")), "--field", s(&work.join("pred/0.field")),
        "--out", s(&work.join("icp/0")),
    ]);
    std::fs::write(
        work.join("pairs.csv"),
        "a,b,a_points,b_points,b_mesh\n0,1,raw/0/points.csv,raw/1/points.csv,pred/1.field.ply\n",
    )
    .unwrap();
    ok(&["--config", c, "eval", "--pairs", s(&work.join("pairs.csv")), "--truth", s(&work.join("truth")), "--out", s(&work.join("report.csv"))]);
}
