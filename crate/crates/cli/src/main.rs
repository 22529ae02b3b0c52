mod commands;
mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "umesh", version, about = "Dense body-scan correspondence: preprocessing, training, prediction, registration")]
pub struct Cli {
    /// Pipeline config (TOML); see the defaults below.
    #[arg(long, global = true, env = "UMESH_CONFIG")]
    pub config: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    /// Use the desk-scale edge budget instead of the configured m0.
    #[arg(long, global = true)]
    pub desk_scale: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the default pipeline config.
    Config,
    /// Write the built-in template mesh and kinematic config.
    ExportTemplate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Repair a scan and decimate it to exactly N edges.
    Preprocess {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        edges: usize,
    },
    /// Embed a template's geodesic distances; also writes the strain curve.
    Embed {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
        /// Largest dimension on the strain curve.
        #[arg(long, default_value_t = 8)]
        max_dim: usize,
        /// Refine the classical solution by stress majorization.
        #[arg(long)]
        smacof: bool,
    },
    /// Generate a labeled synthetic dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the network on a synthetic dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict embedding coordinates for every vertex of a preprocessed scan.
    Predict {
        #[arg(long, required_unless_present = "random_baseline")]
        model: Option<PathBuf>,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where the preprocessed mesh goes [default: <out>.ply].
        #[arg(long)]
        mesh_out: Option<PathBuf>,
        /// Coordinates of uniformly random template vertices instead.
        #[arg(long)]
        random_baseline: bool,
    },
    /// Fit the body model to a scan guided by a predicted field.
    Register {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Add Laplacian-regularized per-vertex offsets after the fit.
        #[arg(long, conflicts_with = "raw")]
        nonrigid: bool,
        /// Skip fitting; match each vertex to its nearest template vertex in the embedding.
        #[arg(long)]
        raw: bool,
    },
    /// Register several scans of one subject.
    Coregister {
        /// CSV with columns `mesh,field`.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        shared_shape: bool,
    },
    /// Ground-truth template locations of a preprocessed synthetic scan.
    Truth {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        id: usize,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scan-to-scan transfer errors against ground truth.
    Eval {
        /// CSV with columns `a,b,a_points,b_points,b_mesh`.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// How a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: std::error::Error + Send + Sync + 'static> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

fn report_error(kind: &str, code: u8, message: &str) {
    eprintln!("{}", serde_json::json!({"status": "error", "kind": kind, "exit": code, "message": message}));
}

fn load_config(path: Option<&Path>, desk: bool) -> Result<PipelineConfig, Failure> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?;
            let base = p.parent().unwrap_or(Path::new("."));
            PipelineConfig::parse(&text, base).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    cfg.apply_env(|v| std::env::var(v).ok());
    if desk {
        cfg.m0 = config::DESK_M0;
    }
    cfg.validate().map_err(Failure::Usage)?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let defaults = format!("Default config:\n\n{}", PipelineConfig::default().to_toml());
    let cmd = Cli::command().after_long_help(defaults);
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                report_error("usage", 2, &e.kind().to_string());
                return ExitCode::from(2);
            }
            return ExitCode::SUCCESS;
        }
    };
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
            report_error("runtime", 1, &e.to_string());
            return ExitCode::from(1);
        }
    }
    let result = load_config(cli.config.as_deref(), cli.desk_scale).and_then(|cfg| commands::run(&cli.command, &cfg));
    match result {
        Ok(serde_json::Value::String(text)) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            let (kind, msg) = match &f {
                Failure::Usage(m) => ("usage", m.clone()),
                Failure::Runtime(e) => ("runtime", format!("{e:#}")),
            };
            report_error(kind, f.code(), &msg);
            ExitCode::from(f.code())
        }
    }
}
