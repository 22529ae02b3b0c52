//! Pipeline configuration file (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use umesh::conv_net::TrainConfig;
use umesh::register::MatchWeights;
use umesh::surface_field::SignalKind;

/// Edge budget for the paper-scale pipeline.
pub const DEFAULT_M0: usize = 12288;
/// Edge budget small enough for a laptop.
pub const DESK_M0: usize = 1536;

/// Environment variables that override the corresponding `[paths]` entry.
pub const PATH_ENV: [(&str, PathKey); 3] = [
    ("UMESH_TEMPLATE", PathKey::Template),
    ("UMESH_BODY", PathKey::Body),
    ("UMESH_EMBEDDING", PathKey::Embedding),
];

#[derive(Debug, Clone, Copy)]
pub enum PathKey {
    Template,
    Body,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Edge count scans are decimated to before they enter the network.
    pub m0: usize,
    /// Embedding dimension.
    pub dim: usize,
    /// Mesh levels of the network (each a quarter of the previous edges).
    pub levels: usize,
    /// Feature width at every level.
    pub width: usize,
    /// Patch orientation signal.
    pub signal: SignalKind,
    /// Share of the training scans held out for validation.
    pub validation_fraction: f64,
    pub paths: Paths,
    pub train: TrainConfig,
    pub register: RegisterConfig,
}

/// Optional inputs; the built-in humanoid is used when absent. Relative
/// paths are resolved against the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<PathBuf>,
    /// Kinematic config (joints, skinning weights, pose ranges).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub body: Option<PathBuf>,
    /// Precomputed embedding of the template; computed on demand otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegisterConfig {
    pub lambda_omega: f64,
    pub decay: f64,
    pub outer_iterations: usize,
    pub spatial_tail: usize,
    pub lambda_beta: f64,
    pub lambda_theta: f64,
    pub tolerance: f64,
    /// Laplacian weight of the optional non-rigid refinement.
    pub nonrigid_mu: f64,
    pub nonrigid_steps: usize,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        let w = MatchWeights::default();
        RegisterConfig {
            lambda_omega: w.lambda_omega,
            decay: w.decay,
            outer_iterations: w.outer_iterations,
            spatial_tail: w.spatial_tail,
            lambda_beta: w.lambda_beta,
            lambda_theta: w.lambda_theta,
            tolerance: w.tolerance,
            nonrigid_mu: 1.0,
            nonrigid_steps: 50,
        }
    }
}

impl RegisterConfig {
    pub fn weights(&self) -> MatchWeights {
        MatchWeights {
            lambda_omega: self.lambda_omega,
            decay: self.decay,
            outer_iterations: self.outer_iterations,
            spatial_tail: self.spatial_tail,
            lambda_beta: self.lambda_beta,
            lambda_theta: self.lambda_theta,
            tolerance: self.tolerance,
            ..MatchWeights::default()
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            m0: DEFAULT_M0,
            dim: 4,
            levels: 3,
            width: 32,
            signal: SignalKind::GeodesicFromCenter,
            validation_fraction: 0.2,
            paths: Paths::default(),
            train: TrainConfig::default(),
            register: RegisterConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses, resolves relative paths against `base` and validates.
    pub fn parse(text: &str, base: &Path) -> Result<Self, String> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        for p in [&mut cfg.paths.template, &mut cfg.paths.body, &mut cfg.paths.embedding].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for (var, key) in PATH_ENV {
            if let Some(v) = lookup(var).filter(|v| !v.is_empty()) {
                let slot = match key {
                    PathKey::Template => &mut self.paths.template,
                    PathKey::Body => &mut self.paths.body,
                    PathKey::Embedding => &mut self.paths.embedding,
                };
                *slot = Some(PathBuf::from(v));
            }
        }
    }

    /// Range checks and existence of every referenced file.
    pub fn validate(&self) -> Result<(), String> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(msg.to_string()) };
        check(self.m0 >= 12, "m0 must be at least 12")?;
        check((1..=16).contains(&self.dim), "dim must be in 1..=16")?;
        check((1..=6).contains(&self.levels), "levels must be in 1..=6")?;
        check((1..=1024).contains(&self.width), "width must be in 1..=1024")?;
        check((0.0..1.0).contains(&self.validation_fraction), "validation_fraction must be in [0, 1)")?;
        let t = &self.train;
        check(t.batch_size >= 1, "train.batch_size must be at least 1")?;
        check(t.learning_rate > 0.0 && t.learning_rate.is_finite(), "train.learning_rate must be positive")?;
        check((0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2), "train.beta1/beta2 must be in [0, 1)")?;
        check(t.epsilon > 0.0, "train.epsilon must be positive")?;
        let r = &self.register;
        check(r.lambda_omega >= 0.0 && r.lambda_beta >= 0.0 && r.lambda_theta >= 0.0, "register weights must be nonnegative")?;
        check(r.decay > 0.0 && r.decay <= 1.0, "register.decay must be in (0, 1]")?;
        check(r.outer_iterations >= 1, "register.outer_iterations must be at least 1")?;
        check(r.spatial_tail <= r.outer_iterations, "register.spatial_tail exceeds outer_iterations")?;
        check(r.tolerance >= 0.0 && r.nonrigid_mu >= 0.0, "register.tolerance and nonrigid_mu must be nonnegative")?;
        check(
            self.paths.body.is_none() || self.paths.template.is_some(),
            "paths.body requires paths.template",
        )?;
        for p in [&self.paths.template, &self.paths.body, &self.paths.embedding].into_iter().flatten() {
            if !p.is_file() {
                return Err(format!("missing file {}", p.display()));
            }
        }
        Ok(())
    }
}
