//! Mini-batch Adam training with per-epoch loss history.

use std::borrow::Cow;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{MeshLevels, UMeshModel};
use super::ConvError;
use crate::embedding::CorrespondenceField;
use crate::mesh::EdgeFeatureMatrix;
use crate::surface_field::SignalKind;
use crate::synth::derive_seed;

/// One training example: a mesh hierarchy, its input features and the
/// edge-sampled ground-truth coordinates.
#[derive(Debug, Clone)]
pub struct Sample {
    pub levels: MeshLevels,
    pub input: EdgeFeatureMatrix,
    pub truth: CorrespondenceField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub schedule: Schedule,
}

/// Step-size schedule over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

impl TrainConfig {
    /// Step size used during `epoch`.
    pub fn rate(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 4,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            schedule: Schedule::Constant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochLoss>,
}

impl History {
    /// CSV with header `epoch,train_loss,val_loss`; the last column is
    /// empty without a validation set.
    pub fn write_csv(&self, w: impl Write) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "train_loss", "val_loss"])?;
        for e in &self.epochs {
            out.write_record([
                e.epoch.to_string(),
                format!("{:e}", e.train_loss),
                e.val_loss.map(|v| format!("{v:e}")).unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, cfg: &TrainConfig, rate: f64, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

/// `levels` with patch rotations redrawn from `seed` on every level built
/// with random orientation; other levels are borrowed unchanged.
pub fn orient_levels(levels: &MeshLevels, seed: u64) -> Cow<'_, MeshLevels> {
    if levels.patches.iter().all(|p| p.kind != SignalKind::Random) {
        return Cow::Borrowed(levels);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut levels = levels.clone();
    for p in &mut levels.patches {
        if p.kind == SignalKind::Random {
            *p = p.randomized(&mut rng);
        }
    }
    Cow::Owned(levels)
}

/// Mean loss over `samples` (no parameter update).
pub fn evaluate(model: &UMeshModel, samples: &[Sample], seed: u64) -> Result<f64, ConvError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let losses: Vec<f64> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let levels = orient_levels(&s.levels, derive_seed(seed, i as u64));
            let out = model.forward(&levels, &s.input)?;
            Ok(super::model::edge_loss(&out, &s.truth)?.0)
        })
        .collect::<Result<_, ConvError>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

/// Trains in place. Validation uses one fixed orientation draw per sample.
pub fn train(
    model: &mut UMeshModel,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<History, ConvError> {
    if cfg.batch_size == 0 {
        return Err(ConvError::Shape("batch size must be positive".into()));
    }
    let mut history = History::default();
    if train_set.is_empty() {
        return Ok(history);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.to_flat();
    let mut adam = Adam::new(params.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let val_seed = derive_seed(cfg.seed, u64::MAX);
    let mut batch_id = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let epoch_seed = derive_seed(cfg.seed, epoch as u64);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let levels = orient_levels(&s.levels, derive_seed(epoch_seed, i as u64));
                    model.loss_and_gradients(&levels, &s.input, &s.truth)
                })
                .collect::<Result<_, ConvError>>()?;
            let mut grad = vec![0.0; params.len()];
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(ConvError::NonFinite { epoch, batch: batch_id });
            }
            epoch_loss += loss;
            adam.step(cfg, cfg.rate(epoch), &mut params, &grad);
            model.set_flat(&params)?;
            batch_id += 1;
        }
        let val_loss = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(model, val_set, val_seed)?)
        };
        history.epochs.push(EpochLoss {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            val_loss,
        });
    }
    Ok(history)
}
