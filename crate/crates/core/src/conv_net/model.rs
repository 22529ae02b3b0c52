//! Residual U-net over the edge hierarchy of one mesh.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{
    add_bias, column_sums_acc, concat, gather, matmul, matmul_nt, matmul_tn_acc, relu, relu_backward, scatter, split,
};
use super::patch::{PatchTable, PATCH};
use super::ConvError;
use crate::decimate::PoolingMap;
use crate::embedding::{CorrespondenceField, FieldSource, Sampling};
use crate::mesh::EdgeFeatureMatrix;

/// Smoothing of the per-edge distance near zero.
pub const LOSS_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Feature width per level, finest first; its length is the level count.
    pub widths: Vec<usize>,
    pub input: usize,
    pub output: usize,
    /// Residual blocks per level on each side of the U.
    pub blocks: usize,
}

impl Architecture {
    pub fn new(levels: usize, width: usize, input: usize, output: usize) -> Self {
        Architecture {
            widths: vec![width; levels],
            input,
            output,
            blocks: 1,
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<(), ConvError> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.input == 0 || self.output == 0 || self.blocks == 0
        {
            return Err(ConvError::Shape(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }
}

/// Dense layer over `taps` gathered neighbors: weight is `(taps k_in) x k_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub taps: usize,
    pub k_in: usize,
    pub k_out: usize,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl Layer {
    fn zeros(taps: usize, k_in: usize, k_out: usize, bias: bool) -> Self {
        Layer {
            taps,
            k_in,
            k_out,
            weight: vec![0.0; taps * k_in * k_out],
            bias: bias.then(|| vec![0.0; k_out]),
        }
    }

    fn fan_in(&self) -> usize {
        self.taps * self.k_in
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Returns the output and the (gathered) input kept for the backward pass.
    fn forward(&self, patches: &PatchTable, x: &EdgeFeatureMatrix) -> (EdgeFeatureMatrix, Vec<f64>) {
        debug_assert_eq!(x.cols, self.k_in);
        let g = if self.taps == PATCH {
            gather(patches, x)
        } else {
            x.data.clone()
        };
        let mut out = matmul(&g, &self.weight, x.rows, self.fan_in(), self.k_out);
        if let Some(b) = &self.bias {
            add_bias(&mut out, b);
        }
        (EdgeFeatureMatrix::from_vec(x.rows, self.k_out, out), g)
    }

    fn backward(&self, patches: &PatchTable, g: &[f64], dout: &EdgeFeatureMatrix, grad: &mut LayerGrad) -> EdgeFeatureMatrix {
        let m = dout.rows;
        matmul_tn_acc(g, &dout.data, m, self.fan_in(), self.k_out, &mut grad.weight);
        if let Some(db) = grad.bias.as_mut() {
            column_sums_acc(&dout.data, self.k_out, db);
        }
        let dg = matmul_nt(&dout.data, &self.weight, m, self.k_out, self.fan_in());
        if self.taps == PATCH {
            scatter(patches, &dg, self.k_in)
        } else {
            EdgeFeatureMatrix::from_vec(m, self.k_in, dg)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

/// conv -> rectifier -> conv, plus the input (projected when widths differ).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ResBlock {
    conv1: usize,
    conv2: usize,
    proj: Option<usize>,
}

struct BlockTape {
    g1: Vec<f64>,
    a1: Vec<f64>,
    g2: Vec<f64>,
    proj_in: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UMeshModel {
    pub arch: Architecture,
    /// All layers in a fixed order; this is also the parameter order.
    pub layers: Vec<Layer>,
    down: Vec<Vec<ResBlock>>,
    up: Vec<Vec<ResBlock>>,
    head: usize,
}

/// Per-mesh structure the model runs on: patches per level and the pooling
/// map from each level to the next coarser one.
#[derive(Debug, Clone)]
pub struct MeshLevels {
    pub patches: Vec<PatchTable>,
    pub pools: Vec<PoolingMap>,
}

impl MeshLevels {
    pub fn edge_count(&self) -> usize {
        self.patches.first().map_or(0, PatchTable::len)
    }
}

struct Tape {
    down: Vec<Vec<BlockTape>>,
    argmax: Vec<Vec<usize>>,
    up: Vec<Vec<BlockTape>>,
    head_in: Vec<f64>,
}

impl UMeshModel {
    /// All-zero parameters.
    pub fn zeros(arch: Architecture) -> Result<Self, ConvError> {
        arch.validate()?;
        let mut layers = Vec::new();
        let block = |layers: &mut Vec<Layer>, k_in: usize, k_out: usize| {
            let conv1 = layers.len();
            layers.push(Layer::zeros(PATCH, k_in, k_out, true));
            let conv2 = layers.len();
            layers.push(Layer::zeros(PATCH, k_out, k_out, true));
            let proj = (k_in != k_out).then(|| {
                layers.push(Layer::zeros(1, k_in, k_out, false));
                layers.len() - 1
            });
            ResBlock { conv1, conv2, proj }
        };
        let w = &arch.widths;
        let levels = w.len();
        let mut down = Vec::with_capacity(levels);
        for l in 0..levels {
            let mut blocks = Vec::new();
            for b in 0..arch.blocks {
                let k_in = match (l, b) {
                    (0, 0) => arch.input,
                    (_, 0) => w[l - 1],
                    _ => w[l],
                };
                blocks.push(block(&mut layers, k_in, w[l]));
            }
            down.push(blocks);
        }
        let mut up = Vec::with_capacity(levels.saturating_sub(1));
        for l in 0..levels - 1 {
            let mut blocks = Vec::new();
            for b in 0..arch.blocks {
                let k_in = if b == 0 { w[l + 1] + w[l] } else { w[l] };
                blocks.push(block(&mut layers, k_in, w[l]));
            }
            up.push(blocks);
        }
        let head = layers.len();
        layers.push(Layer::zeros(1, w[0], arch.output, true));
        Ok(UMeshModel {
            arch,
            layers,
            down,
            up,
            head,
        })
    }

    /// He-normal weights for the rectified convolutions, unit-variance-scaled
    /// weights for projections and the head, zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self, ConvError> {
        let mut model = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let gain = if layer.taps == PATCH { 2.0 } else { 1.0 };
            let normal = Normal::new(0.0, (gain / layer.fan_in() as f64).sqrt()).expect("positive std");
            for w in &mut layer.weight {
                *w = normal.sample(&mut rng);
            }
        }
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Parameters flattened layer by layer, weight before bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            if let Some(b) = &l.bias {
                out.extend_from_slice(b);
            }
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), ConvError> {
        if flat.len() != self.param_count() {
            return Err(ConvError::Shape(format!(
                "{} parameters for a model with {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.copy_from_slice(&flat[at..at + n]);
            at += n;
            if let Some(b) = l.bias.as_mut() {
                let n = b.len();
                b.copy_from_slice(&flat[at..at + n]);
                at += n;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter().flatten()).all(|x| x.is_finite()))
    }

    fn check(&self, levels: &MeshLevels, f0: &EdgeFeatureMatrix) -> Result<(), ConvError> {
        let n = self.arch.levels();
        if levels.patches.len() != n || levels.pools.len() + 1 != n {
            return Err(ConvError::Shape(format!(
                "model has {n} levels, mesh has {} patch tables and {} pooling maps",
                levels.patches.len(),
                levels.pools.len()
            )));
        }
        for (l, pool) in levels.pools.iter().enumerate() {
            if pool.source_count() != levels.patches[l].len() || pool.target_count() != levels.patches[l + 1].len() {
                return Err(ConvError::Shape(format!("pooling map {l} does not match its levels")));
            }
        }
        if f0.cols != self.arch.input || f0.rows != levels.edge_count() {
            return Err(ConvError::Shape(format!(
                "input is {}x{}, expected {}x{}",
                f0.rows,
                f0.cols,
                levels.edge_count(),
                self.arch.input
            )));
        }
        Ok(())
    }

    fn block_forward(&self, b: ResBlock, patches: &PatchTable, x: &EdgeFeatureMatrix) -> (EdgeFeatureMatrix, BlockTape) {
        let (a1, g1) = self.layers[b.conv1].forward(patches, x);
        let h = EdgeFeatureMatrix::from_vec(a1.rows, a1.cols, relu(&a1.data));
        let (mut y, g2) = self.layers[b.conv2].forward(patches, &h);
        let proj_in = match b.proj {
            Some(p) => {
                let (s, input) = self.layers[p].forward(patches, x);
                for (v, s) in y.data.iter_mut().zip(&s.data) {
                    *v += s;
                }
                Some(input)
            }
            None => {
                for (v, s) in y.data.iter_mut().zip(&x.data) {
                    *v += s;
                }
                None
            }
        };
        (
            y,
            BlockTape {
                g1,
                a1: a1.data,
                g2,
                proj_in,
            },
        )
    }

    fn block_backward(
        &self,
        b: ResBlock,
        patches: &PatchTable,
        tape: &BlockTape,
        dy: &EdgeFeatureMatrix,
        grads: &mut [LayerGrad],
    ) -> EdgeFeatureMatrix {
        let mut dh = self.layers[b.conv2].backward(patches, &tape.g2, dy, &mut grads[b.conv2]);
        relu_backward(&tape.a1, &mut dh.data);
        let mut dx = self.layers[b.conv1].backward(patches, &tape.g1, &dh, &mut grads[b.conv1]);
        let dskip = match (b.proj, &tape.proj_in) {
            (Some(p), Some(input)) => self.layers[p].backward(patches, input, dy, &mut grads[p]),
            _ => dy.clone(),
        };
        for (d, s) in dx.data.iter_mut().zip(&dskip.data) {
            *d += s;
        }
        dx
    }

    fn run(&self, levels: &MeshLevels, f0: &EdgeFeatureMatrix) -> Result<(EdgeFeatureMatrix, Tape), ConvError> {
        self.check(levels, f0)?;
        let n = self.arch.levels();
        let mut tape = Tape {
            down: Vec::with_capacity(n),
            argmax: Vec::with_capacity(n),
            up: Vec::with_capacity(n),
            head_in: Vec::new(),
        };
        let mut skips = Vec::with_capacity(n);
        let mut x = f0.clone();
        for l in 0..n {
            if l > 0 {
                let (pooled, arg) = levels.pools[l - 1].max_pool(&x)?;
                x = pooled;
                tape.argmax.push(arg);
            }
            let mut tapes = Vec::new();
            for &b in &self.down[l] {
                let (y, t) = self.block_forward(b, &levels.patches[l], &x);
                x = y;
                tapes.push(t);
            }
            tape.down.push(tapes);
            skips.push(x.clone());
        }
        let mut up_tapes: Vec<Vec<BlockTape>> = Vec::new();
        for l in (0..n - 1).rev() {
            let u = levels.pools[l].unpool(&x)?;
            x = concat(&u, &skips[l]);
            let mut tapes = Vec::new();
            for &b in &self.up[l] {
                let (y, t) = self.block_forward(b, &levels.patches[l], &x);
                x = y;
                tapes.push(t);
            }
            up_tapes.push(tapes);
        }
        up_tapes.reverse();
        tape.up = up_tapes;
        let (out, head_in) = self.layers[self.head].forward(&levels.patches[0], &x);
        tape.head_in = head_in;
        Ok((out, tape))
    }

    /// Per-edge predictions on the finest level.
    pub fn forward(&self, levels: &MeshLevels, f0: &EdgeFeatureMatrix) -> Result<EdgeFeatureMatrix, ConvError> {
        Ok(self.run(levels, f0)?.0)
    }

    pub fn predict(&self, levels: &MeshLevels, f0: &EdgeFeatureMatrix) -> Result<CorrespondenceField, ConvError> {
        let out = self.forward(levels, f0)?;
        Ok(CorrespondenceField {
            values: out.data,
            dim: self.arch.output,
            sampling: Sampling::Edge,
            source: FieldSource::Predicted,
        })
    }

    fn zero_grads(&self) -> Vec<LayerGrad> {
        self.layers
            .iter()
            .map(|l| LayerGrad {
                weight: vec![0.0; l.weight.len()],
                bias: l.bias.as_ref().map(|b| vec![0.0; b.len()]),
            })
            .collect()
    }

    /// Mean smoothed per-edge distance to `truth` and its gradient with
    /// respect to the flattened parameters.
    pub fn loss_and_gradients(
        &self,
        levels: &MeshLevels,
        f0: &EdgeFeatureMatrix,
        truth: &CorrespondenceField,
    ) -> Result<(f64, Vec<f64>), ConvError> {
        let (out, tape) = self.run(levels, f0)?;
        let (loss, dout) = edge_loss(&out, truth)?;
        let n = self.arch.levels();
        let mut grads = self.zero_grads();
        let mut dx = self.layers[self.head].backward(&levels.patches[0], &tape.head_in, &dout, &mut grads[self.head]);
        let mut dskips: Vec<Option<EdgeFeatureMatrix>> = vec![None; n];
        for l in 0..n - 1 {
            for (&b, t) in self.up[l].iter().zip(&tape.up[l]).rev() {
                dx = self.block_backward(b, &levels.patches[l], t, &dx, &mut grads);
            }
            let (du, ds) = split(&dx, self.arch.widths[l + 1]);
            dskips[l] = Some(ds);
            dx = levels.pools[l].unpool_backward(&du);
        }
        // `dx` is now the gradient of the coarsest level's output.
        for l in (0..n).rev() {
            if let Some(ds) = dskips[l].take() {
                for (d, s) in dx.data.iter_mut().zip(&ds.data) {
                    *d += s;
                }
            }
            for (&b, t) in self.down[l].iter().zip(&tape.down[l]).rev() {
                dx = self.block_backward(b, &levels.patches[l], t, &dx, &mut grads);
            }
            if l > 0 {
                dx = levels.pools[l - 1].max_pool_backward(&tape.argmax[l - 1], &dx);
            }
        }
        let mut flat = Vec::with_capacity(self.param_count());
        for g in grads {
            flat.extend(g.weight);
            if let Some(b) = g.bias {
                flat.extend(b);
            }
        }
        Ok((loss, flat))
    }
}

/// Mean over edges of `sqrt(|p - t|^2 + eps^2)` and its gradient in `p`.
pub fn edge_loss(pred: &EdgeFeatureMatrix, truth: &CorrespondenceField) -> Result<(f64, EdgeFeatureMatrix), ConvError> {
    if truth.sampling != Sampling::Edge || truth.dim != pred.cols || truth.rows() != pred.rows {
        return Err(ConvError::Shape(format!(
            "truth is {} rows x {} ({:?}), prediction {}x{}",
            truth.rows(),
            truth.dim,
            truth.sampling,
            pred.rows,
            pred.cols
        )));
    }
    let m = pred.rows;
    let d = pred.cols;
    let mut grad = EdgeFeatureMatrix::zeros(m, d);
    let mut total = 0.0;
    for e in 0..m {
        let p = pred.row(e);
        let t = truth.row(e);
        let sq: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        let r = (sq + LOSS_EPSILON * LOSS_EPSILON).sqrt();
        total += r;
        for (c, g) in grad.row_mut(e).iter_mut().enumerate() {
            *g = (p[c] - t[c]) / (r * m as f64);
        }
    }
    Ok((total / m as f64, grad))
}
