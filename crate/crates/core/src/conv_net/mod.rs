//! Mesh convolution over oriented edge patches and the U-shaped network.

mod checkpoint;
mod model;
mod ops;
mod patch;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use model::{edge_loss, Architecture, Layer, MeshLevels, UMeshModel, LOSS_EPSILON};
pub use ops::{gather, scatter};
pub use patch::{build_patch_table, PatchTable, PATCH};
pub use train::{evaluate, orient_levels, train, EpochLoss, History, Sample, Schedule, TrainConfig};

use thiserror::Error;

use crate::decimate::PoolingError;
use crate::mesh::EdgeFeatureMatrix;

#[derive(Debug, Error)]
pub enum ConvError {
    #[error("edge {edge} ({a}, {b}) is not a manifold edge")]
    NonManifoldEdge { edge: usize, a: usize, b: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss or gradient in epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Pooling(#[from] PoolingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One oriented convolution: gathers each edge's patch and applies `kernel`
/// (`13 k_in x k_out`, row-major) plus `bias`.
pub fn conv(
    patches: &PatchTable,
    f: &EdgeFeatureMatrix,
    kernel: &[f64],
    bias: &[f64],
) -> Result<EdgeFeatureMatrix, ConvError> {
    let k_out = bias.len();
    if f.rows != patches.len() || kernel.len() != PATCH * f.cols * k_out {
        return Err(ConvError::Shape(format!(
            "features {}x{}, kernel of {} for {} patches and {k_out} outputs",
            f.rows,
            f.cols,
            kernel.len(),
            patches.len()
        )));
    }
    let g = gather(patches, f);
    let mut out = ops::matmul(&g, kernel, f.rows, PATCH * f.cols, k_out);
    ops::add_bias(&mut out, bias);
    Ok(EdgeFeatureMatrix::from_vec(f.rows, k_out, out))
}
