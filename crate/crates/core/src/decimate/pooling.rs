use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Point3;
use thiserror::Error;

use super::CollapseTrace;
use crate::mesh::EdgeFeatureMatrix;

/// Entries below this weight are left out of the max-pool receptive field.
pub const MAX_POOL_THRESHOLD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum PoolingError {
    #[error("feature matrix has {got} rows, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("malformed pooling map: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sparse row-stochastic `n x m` matrix taking fine-level edge features
/// (`m` edges) to coarse-level ones (`n` edges).
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingMap {
    source: usize,
    target: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    support_ptr: Vec<usize>,
    support: Vec<usize>,
    col_sum: Vec<f64>,
    /// `(fine edge, donor)`: fine edges no row reaches copy their donor on unpooling.
    fallback: Vec<(usize, usize)>,
}

fn check_rows(f: &EdgeFeatureMatrix, expected: usize) -> Result<(), PoolingError> {
    if f.rows != expected {
        return Err(PoolingError::ShapeMismatch {
            expected,
            got: f.rows,
        });
    }
    Ok(())
}

impl PoolingMap {
    pub fn identity(m: usize) -> Self {
        let rows = (0..m).map(|i| vec![(i, 1.0)]).collect();
        Self::from_rows(m, rows, |_| unreachable!("identity has no unsupported columns"))
    }

    /// Builds the map from per-row sparse entries (column, weight). Rows are
    /// renormalized; `donor` picks the stand-in for each column no row uses.
    fn from_rows(m: usize, rows: Vec<Vec<(usize, f64)>>, donor: impl Fn(&[f64]) -> Vec<(usize, usize)>) -> Self {
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        let mut support_ptr = vec![0];
        let mut support = Vec::new();
        let mut col_sum = vec![0.0; m];
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let total: f64 = row.iter().map(|&(_, w)| w).sum();
            let mut best = (usize::MAX, f64::NEG_INFINITY);
            let start = support.len();
            for (c, w) in row {
                let w = w / total;
                cols.push(c);
                weights.push(w);
                col_sum[c] += w;
                if w > best.1 {
                    best = (c, w);
                }
                if w >= MAX_POOL_THRESHOLD {
                    support.push(c);
                }
            }
            // Keep the receptive field non-empty when a row is spread thin.
            if support.len() == start {
                support.push(best.0);
            }
            row_ptr.push(cols.len());
            support_ptr.push(support.len());
        }
        let fallback = if col_sum.iter().any(|&s| s == 0.0) {
            donor(&col_sum)
        } else {
            Vec::new()
        };
        PoolingMap {
            source: m,
            target: row_ptr.len() - 1,
            row_ptr,
            cols,
            weights,
            support_ptr,
            support,
            col_sum,
            fallback,
        }
    }

    pub fn source_count(&self) -> usize {
        self.source
    }

    pub fn target_count(&self) -> usize {
        self.target
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Columns and weights of row `r`, columns ascending.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.cols[span.clone()], &self.weights[span])
    }

    /// Max-pool receptive field of row `r`, ascending.
    pub fn support(&self, r: usize) -> &[usize] {
        &self.support[self.support_ptr[r]..self.support_ptr[r + 1]]
    }

    /// Fine edges that no coarse edge draws from, with their donors.
    pub fn fallback(&self) -> &[(usize, usize)] {
        &self.fallback
    }

    pub fn column_sums(&self) -> &[f64] {
        &self.col_sum
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.source]; self.target];
        for (r, row) in out.iter_mut().enumerate() {
            let (c, w) = self.row(r);
            for (&c, &w) in c.iter().zip(w) {
                row[c] += w;
            }
        }
        out
    }

    /// `D f`.
    pub fn mean_pool(&self, f: &EdgeFeatureMatrix) -> Result<EdgeFeatureMatrix, PoolingError> {
        check_rows(f, self.source)?;
        let mut out = EdgeFeatureMatrix::zeros(self.target, f.cols);
        for r in 0..self.target {
            let (cols, ws) = self.row(r);
            let dst = out.row_mut(r);
            for (&c, &w) in cols.iter().zip(ws) {
                for (d, s) in dst.iter_mut().zip(f.row(c)) {
                    *d += w * s;
                }
            }
        }
        Ok(out)
    }

    /// Per coarse edge and channel, the maximum over the support. The argmax
    /// (a fine edge index, first maximum on ties) is returned row-major.
    pub fn max_pool(&self, f: &EdgeFeatureMatrix) -> Result<(EdgeFeatureMatrix, Vec<usize>), PoolingError> {
        check_rows(f, self.source)?;
        let k = f.cols;
        let mut out = EdgeFeatureMatrix::zeros(self.target, k);
        let mut arg = vec![0; self.target * k];
        for r in 0..self.target {
            let sup = self.support(r);
            for ch in 0..k {
                let mut best = sup[0];
                for &c in &sup[1..] {
                    if f.get(c, ch) > f.get(best, ch) {
                        best = c;
                    }
                }
                out.data[r * k + ch] = f.get(best, ch);
                arg[r * k + ch] = best;
            }
        }
        Ok((out, arg))
    }

    /// Routes coarse gradients back to the recorded argmax fine edges.
    pub fn max_pool_backward(&self, argmax: &[usize], grad: &EdgeFeatureMatrix) -> EdgeFeatureMatrix {
        let k = grad.cols;
        let mut out = EdgeFeatureMatrix::zeros(self.source, k);
        for (i, (&a, &g)) in argmax.iter().zip(&grad.data).enumerate() {
            out.data[a * k + i % k] += g;
        }
        out
    }

    /// `Dᵀ g` divided by the column sums; unsupported fine edges copy their donor.
    pub fn unpool(&self, g: &EdgeFeatureMatrix) -> Result<EdgeFeatureMatrix, PoolingError> {
        check_rows(g, self.target)?;
        let k = g.cols;
        let mut out = EdgeFeatureMatrix::zeros(self.source, k);
        for r in 0..self.target {
            let (cols, ws) = self.row(r);
            for (&c, &w) in cols.iter().zip(ws) {
                let scale = w / self.col_sum[c];
                for ch in 0..k {
                    out.data[c * k + ch] += scale * g.data[r * k + ch];
                }
            }
        }
        for &(fine, donor) in &self.fallback {
            let (lo, hi) = (fine * k, donor * k);
            for ch in 0..k {
                out.data[lo + ch] = out.data[hi + ch];
            }
        }
        Ok(out)
    }

    /// Adjoint of [`PoolingMap::unpool`].
    pub fn unpool_backward(&self, grad: &EdgeFeatureMatrix) -> EdgeFeatureMatrix {
        let k = grad.cols;
        let mut fine = grad.clone();
        for &(f, donor) in self.fallback.iter().rev() {
            for ch in 0..k {
                let g = fine.data[f * k + ch];
                fine.data[donor * k + ch] += g;
                fine.data[f * k + ch] = 0.0;
            }
        }
        let mut out = EdgeFeatureMatrix::zeros(self.target, k);
        for r in 0..self.target {
            let (cols, ws) = self.row(r);
            for (&c, &w) in cols.iter().zip(ws) {
                let scale = w / self.col_sum[c];
                for ch in 0..k {
                    out.data[r * k + ch] += scale * fine.data[c * k + ch];
                }
            }
        }
        out
    }

    /// Binary layout, little-endian: `m, n, nnz` as u32; `nnz` triples
    /// `(row u32, col u32, weight f32)` row-major; then `k` as u32 and `k`
    /// `(fine u32, donor u32)` fallback pairs.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        for x in [self.source, self.target, self.nnz()] {
            w.write_all(&(x as u32).to_le_bytes())?;
        }
        for r in 0..self.target {
            let (cols, ws) = self.row(r);
            for (&c, &wt) in cols.iter().zip(ws) {
                w.write_all(&(r as u32).to_le_bytes())?;
                w.write_all(&(c as u32).to_le_bytes())?;
                w.write_all(&(wt as f32).to_le_bytes())?;
            }
        }
        w.write_all(&(self.fallback.len() as u32).to_le_bytes())?;
        for &(f, d) in &self.fallback {
            w.write_all(&(f as u32).to_le_bytes())?;
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, PoolingError> {
        let mut word = || -> Result<u32, PoolingError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let (m, n, nnz) = (word()? as usize, word()? as usize, word()? as usize);
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut last = (0, 0);
        for i in 0..nnz {
            let (row, col) = (word()? as usize, word()? as usize);
            let weight = f32::from_bits(word()?) as f64;
            if row >= n || col >= m || !(weight > 0.0) {
                return Err(PoolingError::Format(format!("entry {i} out of range")));
            }
            if i > 0 && (row, col) <= last {
                return Err(PoolingError::Format(format!("entry {i} not sorted row-major")));
            }
            last = (row, col);
            rows[row].push((col, weight));
        }
        if rows.iter().any(Vec::is_empty) {
            return Err(PoolingError::Format("empty row".into()));
        }
        let k = word()? as usize;
        let mut fallback = Vec::with_capacity(k);
        for _ in 0..k {
            let (f, d) = (word()? as usize, word()? as usize);
            if f >= m || d >= m {
                return Err(PoolingError::Format("fallback index out of range".into()));
            }
            fallback.push((f, d));
        }
        let map = Self::from_rows(m, rows, |_| fallback.clone());
        let unsupported = map.col_sum.iter().filter(|&&s| s == 0.0).count();
        if unsupported != map.fallback.len() {
            return Err(PoolingError::Format("fallback list does not match unused columns".into()));
        }
        Ok(map)
    }

    pub fn write_file(&self, path: &Path) -> Result<(), PoolingError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, PoolingError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

/// Nearest used column (by source edge midpoint) for every unused one.
fn nearest_donors(midpoints: &[Point3<f64>], col_sum: &[f64]) -> Vec<(usize, usize)> {
    let used: Vec<usize> = (0..col_sum.len()).filter(|&c| col_sum[c] > 0.0).collect();
    (0..col_sum.len())
        .filter(|&c| col_sum[c] == 0.0)
        .map(|c| {
            let mut best = (f64::INFINITY, usize::MAX);
            for &u in &used {
                let d = (midpoints[u] - midpoints[c]).norm_squared();
                if d < best.0 {
                    best = (d, u);
                }
            }
            (c, best.1)
        })
        .collect()
}

/// Composes the per-collapse length-weighted merges of a trace into one
/// sparse map. Collapsed edges themselves contribute nothing.
pub fn build_pooling_map(trace: &CollapseTrace) -> PoolingMap {
    let m = trace.source_edge_count;
    let merges: usize = trace.collapses.iter().map(|c| c.merges.len()).sum();
    let mut rows: Vec<Option<Vec<(usize, f64)>>> = (0..m).map(|i| Some(vec![(i, 1.0)])).collect();
    rows.resize(m + merges, None);
    for c in &trace.collapses {
        rows[c.discarded] = None;
        for mg in &c.merges {
            let mut combined: Vec<(usize, f64)> = Vec::new();
            for (&p, &w) in mg.parents.iter().zip(&mg.weights) {
                let parent = rows[p].take().expect("merged edge is live");
                combined.extend(parent.into_iter().map(|(col, x)| (col, x * w)));
            }
            combined.sort_by_key(|&(col, _)| col);
            combined.dedup_by(|next, kept| {
                if next.0 == kept.0 {
                    kept.1 += next.1;
                    true
                } else {
                    false
                }
            });
            rows[mg.child] = Some(combined);
        }
    }
    let out = trace
        .target_edges
        .iter()
        .map(|&id| rows[id].take().expect("target edge is live"))
        .collect();
    PoolingMap::from_rows(m, out, |sums| nearest_donors(&trace.source_midpoints, sums))
}
