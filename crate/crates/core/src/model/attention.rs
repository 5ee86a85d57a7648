//! Grid bookkeeping, ground-truth attention targets and the non-learned
//! attention readouts.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::Point;

pub const GT_RADIUS: usize = 3;
pub const GT_SIGMA: f64 = 1.5;

/// Normalized centre of every cell of an `(h, w)` grid, row-major.
pub fn cell_centers(grid: (usize, usize)) -> Vec<Point> {
    let (h, w) = grid;
    (0..h * w)
        .map(|i| [((i % w) as f64 + 0.5) / w as f64, ((i / w) as f64 + 0.5) / h as f64])
        .collect()
}

/// Cell containing a normalized point, or `None` outside `[0, 1)^2`.
pub fn nearest_cell(p: Point, grid: (usize, usize)) -> Option<usize> {
    let (h, w) = grid;
    if !(p[0] >= 0.0 && p[0] < 1.0 && p[1] >= 0.0 && p[1] < 1.0) {
        return None;
    }
    let col = ((p[0] * w as f64).floor() as usize).min(w - 1);
    let row = ((p[1] * h as f64).floor() as usize).min(h - 1);
    Some(row * w + col)
}

/// Row-stochastic `n x n` cross-attention (foreground cells index rows).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    n: usize,
    data: Vec<f64>,
}

impl AttentionMap {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Invalid(format!("attention of {} values for n = {n}", data.len())));
        }
        for (i, row) in data.chunks(n).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&v| v < 0.0) || (total - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!("attention row {i} is not a distribution (sum {total})")));
            }
        }
        Ok(AttentionMap { n, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [n, m] if n == m => AttentionMap::new(*n, t.data().to_vec()),
            s => Err(Error::Invalid(format!("attention must be square, got {s:?}"))),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Ground-truth attention: per row, a peak-1 Gaussian bump around the
/// target cell, zero beyond the kernel radius. Rows whose target left the
/// grid are all zero and excluded from the attention loss.
#[derive(Clone, Debug, PartialEq)]
pub struct GtAttention {
    pub a_hat: Tensor,
    pub valid_rows: Vec<bool>,
}

pub fn build_gt_attention(targets: &[Option<usize>], grid: (usize, usize), radius: usize) -> Result<GtAttention> {
    let (h, w) = grid;
    let n = h * w;
    if targets.len() != n {
        return Err(Error::Invalid(format!("{} target cells for a grid of {n}", targets.len())));
    }
    let mut a_hat = vec![0.0; n * n];
    let r2 = (radius * radius) as i64;
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        if t >= n {
            return Err(Error::Invalid(format!("target cell {t} outside a grid of {n} cells")));
        }
        let (tr, tc) = ((t / w) as i64, (t % w) as i64);
        let row = &mut a_hat[i * n..(i + 1) * n];
        for (j, v) in row.iter_mut().enumerate() {
            let (dr, dc) = ((j / w) as i64 - tr, (j % w) as i64 - tc);
            let d2 = dr * dr + dc * dc;
            if d2 <= r2 {
                *v = (-(d2 as f64) / (2.0 * GT_SIGMA * GT_SIGMA)).exp();
            }
        }
    }
    Ok(GtAttention {
        a_hat: Tensor::new(vec![n, n], a_hat)?,
        valid_rows: targets.iter().map(Option::is_some).collect(),
    })
}

/// Target coordinates read directly off the attention map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    /// Centre of each row's largest entry; ties go to the lowest index.
    Argmax,
    /// Attention-weighted mean of the cell centres.
    WeightedAvg,
}

pub fn readout_baseline(a: &AttentionMap, grid: (usize, usize), mode: Readout) -> Result<Vec<Point>> {
    let centers = cell_centers(grid);
    if centers.len() != a.n() {
        return Err(Error::Invalid(format!("grid {grid:?} does not match attention n = {}", a.n())));
    }
    Ok((0..a.n())
        .map(|i| {
            let row = a.row(i);
            match mode {
                Readout::Argmax => {
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    centers[best]
                }
                Readout::WeightedAvg => {
                    let total: f64 = row.iter().sum();
                    let x = row.iter().zip(&centers).map(|(a, c)| a * c[0]).sum::<f64>() / total;
                    let y = row.iter().zip(&centers).map(|(a, c)| a * c[1]).sum::<f64>() / total;
                    [x, y]
                }
            }
        })
        .collect())
}
