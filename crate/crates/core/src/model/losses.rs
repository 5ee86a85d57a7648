//! Training objectives, all recorded on the autodiff graph.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{AttentionNorm, GtAttention, TrainConfig};

/// Attention loss `(1/n) sum_ij alpha_ij (A_ij - Â_ij)^2`, with
/// `alpha = 1` where `A < Â` and `0.25` elsewhere. Rows flagged invalid in
/// `gt` contribute nothing.
pub fn loss_att(g: &mut Graph, a: Var, gt: &GtAttention, norm: AttentionNorm) -> Result<Var> {
    let shape = g.shape(a).to_vec();
    if shape.as_slice() != gt.a_hat.shape() {
        return Err(Error::shape("loss_att", format!("{shape:?} vs {:?}", gt.a_hat.shape())));
    }
    let n = shape[0];
    let target = gt.a_hat.data();
    let alpha: Vec<f64> = g
        .data(a)
        .iter()
        .zip(target)
        .enumerate()
        .map(|(k, (&av, &tv))| {
            if !gt.valid_rows[k / n] {
                0.0
            } else if av < tv {
                1.0
            } else {
                0.25
            }
        })
        .collect();
    let alpha = g.constant(Tensor::new(shape.clone(), alpha)?);
    let a_hat = g.constant(gt.a_hat.clone());
    let diff = g.sub(a, a_hat)?;
    let sq = g.mul(diff, diff)?;
    let weighted = g.mul(sq, alpha)?;
    let total = g.sum(weighted)?;
    let denom = match norm {
        AttentionNorm::PerRow => n as f64,
        AttentionNorm::PerEntry => (n * n) as f64,
    };
    g.scale(total, 1.0 / denom)
}

/// Mean squared Euclidean distance between predicted and true targets.
pub fn loss_tgt(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    let n = g.shape(pred).first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::shape("loss_tgt", "no targets"));
    }
    let diff = g.sub(pred, gt)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / n as f64)
}

/// Mean smooth-L1 over the nine entries of `theta - theta_hat`.
pub fn loss_par(g: &mut Graph, theta: Var, theta_hat: Var) -> Result<Var> {
    let diff = g.sub(theta, theta_hat)?;
    let s = g.smooth_l1(diff)?;
    g.mean(s)
}

/// Pearson correlation between mask values and per-cell target errors.
/// Returns a constant zero when either vector has no variance.
pub fn loss_msk(g: &mut Graph, mask: Var, error: Var) -> Result<Var> {
    let n = g.value(mask).len();
    if n < 2 {
        return Err(Error::Invalid(format!("correlation needs at least 2 values, got {n}")));
    }
    if g.shape(mask) != g.shape(error) {
        return Err(Error::shape("loss_msk", format!("{:?} vs {:?}", g.shape(mask), g.shape(error))));
    }
    let spread = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
    };
    if spread(g.data(mask)) == 0.0 || spread(g.data(error)) == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let shape = g.shape(mask).to_vec();
    let centre = |g: &mut Graph, v: Var| -> Result<Var> {
        let m = g.mean(v)?;
        let m = g.expand(m, &shape)?;
        g.sub(v, m)
    };
    let dm = centre(g, mask)?;
    let de = centre(g, error)?;
    let prod = g.mul(dm, de)?;
    let num = g.sum(prod)?;
    let dm2 = g.mul(dm, dm)?;
    let de2 = g.mul(de, de)?;
    let sm = g.sum(dm2)?;
    let se = g.sum(de2)?;
    let den = g.mul(sm, se)?;
    let den = g.sqrt(den)?;
    g.div(num, den)
}

/// Per-row L1 distance `|p - p̂|_1` of two `[n, 2]` nodes, as an `[n]` node.
pub fn l1_error_map(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    let n = g.shape(pred)[0];
    let diff = g.sub(pred, gt)?;
    let abs = g.abs(diff)?;
    let ones = g.constant(Tensor::full(&[2, 1], 1.0));
    let summed = g.matmul(abs, ones)?;
    g.reshape(summed, &[n])
}

/// Scalar loss terms of one sample.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub tgt: Var,
    pub att: Var,
    pub par: Var,
    pub msk: Var,
}

/// `L_tgt + λ_att L_att + λ_par L_par + λ_msk L_msk`.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, cfg: &TrainConfig) -> Result<Var> {
    let att = g.scale(terms.att, cfg.lambda_att)?;
    let par = g.scale(terms.par, cfg.lambda_par)?;
    let msk = g.scale(terms.msk, cfg.lambda_msk)?;
    let a = g.add(terms.tgt, att)?;
    let b = g.add(a, par)?;
    g.add(b, msk)
}
