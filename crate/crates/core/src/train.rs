//! One training step on the graph, and the epoch loop around it.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, Tensor, Var};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::geometry::{filter_indices, solve_linear_graph, Point};
use crate::model::{
    build_gt_attention, cell_centers, l1_error_map, loss_att, loss_msk, loss_par, loss_tgt, total_loss, Forward,
    LossTerms, Model, TrainConfig, GT_RADIUS,
};

/// Scalar values of every loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub tgt: f64,
    pub att: f64,
    pub par: f64,
    pub msk: f64,
}

impl LossValues {
    fn add(&mut self, o: &LossValues) {
        self.total += o.total;
        self.tgt += o.tgt;
        self.att += o.att;
        self.par += o.par;
        self.msk += o.msk;
    }

    fn scaled(mut self, k: f64) -> Self {
        self.total *= k;
        self.tgt *= k;
        self.att *= k;
        self.par *= k;
        self.msk *= k;
        self
    }
}

/// Graph nodes of one sample's objective.
pub struct SampleLoss {
    pub forward: Forward,
    pub theta: Var,
    pub total: Var,
    pub values: LossValues,
    /// Pairs that entered the solve.
    pub rows: Vec<usize>,
    /// Per-cell L1 target error fed to the mask loss as a constant.
    pub error: Vec<f64>,
}

/// Data-dependent choices of a forward pass, fixed so the objective can be
/// re-evaluated as a smooth function of the weights.
#[derive(Clone, Debug, Default)]
pub struct Pins {
    pub rows: Option<Vec<usize>>,
    pub error: Option<Vec<f64>>,
}

/// Full forward pass and objective for one sample. Unless pinned, the pairs
/// used in the solve come from the predicted mask (or are all pairs when
/// filtering is off), and the error map the mask is correlated with comes
/// from the current predictions. The error map never carries gradient: the
/// mask loss trains the mask head only.
pub fn sample_loss(
    g: &mut Graph,
    model: &Model,
    vars: &[Var],
    sample: &Sample,
    cfg: &TrainConfig,
    pins: &Pins,
) -> Result<SampleLoss> {
    let grid = model.config().grid();
    let n = grid.0 * grid.1;
    let fg = g.constant(sample.fg_input.clone());
    let bg = g.constant(sample.bg_input.clone());
    let forward = model.forward(g, vars, fg, bg)?;

    let gt_points: Vec<f64> = sample.targets.points.iter().flatten().copied().collect();
    let gt = g.constant(Tensor::new(vec![n, 2], gt_points)?);
    let tgt = loss_tgt(g, forward.targets, gt)?;

    let gt_att = build_gt_attention(&sample.targets.cells, grid, GT_RADIUS)?;
    let att = loss_att(g, forward.attention, &gt_att, cfg.attention_norm)?;

    let sources = cell_centers(grid);
    let rows = match &pins.rows {
        Some(r) => r.clone(),
        None if cfg.filtering => filter_indices(g.data(forward.mask)).indices,
        None => (0..n).collect(),
    };
    let (theta, rows) = solve_with_fallback(g, &sources, forward.targets, rows)?;
    let theta_hat = g.constant(sample.record.gt_theta.to_tensor());
    let par = loss_par(g, theta, theta_hat)?;

    let error = match &pins.error {
        Some(e) => e.clone(),
        None => {
            let e = l1_error_map(g, forward.targets, gt)?;
            g.data(e).to_vec()
        }
    };
    let error_var = g.constant(Tensor::new(vec![n], error.clone())?);
    let msk = loss_msk(g, forward.mask, error_var)?;

    let terms = LossTerms { tgt, att, par, msk };
    let total = total_loss(g, &terms, cfg)?;
    let values = LossValues {
        total: g.item(total),
        tgt: g.item(tgt),
        att: g.item(att),
        par: g.item(par),
        msk: g.item(msk),
    };
    for (term, v) in [
        ("tgt", values.tgt),
        ("att", values.att),
        ("par", values.par),
        ("msk", values.msk),
        ("total", values.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: term.to_string(), sample: sample.record.id.clone() });
        }
    }
    Ok(SampleLoss { forward, theta, total, values, rows, error })
}

/// Solve on `rows`, or on every pair if those sources are degenerate.
fn solve_with_fallback(g: &mut Graph, sources: &[Point], targets: Var, rows: Vec<usize>) -> Result<(Var, Vec<usize>)> {
    match solve_linear_graph(g, sources, targets, Some(&rows), None) {
        Ok(theta) => Ok((theta, rows)),
        Err(Error::Degenerate(why)) => {
            log::debug!("selected pairs degenerate ({why}); solving on all pairs");
            let all: Vec<usize> = (0..sources.len()).collect();
            let theta = solve_linear_graph(g, sources, targets, Some(&all), None)?;
            Ok((theta, all))
        }
        Err(e) => Err(e),
    }
}

/// Mean loss terms over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossValues,
    pub seconds: f64,
}

/// Forward, backward and gradient accumulation for one sample.
pub fn accumulate(model: &mut Model, sample: &Sample, cfg: &TrainConfig) -> Result<LossValues> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let out = sample_loss(&mut g, model, &vars, sample, cfg, &Pins::default())?;
    g.backward(out.total)?;
    model.collect_grads(&g, &vars)?;
    Ok(out.values)
}

/// Runs `cfg.epochs` epochs of Adam over `train`, shuffled per epoch from
/// `cfg.seed`. `on_epoch` sees the model after each epoch and may stop
/// training early by returning `false`.
pub fn train(
    model: &mut Model,
    train: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Model) -> Result<bool>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let mut adam = Adam::new(cfg.lr, cfg.betas);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sum = LossValues::default();
        for batch in order.chunks(cfg.batch_size) {
            model.zero_grad();
            for &i in batch {
                sum.add(&accumulate(model, &train[i], cfg)?);
            }
            if batch.len() > 1 {
                let k = 1.0 / batch.len() as f64;
                for t in model.params_mut() {
                    if let Some(g) = t.grad.as_mut() {
                        g.iter_mut().for_each(|v| *v *= k);
                    }
                }
            }
            adam.step(model.params_mut())?;
        }
        let log = EpochLog {
            epoch,
            loss: sum.scaled(1.0 / train.len() as f64),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (tgt {:.5}, att {:.5}, par {:.5}, msk {:.4}) in {:.1}s",
            log.loss.total,
            log.loss.tgt,
            log.loss.att,
            log.loss.par,
            log.loss.msk,
            log.seconds
        );
        let keep_going = on_epoch(&log, model)?;
        logs.push(log);
        if !keep_going {
            break;
        }
    }
    Ok(logs)
}
