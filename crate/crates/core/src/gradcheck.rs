//! Finite-difference verification of every backward rule and of the full
//! training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{render_sample, Sample, SynthConfig};
use crate::error::Result;
use crate::geometry::{solve_linear_graph, Point};
use crate::model::{
    build_gt_attention, loss_att, loss_msk, loss_par, loss_tgt, AttentionNorm, EncoderConfig, Model, TrainConfig,
};
use crate::train::{sample_loss, Pins};

pub const DEFAULT_TOLERANCE: f64 = 1e-3;
const EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    /// Worst per-tensor `max|analytic - numeric| / max|numeric|`.
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Scalar function of a list of input tensors, built on a fresh graph.
pub type Builder<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

fn evaluate(build: &Builder, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    Ok(g.item(out))
}

/// Central differences against backward for every entry of every input.
/// `corrupt` names an op whose backward rule is deliberately scaled.
pub fn compare(build: &Builder, inputs: &[Tensor], corrupt: Option<&'static str>) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    if let Some(op) = corrupt {
        g.corrupt_rule(op);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].len() {
            let x = inputs[k].data()[i];
            probe[k].data_mut()[i] = x + EPS;
            let up = evaluate(build, &probe)?;
            probe[k].data_mut()[i] = x - EPS;
            let down = evaluate(build, &probe)?;
            probe[k].data_mut()[i] = x;
            numeric.push((up - down) / (2.0 * EPS));
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        let diff = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        worst = worst.max(diff / scale);
        checked += analytic.len();
    }
    Ok((worst, checked))
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from `kinks` by at least `gap`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], kinks: &[f64], gap: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| loop {
            let v = rng.gen_range(-2.0..2.0);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// `sum(f(inputs) * r)` for fixed random `r`, so every output entry gets a
/// distinct upstream gradient.
fn weighted<'a>(f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'a, out_shape: &[usize], seed: u64) -> Box<Builder<'a>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(&mut rng, out_shape, -1.0, 1.0);
    Box::new(move |g: &mut Graph, v: &[Var]| {
        let y = f(g, v)?;
        let r = g.constant(r.clone());
        let p = g.mul(y, r)?;
        g.sum(p)
    })
}

struct Case<'a> {
    name: &'static str,
    build: Box<Builder<'a>>,
    inputs: Vec<Tensor>,
}

fn op_cases(seed: u64) -> Vec<Case<'static>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let mut push = |name, build, inputs| cases.push(Case { name, build, inputs });

    push("matmul", weighted(|g, v| g.matmul(v[0], v[1]), &[3, 2], 1), vec![
        random(&mut rng, &[3, 4], -1.0, 1.0),
        random(&mut rng, &[4, 2], -1.0, 1.0),
    ]);
    push("transpose", weighted(|g, v| g.transpose(v[0]), &[4, 3], 2), vec![random(&mut rng, &[3, 4], -1.0, 1.0)]);
    push(
        "conv2d",
        weighted(|g, v| g.conv2d(v[0], v[1], v[2], 2, 1), &[3, 2, 2], 3),
        vec![
            random(&mut rng, &[2, 4, 4], -1.0, 1.0),
            random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
            random(&mut rng, &[3], -1.0, 1.0),
        ],
    );
    push("relu", weighted(|g, v| g.relu(v[0]), &[4, 4], 4), vec![away_from(&mut rng, &[4, 4], &[0.0], 0.05)]);
    push("sigmoid", weighted(|g, v| g.sigmoid(v[0]), &[4, 4], 5), vec![random(&mut rng, &[4, 4], -3.0, 3.0)]);
    push(
        "softmax_rows",
        weighted(|g, v| g.softmax_rows(v[0]), &[3, 4], 6),
        vec![random(&mut rng, &[3, 4], -2.0, 2.0)],
    );
    push("abs", weighted(|g, v| g.abs(v[0]), &[4, 4], 7), vec![away_from(&mut rng, &[4, 4], &[0.0], 0.05)]);
    push("sqrt", weighted(|g, v| g.sqrt(v[0]), &[4, 4], 8), vec![random(&mut rng, &[4, 4], 0.2, 2.0)]);
    push(
        "smooth_l1",
        weighted(|g, v| g.smooth_l1(v[0]), &[4, 4], 9),
        vec![away_from(&mut rng, &[4, 4], &[-1.0, 1.0], 0.05)],
    );
    for (name, seed) in [("add", 10), ("sub", 11), ("mul", 12)] {
        let f = move |g: &mut Graph, v: &[Var]| match name {
            "add" => g.add(v[0], v[1]),
            "sub" => g.sub(v[0], v[1]),
            _ => g.mul(v[0], v[1]),
        };
        push(name, weighted(f, &[4, 4], seed), vec![
            random(&mut rng, &[4, 4], -1.0, 1.0),
            random(&mut rng, &[4, 4], -1.0, 1.0),
        ]);
    }
    push("div", weighted(|g, v| g.div(v[0], v[1]), &[4, 4], 13), vec![
        random(&mut rng, &[4, 4], -1.0, 1.0),
        random(&mut rng, &[4, 4], 0.5, 2.0),
    ]);
    push("add_row_bias", weighted(|g, v| g.add_row_bias(v[0], v[1]), &[3, 4], 14), vec![
        random(&mut rng, &[3, 4], -1.0, 1.0),
        random(&mut rng, &[4], -1.0, 1.0),
    ]);
    push("scale", weighted(|g, v| g.scale(v[0], -1.7), &[4], 15), vec![random(&mut rng, &[4], -1.0, 1.0)]);
    push("add_scalar", weighted(|g, v| g.add_scalar(v[0], 0.3), &[4], 16), vec![random(&mut rng, &[4], -1.0, 1.0)]);
    push("expand", weighted(|g, v| g.expand(v[0], &[2, 3]), &[2, 3], 17), vec![random(&mut rng, &[1], -1.0, 1.0)]);
    push(
        "sum",
        Box::new(|g: &mut Graph, v: &[Var]| {
            let s = g.sum(v[0])?;
            g.mul(s, s)
        }),
        vec![random(&mut rng, &[4, 4, 4], -1.0, 1.0)],
    );
    push(
        "mean",
        Box::new(|g: &mut Graph, v: &[Var]| {
            let s = g.mean(v[0])?;
            g.mul(s, s)
        }),
        vec![random(&mut rng, &[4, 4, 4], -1.0, 1.0)],
    );
    push("gather", weighted(|g, v| g.gather(v[0], &[2, 0, 2]), &[3, 3], 18), vec![random(&mut rng, &[4, 3], -1.0, 1.0)]);
    push("concat", weighted(|g, v| g.concat(&[v[0], v[1]], 1), &[3, 5], 19), vec![
        random(&mut rng, &[3, 2], -1.0, 1.0),
        random(&mut rng, &[3, 3], -1.0, 1.0),
    ]);
    push("reshape", weighted(|g, v| g.reshape(v[0], &[2, 6]), &[2, 6], 20), vec![random(&mut rng, &[3, 4], -1.0, 1.0)]);
    let mut m = random(&mut rng, &[3, 3], -0.5, 0.5);
    for i in 0..3 {
        m.data_mut()[i * 4] += 2.0;
    }
    push("matrix_inverse_3x3", weighted(|g, v| g.inverse3x3(v[0]), &[3, 3], 21), vec![m]);
    let coords = loop {
        let c = random(&mut rng, &[5, 2], -0.1, 1.1);
        // stay clear of the piecewise-linear seams at cell centres and borders
        let clear = c.data().iter().all(|&x| {
            let p = x * 4.0 - 0.5;
            (p - p.round()).abs() > 0.02
        });
        if clear {
            break c;
        }
    };
    push("bilinear_gather", weighted(|g, v| g.bilinear_gather(v[0], v[1]), &[2, 5], 22), vec![
        random(&mut rng, &[2, 4, 4], -1.0, 1.0),
        coords,
    ]);
    cases
}

fn loss_cases(seed: u64) -> Vec<Case<'static>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let sources: Vec<Point> = (0..9).map(|i| [((i % 3) as f64 + 0.5) / 3.0, ((i / 3) as f64 + 0.5) / 3.0]).collect();
    let targets = random(&mut rng, &[9, 2], 0.0, 1.0);
    let src = sources.clone();
    cases.push(Case {
        name: "solve_linear",
        build: weighted(move |g, v| solve_linear_graph(g, &src, v[0], Some(&[0, 2, 4, 5, 6, 8]), None), &[3, 3], 30),
        inputs: vec![targets.clone()],
    });
    cases.push(Case {
        name: "solve_linear_weighted",
        build: weighted(
            move |g, v| solve_linear_graph(g, &sources, v[0], None, Some(&[0.9, 0.2, 1.0, 0.5, 0.7, 0.1, 0.3, 0.8, 0.6])),
            &[3, 3],
            31,
        ),
        inputs: vec![targets],
    });
    cases.push(Case {
        name: "loss_msk",
        build: Box::new(|g: &mut Graph, v: &[Var]| loss_msk(g, v[0], v[1])),
        inputs: vec![random(&mut rng, &[9], 0.0, 1.0), random(&mut rng, &[9], 0.0, 1.0)],
    });
    let gt = build_gt_attention(&[Some(0), Some(3), None, Some(2)], (2, 2), 3).expect("gt");
    let a = {
        let logits = random(&mut rng, &[4, 4], -1.0, 1.0);
        let mut g = Graph::new();
        let v = g.constant(logits);
        let s = g.softmax_rows(v).expect("softmax");
        g.value(s).clone()
    };
    cases.push(Case {
        name: "loss_att",
        build: Box::new(move |g: &mut Graph, v: &[Var]| loss_att(g, v[0], &gt, AttentionNorm::PerRow)),
        inputs: vec![a],
    });
    cases.push(Case {
        name: "loss_tgt",
        build: Box::new(|g: &mut Graph, v: &[Var]| loss_tgt(g, v[0], v[1])),
        inputs: vec![random(&mut rng, &[6, 2], 0.0, 1.0), random(&mut rng, &[6, 2], 0.0, 1.0)],
    });
    cases.push(Case {
        name: "loss_par",
        build: Box::new(|g: &mut Graph, v: &[Var]| loss_par(g, v[0], v[1])),
        inputs: vec![
            away_from(&mut rng, &[3, 3], &[-1.0, 1.0], 0.05),
            Tensor::zeros(&[3, 3]),
        ],
    });
    cases
}

/// One result per op kind and per loss/solver building block.
pub fn op_checks(seed: u64, tol: f64, corrupt: Option<&'static str>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for case in op_cases(seed).into_iter().chain(loss_cases(seed)) {
        let (err, checked) = compare(&*case.build, &case.inputs, corrupt)?;
        out.push(CheckResult { name: case.name.to_string(), max_rel_error: err, checked, passed: err <= tol });
    }
    Ok(out)
}

/// Gradient of the total training loss with respect to every weight of a
/// tiny (4x4 grid) model on one synthetic sample. The pairs entering the
/// solve and the error map of the mask loss are fixed from the unperturbed
/// forward pass.
pub fn model_check(seed: u64, tol: f64, corrupt: Option<&'static str>) -> Result<CheckResult> {
    let enc = EncoderConfig::tiny();
    let model = Model::new(&enc, seed)?;
    let synth = SynthConfig { count: 3, resolution: enc.input_size, seed, ..SynthConfig::default() };
    let r = render_sample(&synth, 0)?;
    let sample = Sample::from_images(r.record, (r.fg, r.mask, r.bg, Some(r.gt)), enc.input_size, enc.grid())?;
    let cfg = TrainConfig::default();

    let pins = {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let base = sample_loss(&mut g, &model, &vars, &sample, &cfg, &Pins::default())?;
        Pins { rows: Some(base.rows), error: Some(base.error) }
    };
    let names = model.names().to_vec();
    let build = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        Ok(sample_loss(g, &model, vars, &sample, &cfg, &pins)?.total)
    };
    let (err, checked) = compare(&build, model.params(), corrupt)?;
    log::debug!("end-to-end check over {} tensors ({checked} weights)", names.len());
    Ok(CheckResult { name: "end_to_end_tiny_model".into(), max_rel_error: err, checked, passed: err <= tol })
}

/// Every op check followed by the end-to-end check.
pub fn run_all(seed: u64, tol: f64) -> Result<Vec<CheckResult>> {
    let mut results = op_checks(seed, tol, None)?;
    results.push(model_check(seed, tol, None)?);
    Ok(results)
}
