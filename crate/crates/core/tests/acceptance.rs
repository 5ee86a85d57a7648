//! End-to-end acceptance suite. Prints one line per criterion and exits
//! non-zero if any of them fails.

use std::process::ExitCode;
use std::time::Instant;

use corrwarp::autodiff::{Graph, Tensor};
use corrwarp::data::{generate, load_split, Split, SynthConfig};
use corrwarp::eval::{evaluate, Method, Report};
use corrwarp::geometry::{
    project, solve_dlt, solve_filtered, solve_linear, vertex_displacement, CorrespondenceSet, Homography, Point,
    QuadAnnotation, UNIT_SQUARE,
};
use corrwarp::gradcheck::{run_all, DEFAULT_TOLERANCE};
use corrwarp::imaging::{composite, lssim, mask_iou, warp, Image};
use corrwarp::model::{loss_att, loss_msk, loss_par, Ablation, AttentionNorm, EncoderConfig, GtAttention, Model, TrainConfig};
use corrwarp::train::train;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_affine(rng: &mut ChaCha8Rng) -> Homography {
    Homography([
        rng.gen_range(0.5..1.5),
        rng.gen_range(-0.4..0.4),
        rng.gen_range(-0.3..0.3),
        rng.gen_range(-0.4..0.4),
        rng.gen_range(0.5..1.5),
        rng.gen_range(-0.3..0.3),
        0.0,
        0.0,
        1.0,
    ])
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n).map(|_| [rng.gen(), rng.gen()]).collect()
}

fn random_quad(rng: &mut ChaCha8Rng) -> [Point; 4] {
    [
        [rng.gen_range(0.0..0.4), rng.gen_range(0.0..0.4)],
        [rng.gen_range(0.6..1.0), rng.gen_range(0.0..0.4)],
        [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)],
        [rng.gen_range(0.0..0.4), rng.gen_range(0.6..1.0)],
    ]
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn solver_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_affine: f64 = 0.0;
    for k in 0..500 {
        let truth = random_affine(&mut rng);
        let src = random_points(&mut rng, 10 + k % 20);
        let dst = project(&truth, &src).map_err(|e| e.to_string())?;
        let theta = solve_linear(&CorrespondenceSet::new(src, dst).unwrap()).map_err(|e| e.to_string())?;
        let err = theta.0.iter().zip(&truth.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_affine = worst_affine.max(err);
    }
    let mut worst_dlt: f64 = 0.0;
    for _ in 0..500 {
        let quad = random_quad(&mut rng);
        let theta = solve_dlt(&QuadAnnotation::on_unit_square(quad).unwrap()).map_err(|e| e.to_string())?;
        for (p, q) in project(&theta, &UNIT_SQUARE).unwrap().into_iter().zip(quad) {
            worst_dlt = worst_dlt.max((p[0] - q[0]).abs()).max((p[1] - q[1]).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_affine < 1e-8 && worst_dlt < 1e-9 && secs < 5.0,
        format!("affine max entry error {worst_affine:.2e}, dlt max vertex error {worst_dlt:.2e}, {secs:.2}s"),
    )
}

fn linear_vs_dlt_gap() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut lin_sum, mut dlt_sum, mut cases) = (0.0, 0.0, 0);
    while cases < 500 {
        let base = random_affine(&mut rng);
        let persp = Homography([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), 1.0]);
        let truth = persp.compose(&base);
        let Ok(verts) = project(&truth, &UNIT_SQUARE) else { continue };
        let verts: [Point; 4] = verts.try_into().unwrap();
        let Ok(quad) = QuadAnnotation::on_unit_square(verts) else { continue };
        let dlt = solve_dlt(&quad).map_err(|e| e.to_string())?;
        let lin = solve_linear(&CorrespondenceSet::new(UNIT_SQUARE.to_vec(), verts.to_vec()).unwrap())
            .map_err(|e| e.to_string())?;
        let err = |t: &Homography| {
            project(t, &UNIT_SQUARE).unwrap().iter().zip(&verts).map(|(p, q)| dist(*p, *q)).sum::<f64>() / 4.0
        };
        lin_sum += err(&lin);
        dlt_sum += err(&dlt);
        cases += 1;
    }
    let (lin, dlt) = (lin_sum / 500.0, dlt_sum / 500.0);
    check(lin > dlt, format!("solve_linear mean vertex error {lin:.4e}, dlt {dlt:.4e}, gap {:.4e}", lin - dlt))
}

fn gradcheck_suite() -> Outcome {
    let start = Instant::now();
    let results = run_all(0, DEFAULT_TOLERANCE).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let covers = ["solve_linear", "loss_msk", "end_to_end_tiny_model"]
        .iter()
        .all(|n| results.iter().any(|r| r.name == *n));
    check(
        failed.is_empty() && covers && secs < 120.0,
        format!("{} checks, worst relative error {worst:.2e}, failed {failed:?}, {secs:.1}s", results.len()),
    )
}

fn loss_values() -> Outcome {
    let mut g = Graph::new();
    let mut got = Vec::new();
    let eye = vec![1., 0., 0., 0., 1., 0., 0., 0., 1.];
    let hat = g.constant(Tensor::new(vec![3, 3], eye.clone()).unwrap());
    for delta in [0.5, 2.0] {
        let mut m = eye.clone();
        m[4] += delta;
        let t = g.constant(Tensor::new(vec![3, 3], m).unwrap());
        let l = loss_par(&mut g, t, hat).map_err(|e| e.to_string())?;
        got.push((g.item(l), if delta < 1.0 { 0.125 / 9.0 } else { 1.5 / 9.0 }));
    }
    let e = g.constant(Tensor::new(vec![5], vec![0.1, 0.4, 0.2, 0.9, 0.3]).unwrap());
    let anti = g.constant(Tensor::new(vec![5], vec![0.9, 0.6, 0.8, 0.1, 0.7]).unwrap());
    let flat = g.constant(Tensor::full(&[5], 0.5));
    for (m, expected) in [(e, 1.0), (anti, -1.0), (flat, 0.0)] {
        let l = loss_msk(&mut g, m, e).map_err(|e| e.to_string())?;
        got.push((g.item(l), expected));
    }
    for (a, a_hat, expected) in [(0.5, 1.0, 0.25), (1.0, 0.5, 0.0625)] {
        let av = g.constant(Tensor::new(vec![1, 1], vec![a]).unwrap());
        let gt = GtAttention { a_hat: Tensor::new(vec![1, 1], vec![a_hat]).unwrap(), valid_rows: vec![true] };
        let l = loss_att(&mut g, av, &gt, AttentionNorm::PerRow).map_err(|e| e.to_string())?;
        got.push((g.item(l), expected));
    }
    let worst = got.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(worst < 1e-12, format!("{} fixtures, max deviation {worst:.1e}", got.len()))
}

fn warp_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut noise = |c: usize| {
        let data = (0..31 * 23 * c).map(|_| rng.gen::<f64>()).collect();
        Image::new(31, 23, c, data).unwrap().quantized()
    };
    let (fg, bg) = (noise(3), noise(3));
    let identity_bytes = warp(&fg, &Homography::IDENTITY).unwrap().to_bytes() == fg.to_bytes();

    let theta = Homography([0.85, 0.1, 0.05, -0.05, 0.9, 0.08, 0.12, -0.06, 1.0]);
    let zero = Image::filled(31, 23, 1, 0.0);
    let one = Image::filled(31, 23, 1, 1.0);
    let zero_ok = composite(&fg, &zero, &bg, &theta).unwrap().composite == bg;
    let one_ok = composite(&fg, &one, &bg, &Homography::IDENTITY).unwrap().composite == fg;

    let (w, h) = (64, 64);
    let grad = Image::from_fn(w, h, 3, |x, y, c| {
        let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
        [u, v, 0.5 + 0.4 * (3.0 * u + 2.0 * v).sin()][c]
    });
    let back = warp(&warp(&grad, &theta).unwrap(), &theta.inverse().unwrap()).unwrap();
    let (mut sum, mut count) = (0.0, 0usize);
    for y in 12..52 {
        for x in 12..52 {
            for c in 0..3 {
                sum += (back.get(x, y, c) - grad.get(x, y, c)).abs();
                count += 1;
            }
        }
    }
    let mae = sum / count as f64;

    let self_lssim = lssim(&grad, &grad, &Image::from_fn(w, h, 1, |x, y, _| ((x / 8 + y / 8) % 3 == 0) as u8 as f64))
        .unwrap();
    let cols = |a: usize, b: usize| Image::from_fn(3, 2, 1, |x, _, _| (a..b).contains(&x) as u8 as f64);
    let ious = [
        mask_iou(&cols(0, 2), &cols(0, 2)).unwrap(),
        mask_iou(&cols(0, 1), &cols(2, 3)).unwrap(),
        mask_iou(&cols(0, 2), &cols(1, 3)).unwrap(),
    ];
    let ious_ok = ious == [1.0, 0.0, 1.0 / 3.0];
    check(
        identity_bytes && zero_ok && one_ok && mae < 0.01 && self_lssim == 1.0 && ious_ok,
        format!(
            "identity bytes {identity_bytes}, mask 0/1 {zero_ok}/{one_ok}, round-trip mae {mae:.4}, \
             lssim(x,x) {self_lssim}, iou {ious:?}"
        ),
    )
}

fn filtering_efficacy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut plain, mut filtered) = (0.0, 0.0);
    for _ in 0..200 {
        let truth = random_affine(&mut rng);
        let src = random_points(&mut rng, 25);
        let mut dst = project(&truth, &src).unwrap();
        for p in dst.iter_mut().skip(20) {
            *p = [rng.gen_range(-0.5..1.5), rng.gen_range(-0.5..1.5)];
        }
        let mask: Vec<f64> = (0..25).map(|i| (i < 20) as u8 as f64).collect();
        let c = CorrespondenceSet::new(src, dst).unwrap();
        let unfiltered = solve_linear(&c).map_err(|e| e.to_string())?;
        let kept = solve_filtered(&c, &mask).map_err(|e| e.to_string())?;
        plain += vertex_displacement(&unfiltered, &truth, &UNIT_SQUARE).map_err(|e| e.to_string())?;
        filtered += vertex_displacement(&kept, &truth, &UNIT_SQUARE).map_err(|e| e.to_string())?;
    }
    let (plain, filtered) = (plain / 200.0, filtered / 200.0);
    check(
        filtered * 10.0 <= plain,
        format!("mean disp unfiltered {plain:.4e}, filtered {filtered:.4e}, ratio {:.1e}", plain / filtered.max(1e-300)),
    )
}

struct Trained {
    full: Report,
    ablations: Vec<(Ablation, Report)>,
    seconds: f64,
}

fn train_runs() -> Result<Trained, String> {
    let start = Instant::now();
    let enc = EncoderConfig::default();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let synth = SynthConfig { count: 300, resolution: enc.input_size, seed: 7, ..SynthConfig::default() };
    generate(&synth, dir.path()).map_err(|e| e.to_string())?;
    let train_set = load_split(dir.path(), Split::Train, enc.input_size, enc.grid()).map_err(|e| e.to_string())?;
    let test_set = load_split(dir.path(), Split::Test, enc.input_size, enc.grid()).map_err(|e| e.to_string())?;

    let run = |ablation: Option<Ablation>| -> Result<Report, String> {
        let mut cfg = TrainConfig { epochs: 20, lr: 1e-3, ..TrainConfig::default() };
        if let Some(a) = ablation {
            cfg.ablate(a);
        }
        let mut model = Model::new(&enc, 0).map_err(|e| e.to_string())?;
        train(&mut model, &train_set, &cfg, |_, _| Ok(true)).map_err(|e| e.to_string())?;
        evaluate(Some(&model), &test_set, &Method::ALL, cfg.filtering).map_err(|e| e.to_string())
    };
    let full = run(None)?;
    let seconds = start.elapsed().as_secs_f64();
    let mut ablations = Vec::new();
    for a in [Ablation::Att, Ablation::Par, Ablation::Filter] {
        ablations.push((a, run(Some(a))?));
    }
    Ok(Trained { full, ablations, seconds })
}

fn disp(r: &Report, m: Method) -> f64 {
    r.get(m).map(|m| m.mean_disp).unwrap_or(f64::NAN)
}

fn learning_smoke(t: &Trained) -> Outcome {
    let r = &t.full;
    let (model, identity) = (disp(r, Method::Model), disp(r, Method::Identity));
    let (argmax, wavg) = (disp(r, Method::Argmax), disp(r, Method::WeightedAvg));
    let iou = |m| r.get(m).map(|m| m.mean_iou).unwrap_or(f64::NAN);
    let ok = model < 0.5 * identity
        && iou(Method::Model) > iou(Method::Identity)
        && model < argmax
        && model < wavg
        && t.seconds < 1800.0;
    check(
        ok,
        format!(
            "disp model {model:.4} / identity {identity:.4} / argmax {argmax:.4} / weighted_avg {wavg:.4}, \
             iou model {:.3} / identity {:.3}, {:.0}s",
            iou(Method::Model),
            iou(Method::Identity),
            t.seconds
        ),
    )
}

fn ablation_order(t: &Trained) -> Outcome {
    let full = disp(&t.full, Method::Model);
    let parts: Vec<String> = t
        .ablations
        .iter()
        .map(|(a, r)| format!("-{} {:.4}", format!("{a:?}").to_lowercase(), disp(r, Method::Model)))
        .collect();
    let ok = t.ablations.iter().all(|(_, r)| full <= disp(r, Method::Model));
    check(ok, format!("disp full {full:.4}, {}", parts.join(", ")))
}

fn main() -> ExitCode {
    let trained = train_runs();
    let late = |f: fn(&Trained) -> Outcome| match &trained {
        Ok(t) => f(t),
        Err(e) => Err(format!("training failed: {e}")),
    };
    let results = [
        ("solver oracle equivalence", solver_oracles()),
        ("linear solve vs dlt gap", linear_vs_dlt_gap()),
        ("gradcheck suite", gradcheck_suite()),
        ("loss unit values", loss_values()),
        ("warp and composite invariants", warp_invariants()),
        ("filtering efficacy", filtering_efficacy()),
        ("learning smoke test", late(learning_smoke)),
        ("ablation ordering", late(ablation_order)),
    ];
    let mut all = true;
    for (i, (name, outcome)) in results.iter().enumerate() {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        all &= outcome.is_ok();
        println!("criterion {} {name}: {tag} ({detail})", i + 1);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
