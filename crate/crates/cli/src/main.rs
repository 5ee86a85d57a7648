use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use corrwarp::autodiff::checkpoint;
use corrwarp::config::RunConfig;
use corrwarp::data::{self, Family, Split, MANIFEST_FILE};
use corrwarp::eval::{evaluate, Method};
use corrwarp::geometry::{solve_dlt, Homography};
use corrwarp::gradcheck::{self, CheckResult};
use corrwarp::imaging::{composite, Image};
use corrwarp::model::{Ablation, AttentionNorm, EncoderConfig, Model};
use corrwarp::train::{train, EpochLog};

const LOG_ENV: &str = "CORRWARP_LOG";

#[derive(Parser)]
#[command(name = "corrwarp", version, about = "Correspondence-driven perspective warping for image composition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint and the reference warps on a split.
    Eval(EvalArgs),
    /// Warp a foreground onto a background.
    Compose(ComposeArgs),
    /// Turn annotation files into dataset records.
    Ingest(IngestArgs),
    /// Check every gradient rule against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset root to create.
    #[arg(long)]
    out: PathBuf,
    /// JSON run config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Comma-separated subset of spectacles, cap, necktie.
    #[arg(long, value_delimiter = ',')]
    families: Option<Vec<String>>,
    /// 2000 training and 1000 test pairs.
    #[arg(long, conflicts_with = "count")]
    paper_scale: bool,
    /// Uniform scale bounds as "min,max".
    #[arg(long, value_delimiter = ',')]
    scale: Option<Vec<f64>>,
    #[arg(long)]
    perspective: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root containing manifest.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for config, log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_att: Option<f64>,
    #[arg(long)]
    lambda_par: Option<f64>,
    #[arg(long)]
    lambda_msk: Option<f64>,
    /// Comma-separated components to switch off: att, par, msk, filter.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
    /// Normalize the attention loss by n^2 instead of n.
    #[arg(long)]
    per_entry_attention: bool,
    /// Use the smallest encoder (32 px input, 4x4 grid).
    #[arg(long)]
    tiny: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Needed for the model, argmax and weighted_avg methods.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run config; defaults to config.json next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Comma-separated methods: model, argmax, weighted_avg, identity, oracle.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ComposeArgs {
    #[arg(long)]
    fg: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    bg: PathBuf,
    /// Nine comma-separated row-major entries in normalized coordinates.
    #[arg(long, value_delimiter = ',', group = "warp")]
    theta: Option<Vec<f64>>,
    /// JSON file holding a nine-entry array.
    #[arg(long, group = "warp")]
    theta_file: Option<PathBuf>,
    /// Annotation JSON; the warp comes from its four vertices.
    #[arg(long, group = "warp")]
    annotation: Option<PathBuf>,
    /// Directory for composite.png, warped_fg.png and warped_mask.png.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// Annotation JSON files.
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Manifest to append records to; records go to stdout either way.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    split: String,
    /// Require the referenced images to exist under this root.
    #[arg(long)]
    root: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Emit JSON instead of text lines.
    #[arg(long)]
    json: bool,
    /// Skip the end-to-end model check.
    #[arg(long)]
    ops_only: bool,
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or(LOG_ENV, "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compose(a) => cmd_compose(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<corrwarp::Error>() {
                Some(corrwarp::Error::NonFinite { .. }) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn base_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    })
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = base_config(a.config.as_deref())?;
    let s = &mut cfg.synth;
    if a.paper_scale {
        s.count = corrwarp::data::SynthConfig::paper_scale().count;
    }
    if let Some(v) = a.count {
        s.count = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.resolution {
        s.resolution = v;
    }
    if let Some(f) = a.families {
        s.families = f.iter().map(|n| n.parse()).collect::<Result<Vec<Family>, _>>()?;
    }
    if let Some(v) = a.scale {
        if v.len() != 2 {
            bail!("--scale takes \"min,max\"");
        }
        s.theta_ranges.scale = (v[0], v[1]);
    }
    if let Some(v) = a.perspective {
        s.theta_ranges.perspective = v;
    }
    cfg.synth.validate()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let records = data::generate(&cfg.synth, &a.out)?;
    cfg.save(&a.out.join("config.json"))?;
    let (train, test) = cfg.synth.split_counts();
    log::info!("wrote {} samples ({train} train, {test} test) to {}", records.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn resolve_train(a: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = base_config(a.config.as_deref())?;
    if a.tiny {
        cfg.encoder = EncoderConfig::tiny();
    }
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.lambda_att {
        t.lambda_att = v;
    }
    if let Some(v) = a.lambda_par {
        t.lambda_par = v;
    }
    if let Some(v) = a.lambda_msk {
        t.lambda_msk = v;
    }
    if a.per_entry_attention {
        t.attention_norm = AttentionNorm::PerEntry;
    }
    for name in &a.ablate {
        t.ablate(name.parse::<Ablation>()?);
    }
    cfg.encoder.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn check_dataset(data: &Path) -> anyhow::Result<()> {
    let manifest = data.join(MANIFEST_FILE);
    if !manifest.is_file() {
        bail!("{} has no {MANIFEST_FILE}", data.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct LogLine<'a> {
    #[serde(flatten)]
    epoch: &'a EpochLog,
    best: bool,
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let cfg = resolve_train(&a)?;
    check_dataset(&a.data)?;
    let samples = data::load_split(&a.data, Split::Train, cfg.encoder.input_size, cfg.encoder.grid())
        .context("loading the training split")?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    cfg.save(&a.out.join("config.json"))?;
    let hash = cfg.hash();
    log::info!("training on {} samples, config {}", samples.len(), &hash[..12]);

    let log_path = a.out.join("train_log.jsonl");
    let mut log_file = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut model = Model::new(&cfg.encoder, cfg.train.seed)?;
    let mut best = f64::INFINITY;
    let save = |model: &Model, name: &str| -> corrwarp::Result<()> {
        let named: Vec<(String, &corrwarp::autodiff::Tensor)> =
            model.named().map(|(n, t)| (n.to_string(), t)).collect();
        checkpoint::save(&a.out.join(name), &named, &hash)
    };
    train(&mut model, &samples, &cfg.train, |log, model| {
        let improved = log.loss.total < best;
        if improved {
            best = log.loss.total;
            save(model, "best.ckpt")?;
        }
        let mut line = serde_json::to_vec(&LogLine { epoch: log, best: improved })?;
        line.push(b'\n');
        log_file
            .write_all(&line)
            .and_then(|_| log_file.flush())
            .map_err(|e| corrwarp::Error::Io { path: log_path.clone(), source: e })?;
        Ok(true)
    })?;
    save(&model, "final.ckpt")?;
    log::info!("checkpoints written to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    let split: Split = a.split.parse()?;
    let methods: Vec<Method> = match &a.methods {
        Some(m) => m.iter().map(|s| s.parse()).collect::<Result<_, _>>()?,
        None if a.checkpoint.is_some() => Method::ALL.to_vec(),
        None => vec![Method::Identity, Method::Oracle],
    };
    if methods.is_empty() {
        bail!("no evaluation methods given");
    }
    check_dataset(&a.data)?;
    let config_path = match (&a.config, &a.checkpoint) {
        (Some(c), _) => Some(c.clone()),
        (None, Some(ck)) => Some(ck.parent().unwrap_or(Path::new(".")).join("config.json")),
        (None, None) => None,
    };
    let cfg = match &config_path {
        Some(p) => RunConfig::from_file(p)?,
        None => {
            // reference methods only: match the encoder input to the stored images
            let mut cfg = RunConfig::default();
            let records = data::read_manifest(&a.data.join(data::MANIFEST_FILE))?;
            if let Some(r) = records.first() {
                let fg = corrwarp::imaging::Image::load_rgb(&a.data.join(&r.fg_path))?;
                cfg.encoder.input_size = fg.width();
            }
            cfg
        }
    };
    let model = match &a.checkpoint {
        Some(ck) => {
            let (named, manifest) = checkpoint::load(ck)?;
            if manifest.config_hash != cfg.hash() {
                bail!(
                    "checkpoint {} was trained with config {} but {} hashes to {}",
                    ck.display(),
                    manifest.config_hash,
                    config_path.as_deref().unwrap_or(Path::new("defaults")).display(),
                    cfg.hash()
                );
            }
            Some(Model::from_named(&cfg.encoder, named)?)
        }
        None => None,
    };
    if model.is_none() && methods.iter().any(|m| m.needs_model()) {
        bail!("methods model, argmax and weighted_avg need --checkpoint");
    }
    let samples = data::load_split(&a.data, split, cfg.encoder.input_size, cfg.encoder.grid())
        .with_context(|| format!("loading the {} split", split.as_str()))?;
    let report = evaluate(model.as_ref(), &samples, &methods, cfg.train.filtering)?;
    for m in &report.methods {
        log::info!(
            "{:>12}: lssim {:.4}  iou {:.4}  disp {:.4}",
            m.method.as_str(),
            m.mean_lssim,
            m.mean_iou,
            m.mean_disp
        );
    }
    let json = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_compose(a: ComposeArgs) -> anyhow::Result<ExitCode> {
    let theta = if let Some(v) = a.theta {
        Homography(v.try_into().map_err(|_| anyhow!("--theta needs nine values"))?)
    } else if let Some(p) = &a.theta_file {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        serde_json::from_str::<Homography>(&text).with_context(|| format!("{} is not a nine-entry array", p.display()))?
    } else if let Some(p) = &a.annotation {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        solve_dlt(&data::AnnotationRecord::from_json(&text)?.quad()?)?
    } else {
        bail!("one of --theta, --theta-file or --annotation is required");
    };
    if !theta.is_finite() {
        bail!("warp has non-finite entries");
    }
    let fg = Image::load_rgb(&a.fg)?;
    let mask = Image::load_mask(&a.mask)?;
    let bg = Image::load_rgb(&a.bg)?;
    let r = composite(&fg, &mask, &bg, &theta)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    r.composite.save_png(&a.out.join("composite.png"))?;
    r.warped_fg.save_png(&a.out.join("warped_fg.png"))?;
    r.warped_mask.save_png(&a.out.join("warped_mask.png"))?;
    log::info!("composite written to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_ingest(a: IngestArgs) -> anyhow::Result<ExitCode> {
    let split: Split = a.split.parse()?;
    let mut records = Vec::new();
    for f in &a.files {
        let r = data::ingest_file(f, split).with_context(|| format!("ingesting {}", f.display()))?;
        if let Some(root) = &a.root {
            for p in [&r.fg_path, &r.fg_mask_path, &r.bg_path] {
                if !root.join(p).is_file() {
                    bail!("{}: referenced file {} does not exist", f.display(), root.join(p).display());
                }
            }
        }
        records.push(r);
    }
    for r in &records {
        if let Some(m) = &a.manifest {
            data::append_manifest(m, r)?;
        }
        println!("{}", serde_json::to_string(r)?);
    }
    Ok(ExitCode::SUCCESS)
}

fn known_op(name: &str) -> anyhow::Result<&'static str> {
    const OPS: [&str; 24] = [
        "matmul", "transpose", "conv2d", "relu", "sigmoid", "softmax_rows", "abs", "sqrt", "smooth_l1", "add", "sub",
        "mul", "div", "add_row_bias", "scale", "add_scalar", "expand", "sum", "mean", "gather", "concat", "reshape",
        "matrix_inverse_3x3", "bilinear_gather",
    ];
    OPS.into_iter().find(|&o| o == name).ok_or_else(|| anyhow!("unknown op '{name}'"))
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let corrupt = a.corrupt.as_deref().map(known_op).transpose()?;
    let mut results: Vec<CheckResult> = gradcheck::op_checks(a.seed, a.tolerance, corrupt)?;
    if !a.ops_only {
        results.push(gradcheck::model_check(a.seed, a.tolerance, corrupt)?);
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&results)?);
    } else {
        for r in &results {
            println!(
                "{:<24} max_rel_error {:.3e}  ({} values)  {}",
                r.name,
                r.max_rel_error,
                r.checked,
                if r.passed { "ok" } else { "FAIL" }
            );
        }
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        eprintln!("{failed} of {} gradient checks exceeded {:e}", results.len(), a.tolerance);
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
