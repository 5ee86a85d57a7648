//! Warp prediction and the LSSIM / IoU / Disp report.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::geometry::{
    solve_filtered, solve_linear, vertex_displacement, CorrespondenceSet, Homography, Point, UNIT_SQUARE,
};
use crate::imaging::{blend, composite, lssim, mask_iou, warp, Image};
use crate::model::{cell_centers, readout_baseline, AttentionMap, Model, Readout};

/// Where a predicted warp comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Learned target head.
    Model,
    /// Attention argmax readout.
    Argmax,
    /// Attention-weighted mean readout.
    WeightedAvg,
    /// No warp at all.
    Identity,
    /// The ground truth itself.
    Oracle,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Model, Method::Argmax, Method::WeightedAvg, Method::Identity, Method::Oracle];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Model => "model",
            Method::Argmax => "argmax",
            Method::WeightedAvg => "weighted_avg",
            Method::Identity => "identity",
            Method::Oracle => "oracle",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Method::Model | Method::Argmax | Method::WeightedAvg)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown method '{s}'")))
    }
}

/// Model outputs for one sample, detached from the graph.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub targets: Vec<Point>,
    pub attention: AttentionMap,
    pub mask: Vec<f64>,
}

pub fn predict(model: &Model, sample: &Sample) -> Result<Prediction> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let fg = g.constant(sample.fg_input.clone());
    let bg = g.constant(sample.bg_input.clone());
    let out = model.forward(&mut g, &vars, fg, bg)?;
    let targets = g.data(out.targets).chunks(2).map(|p| [p[0], p[1]]).collect();
    Ok(Prediction {
        targets,
        attention: AttentionMap::from_tensor(g.value(out.attention))?,
        mask: g.data(out.mask).to_vec(),
    })
}

/// Warp from predicted pairs: filtered by the mask when `filtering`, with a
/// plain solve over every pair if the selection is degenerate.
pub fn solve_prediction(sources: &[Point], targets: &[Point], mask: &[f64], filtering: bool) -> Result<Homography> {
    let c = CorrespondenceSet::new(sources.to_vec(), targets.to_vec())?;
    if filtering {
        match solve_filtered(&c, mask) {
            Ok(h) => return Ok(h),
            Err(Error::Degenerate(why)) => log::debug!("filtered solve degenerate ({why}); using all pairs"),
            Err(e) => return Err(e),
        }
    }
    solve_linear(&c)
}

/// Warp predicted by `method`. `pred` is required for model-based methods.
pub fn theta_for(method: Method, sample: &Sample, pred: Option<&Prediction>, grid: (usize, usize), filtering: bool) -> Result<Homography> {
    let need = || pred.ok_or_else(|| Error::Invalid(format!("method {} needs a model", method.as_str())));
    let sources = cell_centers(grid);
    match method {
        Method::Identity => Ok(Homography::IDENTITY),
        Method::Oracle => Ok(sample.record.gt_theta),
        Method::Model => {
            let p = need()?;
            solve_prediction(&sources, &p.targets, &p.mask, filtering)
        }
        Method::Argmax | Method::WeightedAvg => {
            let p = need()?;
            let mode = if method == Method::Argmax { Readout::Argmax } else { Readout::WeightedAvg };
            let targets = readout_baseline(&p.attention, grid, mode)?;
            solve_prediction(&sources, &targets, &p.mask, filtering)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub lssim: f64,
    pub iou: f64,
    pub disp: f64,
    pub theta: Homography,
}

/// Composite, warped mask and whether the warp could be applied. A warp
/// that cannot be inverted leaves the background untouched.
fn render(sample: &Sample, theta: &Homography) -> Result<(Image, Image)> {
    match composite(&sample.fg, &sample.mask, &sample.bg, theta) {
        Ok(r) => Ok((r.composite.quantized(), r.warped_mask)),
        Err(Error::Singular { det }) => {
            log::warn!("sample {}: singular predicted warp (det {det:e})", sample.record.id);
            let (w, h) = sample.bg.dims();
            let empty = Image::filled(w, h, 1, 0.0);
            Ok((blend(&Image::filled(w, h, 3, 0.0), &empty, &sample.bg)?, empty))
        }
        Err(e) => Err(e),
    }
}

pub fn score(sample: &Sample, theta: &Homography) -> Result<SampleMetrics> {
    let gt_theta = &sample.record.gt_theta;
    let gt_mask = warp(&sample.mask, gt_theta)?;
    let gt = match &sample.gt {
        Some(gt) => gt.clone(),
        None => composite(&sample.fg, &sample.mask, &sample.bg, gt_theta)?.composite.quantized(),
    };
    let (pred, pred_mask) = render(sample, theta)?;
    let disp = if theta.is_finite() {
        vertex_displacement(theta, gt_theta, &UNIT_SQUARE).unwrap_or(f64::INFINITY)
    } else {
        f64::INFINITY
    };
    Ok(SampleMetrics {
        id: sample.record.id.clone(),
        lssim: lssim(&pred, &gt, &gt_mask)?,
        iou: mask_iou(&pred_mask, &gt_mask)?,
        disp,
        theta: *theta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub mean_lssim: f64,
    pub mean_iou: f64,
    pub mean_disp: f64,
    pub samples: Vec<SampleMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub methods: Vec<MethodReport>,
}

impl Report {
    pub fn get(&self, method: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// Scores every sample under each method.
pub fn evaluate(model: Option<&Model>, samples: &[Sample], methods: &[Method], filtering: bool) -> Result<Report> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to evaluate".into()));
    }
    let wants_model = methods.iter().any(|m| m.needs_model());
    let model = match (wants_model, model) {
        (true, None) => return Err(Error::Invalid("model-based methods need a checkpoint".into())),
        (_, m) => m,
    };
    let mut per_method: Vec<Vec<SampleMetrics>> = vec![Vec::with_capacity(samples.len()); methods.len()];
    for sample in samples {
        let pred = match model {
            Some(m) if wants_model => Some(predict(m, sample)?),
            _ => None,
        };
        let grid = model.map(|m| m.config().grid()).unwrap_or((1, 1));
        for (k, &method) in methods.iter().enumerate() {
            let theta = theta_for(method, sample, pred.as_ref(), grid, filtering)?;
            per_method[k].push(score(sample, &theta)?);
        }
    }
    let methods = methods
        .iter()
        .zip(per_method)
        .map(|(&method, samples)| {
            let n = samples.len() as f64;
            MethodReport {
                method,
                mean_lssim: samples.iter().map(|s| s.lssim).sum::<f64>() / n,
                mean_iou: samples.iter().map(|s| s.iou).sum::<f64>() / n,
                mean_disp: samples.iter().map(|s| s.disp).sum::<f64>() / n,
                samples,
            }
        })
        .collect();
    Ok(Report { methods })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_sample, SynthConfig};
    use crate::model::EncoderConfig;

    fn samples(count: usize) -> Vec<Sample> {
        let enc = EncoderConfig::tiny();
        let synth = SynthConfig { count, resolution: enc.input_size, ..SynthConfig::default() };
        (0..count)
            .map(|i| {
                let r = render_sample(&synth, i).unwrap();
                Sample::from_images(r.record, (r.fg, r.mask, r.bg, Some(r.gt)), enc.input_size, enc.grid()).unwrap()
            })
            .collect()
    }

    #[test]
    fn oracle_is_perfect_and_identity_is_not() {
        let s = samples(4);
        let report = evaluate(None, &s, &[Method::Oracle, Method::Identity], true).unwrap();
        let oracle = report.get(Method::Oracle).unwrap();
        for m in &oracle.samples {
            assert_eq!(m.lssim, 1.0);
            assert_eq!(m.iou, 1.0);
            assert_eq!(m.disp, 0.0);
        }
        let identity = report.get(Method::Identity).unwrap();
        assert!(identity.mean_disp > 0.0);
        assert_eq!(identity.samples.len(), 4);
        assert!(evaluate(None, &s, &[Method::Model], true).is_err());
    }

    #[test]
    fn model_methods_produce_finite_reports() {
        let s = samples(2);
        let model = Model::new(&EncoderConfig::tiny(), 0).unwrap();
        let report = evaluate(Some(&model), &s, &Method::ALL, true).unwrap();
        assert_eq!(report.methods.len(), 5);
        for m in &report.methods {
            assert!(m.mean_iou >= 0.0 && m.mean_iou <= 1.0);
        }
        let json = serde_json::to_string(&report).unwrap();
        let back: Report = serde_json::from_str(&json).unwrap();
        assert_eq!(back.methods[0].samples.len(), 2);
    }
}
