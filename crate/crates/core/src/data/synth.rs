//! Procedural stand-in for the annotated try-on pairs.
//!
//! Foregrounds are flat objects (spectacles, caps, ties) coloured by their
//! own canonical coordinates. Backgrounds carry a "face chart" drawn under
//! the ground-truth warp: the same coordinate colouring plus a few fixed
//! landmark blobs, over a smooth noise texture. That makes the correct
//! placement identifiable from the background alone.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::record::{write_manifest, SampleRecord, Split, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::geometry::{project, Homography, Point, QuadAnnotation, UNIT_SQUARE};
use crate::imaging::{composite, Image};

const MAX_DRAWS: usize = 1000;
const FRAME: (f64, f64) = (-0.1, 1.1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Spectacles,
    Cap,
    Necktie,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Spectacles, Family::Cap, Family::Necktie];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Spectacles => "spectacles",
            Family::Cap => "cap",
            Family::Necktie => "necktie",
        }
    }

    fn tint(self) -> f64 {
        match self {
            Family::Spectacles => 0.2,
            Family::Cap => 0.5,
            Family::Necktie => 0.8,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown family '{s}' (expected spectacles, cap or necktie)")))
    }
}

/// Sampling bounds of the ground-truth warp, composed about the image
/// centre as translation * perspective * rotation * scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThetaRanges {
    /// Max absolute shift per axis.
    pub translation: f64,
    /// Uniform scale bounds.
    pub scale: (f64, f64),
    /// Max ratio between the two axis scales.
    pub aspect: f64,
    /// Max absolute rotation, radians.
    pub rotation: f64,
    /// Max absolute bottom-row entries (in centred coordinates).
    pub perspective: f64,
}

impl Default for ThetaRanges {
    fn default() -> Self {
        ThetaRanges {
            translation: 0.12,
            scale: (0.55, 0.85),
            aspect: 1.15,
            rotation: 0.3,
            perspective: 0.3,
        }
    }
}

impl ThetaRanges {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        let ok = self.translation >= 0.0
            && lo > 0.0
            && lo <= hi
            && self.aspect >= 1.0
            && self.rotation >= 0.0
            && self.perspective >= 0.0
            && [self.translation, lo, hi, self.aspect, self.rotation, self.perspective]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid warp ranges {self:?}")))
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Homography {
        let mut u = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let (tx, ty) = (u(self.translation), u(self.translation));
        let angle = u(self.rotation);
        let (px, py) = (u(self.perspective), u(self.perspective));
        let log_aspect = u(self.aspect.ln());
        let s = if self.scale.0 < self.scale.1 {
            rng.gen_range(self.scale.0..=self.scale.1)
        } else {
            self.scale.0
        };
        let (sx, sy) = (s * (log_aspect / 2.0).exp(), s * (-log_aspect / 2.0).exp());
        let centre = Homography::translation(-0.5, -0.5);
        let persp = Homography([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, px, py, 1.0]);
        Homography::translation(0.5 + tx, 0.5 + ty)
            .compose(&persp)
            .compose(&Homography::rotation(angle))
            .compose(&Homography::scaling(sx, sy))
            .compose(&centre)
    }

    /// Rejection-samples a warp whose quad is simple, keeps its orientation,
    /// stays in front of the camera and lands inside the frame margin.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Homography> {
        self.validate()?;
        for _ in 0..MAX_DRAWS {
            let theta = self.draw(rng);
            if accept(&theta) {
                return theta.normalized();
            }
        }
        Err(Error::Invalid(format!(
            "no warp within {self:?} keeps the quad inside the frame after {MAX_DRAWS} draws"
        )))
    }
}

fn accept(theta: &Homography) -> bool {
    if !(theta.det().abs() > 1e-9) {
        return false;
    }
    let in_front = UNIT_SQUARE
        .iter()
        .all(|p| theta.0[6] * p[0] + theta.0[7] * p[1] + theta.0[8] > 1e-3);
    if !in_front {
        return false;
    }
    let Ok(corners) = project(theta, &UNIT_SQUARE) else { return false };
    let inside = corners.iter().flatten().all(|&v| (FRAME.0..=FRAME.1).contains(&v));
    inside && QuadAnnotation::on_unit_square([corners[0], corners[1], corners[2], corners[3]]).is_ok()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Total samples; a third (rounded down) go to the test split.
    pub count: usize,
    /// Side length in pixels of every image.
    pub resolution: usize,
    pub families: Vec<Family>,
    /// Distinct shapes per family in each split.
    pub shapes_per_split: usize,
    pub theta_ranges: ThetaRanges,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 300,
            resolution: 64,
            families: Family::ALL.to_vec(),
            shapes_per_split: 8,
            theta_ranges: ThetaRanges::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// 2000 training and 1000 test pairs.
    pub fn paper_scale() -> Self {
        SynthConfig { count: 3000, ..SynthConfig::default() }
    }

    pub fn split_counts(&self) -> (usize, usize) {
        let test = self.count / 3;
        (self.count - test, test)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 2 {
            return Err(Error::Invalid(format!("need at least 2 samples, got {}", self.count)));
        }
        if self.resolution < 8 {
            return Err(Error::Invalid(format!("resolution {} is below 8 pixels", self.resolution)));
        }
        if self.families.is_empty() || self.shapes_per_split == 0 {
            return Err(Error::Invalid("need at least one family and one shape per split".into()));
        }
        self.theta_ranges.validate()
    }
}

/// A foreground shape in canonical `[0, 1]^2` coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub family: Family,
    pub variant: usize,
    params: [f64; 4],
}

impl Shape {
    pub fn new(family: Family, variant: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a9e);
        rng.set_stream(((family as u64) << 32) | variant as u64);
        let params = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
        Shape { family, variant, params }
    }

    pub fn id(&self) -> String {
        format!("{}-{:03}", self.family.as_str(), self.variant)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        let [a, b, c, d] = self.params;
        match self.family {
            Family::Spectacles => {
                let (sep, rx, ry) = (0.18 + 0.08 * a, 0.12 + 0.06 * b, 0.09 + 0.07 * c);
                let cy = 0.45 + 0.1 * d;
                let lens = |cx: f64| ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2) <= 1.0;
                let bridge = (u - 0.5).abs() <= sep - rx + 0.02 && (v - (cy - 0.3 * ry)).abs() <= 0.025;
                let temple = (v - (cy - 0.6 * ry)).abs() <= 0.02 && (u < 0.5 - sep - 0.5 * rx || u > 0.5 + sep + 0.5 * rx);
                lens(0.5 - sep) || lens(0.5 + sep) || bridge || (temple && (0.03..=0.97).contains(&u))
            }
            Family::Cap => {
                let (r, base) = (0.3 + 0.12 * a, 0.6 + 0.12 * b);
                let brim_w = 0.35 + 0.12 * c;
                let brim_shift = 0.15 * (d - 0.5);
                let dome = v <= base && (u - 0.5).powi(2) + ((v - base) / 1.1).powi(2) <= r * r;
                let brim = v > base && v <= base + 0.08 && (u - 0.5 - brim_shift).abs() <= brim_w;
                dome || brim
            }
            Family::Necktie => {
                let knot_w = 0.06 + 0.04 * a;
                let (top, knot_bot) = (0.08 + 0.06 * b, 0.22 + 0.06 * b);
                let (blade_w, tip) = (0.12 + 0.08 * c, 0.85 + 0.1 * d);
                let x = (u - 0.5).abs();
                let knot = v >= top && v <= knot_bot && x <= knot_w + 0.3 * (knot_bot - v);
                let widest = 0.75 * tip;
                let blade = if v > knot_bot && v <= widest {
                    x <= knot_w + (blade_w - knot_w) * (v - knot_bot) / (widest - knot_bot)
                } else if v > widest && v <= tip {
                    x <= blade_w * (tip - v) / (tip - widest)
                } else {
                    false
                };
                knot || blade
            }
        }
    }

    /// Foreground image and soft (2x2 supersampled) mask.
    pub fn render(&self, size: usize) -> (Image, Image) {
        let s = size as f64;
        let coverage = |x: usize, y: usize| {
            let mut hits = 0;
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                if self.contains((x as f64 + ox) / s, (y as f64 + oy) / s) {
                    hits += 1;
                }
            }
            hits as f64 / 4.0
        };
        let mask = Image::from_fn(size, size, 1, |x, y, _| coverage(x, y));
        let tint = self.family.tint();
        let fg = Image::from_fn(size, size, 3, |x, y, c| {
            if coverage(x, y) == 0.0 {
                return 0.0;
            }
            let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            chart_colour(u, v, c, tint)
        });
        (fg, mask)
    }
}

fn chart_colour(u: f64, v: f64, c: usize, third: f64) -> f64 {
    match c {
        0 => 0.1 + 0.8 * u.clamp(0.0, 1.0),
        1 => 0.1 + 0.8 * v.clamp(0.0, 1.0),
        _ => third,
    }
}

/// Landmarks in canonical coordinates with their blue-channel value.
const LANDMARKS: [(Point, f64); 5] = [
    ([0.3, 0.45], 0.95),
    ([0.7, 0.45], 0.95),
    ([0.5, 0.62], 0.05),
    ([0.5, 0.85], 0.7),
    ([0.5, 0.12], 0.3),
];

/// Smooth noise from a bilinearly interpolated random lattice.
fn noise_texture(size: usize, rng: &mut ChaCha8Rng) -> Image {
    const LATTICE: usize = 5;
    let grid: Vec<f64> = (0..LATTICE * LATTICE * 3).map(|_| rng.gen_range(0.15..0.85)).collect();
    let cell = (size - 1) as f64 / (LATTICE - 1) as f64;
    Image::from_fn(size, size, 3, |x, y, c| {
        let (gx, gy) = (x as f64 / cell, y as f64 / cell);
        let (x0, y0) = ((gx as usize).min(LATTICE - 2), (gy as usize).min(LATTICE - 2));
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        let at = |i: usize, j: usize| grid[(j * LATTICE + i) * 3 + c];
        at(x0, y0) * (1.0 - fx) * (1.0 - fy)
            + at(x0 + 1, y0) * fx * (1.0 - fy)
            + at(x0, y0 + 1) * (1.0 - fx) * fy
            + at(x0 + 1, y0 + 1) * fx * fy
    })
}

/// Noise texture with the chart drawn under `theta`. The chart spans a
/// margin around the canonical square and fades out at its border.
pub fn render_background(size: usize, theta: &Homography, rng: &mut ChaCha8Rng) -> Result<Image> {
    let inv = theta.inverse()?;
    let noise = noise_texture(size, rng);
    let s = size as f64;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let p = [(x as f64 + 0.5) / s, (y as f64 + 0.5) / s];
            let q = inv.project_point(p);
            for c in 0..3 {
                let base = noise.get(x, y, c);
                let Some([u, v]) = q else {
                    data.push(base);
                    continue;
                };
                let edge = (u + 0.2).min(1.2 - u).min(v + 0.2).min(1.2 - v);
                let alpha = (edge / 0.1).clamp(0.0, 1.0);
                let mut chart = chart_colour(u, v, c, 0.5);
                for (centre, blue) in LANDMARKS {
                    let d2 = (u - centre[0]).powi(2) + (v - centre[1]).powi(2);
                    let blob = (-d2 / (2.0 * 0.05f64.powi(2))).exp();
                    let target = if c == 2 { blue } else { 1.0 - chart };
                    chart += blob * (target - chart);
                }
                data.push((alpha * chart + (1.0 - alpha) * base).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(size, size, 3, data)
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Images and record of sample `index`, not yet written.
pub struct Rendered {
    pub record: SampleRecord,
    pub fg: Image,
    pub mask: Image,
    pub bg: Image,
    pub gt: Image,
}

pub fn render_sample(cfg: &SynthConfig, index: usize) -> Result<Rendered> {
    let (n_train, _) = cfg.split_counts();
    let split = if index < n_train { Split::Train } else { Split::Test };
    let mut rng = sample_rng(cfg.seed, index);
    let family = cfg.families[index % cfg.families.len()];
    let offset = if split == Split::Train { 0 } else { cfg.shapes_per_split };
    let shape = Shape::new(family, offset + rng.gen_range(0..cfg.shapes_per_split), cfg.seed);
    let theta = cfg.theta_ranges.sample(&mut rng)?;

    let (fg, mask) = shape.render(cfg.resolution);
    let bg = render_background(cfg.resolution, &theta, &mut rng)?;
    // composite from what will be on disk so the stored result is reproducible
    let (fg, mask, bg) = (fg.quantized(), mask.quantized(), bg.quantized());
    let gt = composite(&fg, &mask, &bg, &theta)?.composite.quantized();

    let corners = project(&theta, &UNIT_SQUARE)?;
    let id = format!("{:05}", index);
    let file = |kind: &str| PathBuf::from(split.as_str()).join(kind).join(format!("{id}.png"));
    let record = SampleRecord {
        id: id.clone(),
        split,
        shape_id: Some(shape.id()),
        fg_path: file("fg"),
        fg_mask_path: file("mask"),
        bg_path: file("bg"),
        gt_path: Some(file("gt")),
        gt_vertices: [corners[0], corners[1], corners[2], corners[3]],
        gt_theta: theta,
    };
    record.check_vertices()?;
    Ok(Rendered { record, fg, mask, bg, gt })
}

/// Writes the dataset under `root` and returns its records.
pub fn generate(cfg: &SynthConfig, root: &Path) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    for split in [Split::Train, Split::Test] {
        for kind in ["fg", "mask", "bg", "gt"] {
            let dir = root.join(split.as_str()).join(kind);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    let mut records = Vec::with_capacity(cfg.count);
    for index in 0..cfg.count {
        let r = render_sample(cfg, index)?;
        r.fg.save_png(&root.join(&r.record.fg_path))?;
        r.mask.save_png(&root.join(&r.record.fg_mask_path))?;
        r.bg.save_png(&root.join(&r.record.bg_path))?;
        if let Some(gt) = &r.record.gt_path {
            r.gt.save_png(&root.join(gt))?;
        }
        log::debug!("sample {} ({:?}, {})", r.record.id, r.record.split, shape_label(&r.record));
        records.push(r.record);
    }
    write_manifest(&root.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

fn shape_label(r: &SampleRecord) -> &str {
    r.shape_id.as_deref().unwrap_or("-")
}
