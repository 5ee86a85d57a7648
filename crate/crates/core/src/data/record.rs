//! Dataset records, the JSON-lines manifest, annotation ingest and sample
//! loading.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{project, solve_dlt, Homography, Point, QuadAnnotation, UNIT_SQUARE};
use crate::imaging::Image;
use crate::model::{background_input, cell_centers, foreground_input, nearest_cell};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const REPROJECTION_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split '{other}' (expected train or test)"))),
        }
    }
}

/// One foreground/background pair with its ground-truth warp. Paths are
/// relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    /// Foreground shape identifier; train and test never share one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape_id: Option<String>,
    pub fg_path: PathBuf,
    pub fg_mask_path: PathBuf,
    pub bg_path: PathBuf,
    /// Ground-truth composite, when one was rendered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_path: Option<PathBuf>,
    /// A'B'C'D' in normalized background coordinates.
    pub gt_vertices: [Point; 4],
    pub gt_theta: Homography,
}

impl SampleRecord {
    /// Checks that `gt_theta` maps the canonical corners onto `gt_vertices`.
    pub fn check_vertices(&self) -> Result<()> {
        let projected = project(&self.gt_theta, &UNIT_SQUARE)?;
        for (i, (p, v)) in projected.iter().zip(&self.gt_vertices).enumerate() {
            let err = (p[0] - v[0]).abs().max((p[1] - v[1]).abs());
            if !(err < REPROJECTION_TOL) {
                return Err(Error::Invalid(format!(
                    "sample {}: vertex {i} reprojects {err:e} away from its annotation",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn append_manifest(path: &Path, record: &SampleRecord) -> Result<()> {
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    file.write_all(&line).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        records.push(r);
    }
    Ok(records)
}

/// Output of the annotation tool for one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub id: String,
    /// Background size in pixels, `[w, h]`.
    pub bg_size: [u32; 2],
    /// A'B'C'D' in normalized background coordinates.
    pub vertices: [Point; 4],
    pub fg_ref: PathBuf,
    pub bg_ref: PathBuf,
    /// Defaults to `fg_ref` with its `fg` directory replaced by `mask`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_ref: Option<PathBuf>,
    pub annotator: String,
    pub timestamp: String,
}

impl AnnotationRecord {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("annotation does not match the schema: {e}")))
    }

    pub fn mask_path(&self) -> PathBuf {
        if let Some(m) = &self.mask_ref {
            return m.clone();
        }
        let mut out = PathBuf::new();
        let mut replaced = false;
        for part in self.fg_ref.components() {
            if !replaced && part.as_os_str() == "fg" {
                out.push("mask");
                replaced = true;
            } else {
                out.push(part);
            }
        }
        out
    }

    pub fn quad(&self) -> Result<QuadAnnotation> {
        if self.bg_size.contains(&0) {
            return Err(Error::Invalid(format!("annotation {}: empty background size", self.id)));
        }
        if self.vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("annotation {}: non-finite vertex", self.id)));
        }
        QuadAnnotation::on_unit_square(self.vertices)
    }
}

/// Ground-truth warp from an annotation, verified by reprojection.
pub fn ingest_annotation(a: &AnnotationRecord, split: Split) -> Result<SampleRecord> {
    let theta = solve_dlt(&a.quad()?)?;
    let record = SampleRecord {
        id: a.id.clone(),
        split,
        shape_id: None,
        fg_path: a.fg_ref.clone(),
        fg_mask_path: a.mask_path(),
        bg_path: a.bg_ref.clone(),
        gt_path: None,
        gt_vertices: a.vertices,
        gt_theta: theta,
    };
    record.check_vertices()?;
    Ok(record)
}

pub fn ingest_file(path: &Path, split: Split) -> Result<SampleRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ingest_annotation(&AnnotationRecord::from_json(&text)?, split)
}

/// Per-cell supervision derived from the ground-truth warp.
#[derive(Clone, Debug, PartialEq)]
pub struct CellTargets {
    /// Projected cell centres, `[n]` normalized points.
    pub points: Vec<Point>,
    /// Background cell holding each target, `None` when it leaves the grid.
    pub cells: Vec<Option<usize>>,
}

pub fn cell_targets(theta: &Homography, grid: (usize, usize)) -> Result<CellTargets> {
    let points = project(theta, &cell_centers(grid))?;
    let cells = points.iter().map(|&p| nearest_cell(p, grid)).collect();
    Ok(CellTargets { points, cells })
}

/// Images and supervision of one sample, ready for the model.
#[derive(Clone, Debug)]
pub struct Sample {
    pub record: SampleRecord,
    pub fg: Image,
    pub mask: Image,
    pub bg: Image,
    pub gt: Option<Image>,
    pub fg_input: Tensor,
    pub bg_input: Tensor,
    pub targets: CellTargets,
}

impl Sample {
    /// Wraps images already in memory.
    pub fn from_images(
        record: SampleRecord,
        images: (Image, Image, Image, Option<Image>),
        input_size: usize,
        grid: (usize, usize),
    ) -> Result<Self> {
        let (fg, mask, bg, gt) = images;
        Ok(Sample {
            fg_input: foreground_input(&fg, &mask, input_size)?,
            bg_input: background_input(&bg, input_size)?,
            targets: cell_targets(&record.gt_theta, grid)?,
            record,
            fg,
            mask,
            bg,
            gt,
        })
    }
}

pub fn load_sample(root: &Path, record: &SampleRecord, input_size: usize, grid: (usize, usize)) -> Result<Sample> {
    let fg = Image::load_rgb(&root.join(&record.fg_path))?;
    let mask = Image::load_mask(&root.join(&record.fg_mask_path))?;
    let bg = Image::load_rgb(&root.join(&record.bg_path))?;
    let gt = match &record.gt_path {
        Some(p) => Some(Image::load_rgb(&root.join(p))?),
        None => None,
    };
    Sample::from_images(record.clone(), (fg, mask, bg, gt), input_size, grid)
}

/// The `index`-th sample of `split` listed in `<root>/manifest.jsonl`.
pub fn load_batch(root: &Path, split: Split, index: usize, input_size: usize, grid: (usize, usize)) -> Result<Sample> {
    let records = read_manifest(&root.join(MANIFEST_FILE))?;
    let rec = records
        .iter()
        .filter(|r| r.split == split)
        .nth(index)
        .ok_or_else(|| Error::Invalid(format!("no {} sample at index {index}", split.as_str())))?;
    load_sample(root, rec, input_size, grid)
}

/// Every sample of a split, in manifest order.
pub fn load_split(root: &Path, split: Split, input_size: usize, grid: (usize, usize)) -> Result<Vec<Sample>> {
    read_manifest(&root.join(MANIFEST_FILE))?
        .iter()
        .filter(|r| r.split == split)
        .map(|r| load_sample(root, r, input_size, grid))
        .collect()
}
