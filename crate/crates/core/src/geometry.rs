//! Homogeneous-coordinate perspective algebra.
//!
//! Coordinates are normalized to `[0, 1]` per axis with the origin at the
//! top-left corner, x to the right and y downward.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{invert3, Graph, Tensor, Var};
use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Corners A, B, C, D of the normalized foreground frame.
pub const UNIT_SQUARE: [Point; 4] = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];

const W_EPS: f64 = 1e-9;
const GRAM_EPS: f64 = 1e-9;

/// A 3x3 perspective transform, row-major. Serializes as a flat array of
/// nine numbers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Homography(pub [f64; 9]);

impl Default for Homography {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Homography {
    pub const IDENTITY: Homography = Homography([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography([1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0])
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        Homography([sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0])
    }

    pub fn rotation(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Homography([c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0])
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.0[row * 3 + col]
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    pub fn inverse(&self) -> Result<Self> {
        invert3(&self.0).map(Homography)
    }

    /// `self * other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Homography) -> Self {
        let (a, b) = (&self.0, &other.0);
        let mut out = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 3 + j] = (0..3).map(|k| a[i * 3 + k] * b[k * 3 + j]).sum();
            }
        }
        Homography(out)
    }

    /// Rescales so the bottom-right entry is 1.
    pub fn normalized(&self) -> Result<Self> {
        let s = self.0[8];
        if s.abs() < 1e-12 {
            return Err(Error::Degenerate("theta[2][2] is zero".into()));
        }
        Ok(Homography(self.0.map(|v| v / s)))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn project_point(&self, p: Point) -> Option<Point> {
        let m = &self.0;
        let w = m[6] * p[0] + m[7] * p[1] + m[8];
        if w.abs() <= W_EPS {
            return None;
        }
        Some([
            (m[0] * p[0] + m[1] * p[1] + m[2]) / w,
            (m[3] * p[0] + m[4] * p[1] + m[5]) / w,
        ])
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![3, 3], self.0.to_vec()).expect("3x3")
    }
}

/// Applies `h` with perspective division to every point.
pub fn project(h: &Homography, points: &[Point]) -> Result<Vec<Point>> {
    points
        .iter()
        .enumerate()
        .map(|(index, &p)| {
            h.project_point(p).ok_or_else(|| {
                let m = &h.0;
                Error::PointAtInfinity {
                    index,
                    w: m[6] * p[0] + m[7] * p[1] + m[8],
                }
            })
        })
        .collect()
}

/// Source/target coordinate pairs with optional per-pair weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    source: Vec<Point>,
    target: Vec<Point>,
    weights: Option<Vec<f64>>,
}

impl CorrespondenceSet {
    pub fn new(source: Vec<Point>, target: Vec<Point>) -> Result<Self> {
        if source.is_empty() || source.len() != target.len() {
            return Err(Error::Invalid(format!(
                "need equal, nonzero numbers of sources and targets ({} vs {})",
                source.len(),
                target.len()
            )));
        }
        Ok(CorrespondenceSet {
            source,
            target,
            weights: None,
        })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.source.len() {
            return Err(Error::Invalid(format!(
                "{} weights for {} pairs",
                weights.len(),
                self.source.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::Invalid(format!("weight {w} outside [0, 1]")));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn source(&self) -> &[Point] {
        &self.source
    }

    pub fn target(&self) -> &[Point] {
        &self.target
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        CorrespondenceSet {
            source: rows.iter().map(|&i| self.source[i]).collect(),
            target: rows.iter().map(|&i| self.target[i]).collect(),
            weights: self.weights.as_ref().map(|w| rows.iter().map(|&i| w[i]).collect()),
        }
    }
}

fn homogeneous_rows(points: &[Point], weights: Option<&[f64]>) -> Vec<[f64; 3]> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let s = weights.map_or(1.0, |w| w[i].sqrt());
            [p[0] * s, p[1] * s, s]
        })
        .collect()
}

/// Least-squares fit `theta = Pt^T Ps (Ps^T Ps)^-1` over homogeneous
/// coordinates, with rows scaled by `sqrt(weight)` when weights are present.
///
/// The third row of the result is always `(0, 0, 1)` because the homogeneous
/// column of `Pt` is constant, so this solve is exact only for affine maps.
pub fn solve_linear(c: &CorrespondenceSet) -> Result<Homography> {
    if c.len() < 3 {
        return Err(Error::Degenerate(format!("{} pairs, need at least 3", c.len())));
    }
    let ps = homogeneous_rows(&c.source, c.weights());
    let pt = homogeneous_rows(&c.target, c.weights());
    let mut gram = [0.0; 9];
    let mut cross = [0.0; 9];
    for (s, t) in ps.iter().zip(&pt) {
        for i in 0..3 {
            for j in 0..3 {
                gram[i * 3 + j] += s[i] * s[j];
                cross[i * 3 + j] += t[i] * s[j];
            }
        }
    }
    let gram = Homography(gram);
    let det = gram.det();
    if !(det.abs() > GRAM_EPS) {
        return Err(Error::Degenerate(format!(
            "source Gram matrix is singular (det = {det:e}); sources may be collinear"
        )));
    }
    Ok(Homography(cross).compose(&gram.inverse()?))
}

/// Pairs kept by the filtering rule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub indices: Vec<usize>,
    /// True when fewer than four pairs were strictly above the mean and the
    /// highest-ranked pairs were taken instead.
    pub fallback: bool,
}

/// Keeps pairs whose mask value is strictly above the mean. When fewer than
/// four survive, keeps the eight highest-mask pairs plus any pair tied with
/// the eighth, so a uniform mask keeps every pair.
pub fn filter_indices(mask: &[f64]) -> Selection {
    let n = mask.len();
    if n == 0 {
        return Selection {
            indices: Vec::new(),
            fallback: true,
        };
    }
    let mean = mask.iter().sum::<f64>() / n as f64;
    let min = mask.iter().cloned().fold(f64::INFINITY, f64::min);
    // `> min` guards against the mean rounding below a constant mask
    let kept: Vec<usize> = (0..n).filter(|&i| mask[i] > mean && mask[i] > min).collect();
    if kept.len() >= 4 {
        return Selection {
            indices: kept,
            fallback: false,
        };
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| mask[b].total_cmp(&mask[a]).then(a.cmp(&b)));
    let cut = mask[order[order.len().min(8) - 1]];
    let mut indices: Vec<usize> = order
        .iter()
        .enumerate()
        .take_while(|&(rank, &i)| rank < 8 || mask[i] == cut)
        .map(|(_, &i)| i)
        .collect();
    indices.sort_unstable();
    Selection {
        indices,
        fallback: true,
    }
}

/// Fits `theta` on the pairs selected by [`filter_indices`].
pub fn solve_filtered(c: &CorrespondenceSet, mask: &[f64]) -> Result<Homography> {
    if c.len() < 4 {
        return Err(Error::Degenerate(format!("{} pairs, need at least 4", c.len())));
    }
    if mask.len() != c.len() {
        return Err(Error::Invalid(format!("{} mask values for {} pairs", mask.len(), c.len())));
    }
    if let Some(m) = mask.iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return Err(Error::Invalid(format!("mask value {m} outside [0, 1]")));
    }
    solve_linear(&c.subset(&filter_indices(mask).indices))
}

fn signed_area(q: &[Point; 4]) -> f64 {
    (0..4)
        .map(|i| {
            let (a, b) = (q[i], q[(i + 1) % 4]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |a: Point, b: Point, p: Point, d: f64| {
        d == 0.0
            && p[0] >= a[0].min(b[0])
            && p[0] <= a[0].max(b[0])
            && p[1] >= a[1].min(b[1])
            && p[1] <= a[1].max(b[1])
    };
    on(q1, q2, p1, d1) || on(q1, q2, p2, d2) || on(p1, p2, q1, d3) || on(p1, p2, q2, d4)
}

/// True when the quad's two pairs of opposite edges do not cross and it has
/// nonzero area.
pub fn is_simple_quad(q: &[Point; 4]) -> bool {
    signed_area(q).abs() > 1e-12
        && !segments_intersect(q[0], q[1], q[2], q[3])
        && !segments_intersect(q[1], q[2], q[3], q[0])
}

fn has_collinear_triple(q: &[Point; 4]) -> bool {
    let scale = q
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1.0);
    (0..4).any(|skip| {
        let tri: Vec<Point> = (0..4).filter(|&i| i != skip).map(|i| q[i]).collect();
        cross(tri[0], tri[1], tri[2]).abs() < 1e-10 * scale * scale
    })
}

/// Four annotated background vertices A', B', C', D' (normalized) paired with
/// the canonical foreground corners A, B, C, D.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadAnnotation {
    vertices: [Point; 4],
    canonical_source: [Point; 4],
}

impl QuadAnnotation {
    pub fn new(vertices: [Point; 4], canonical_source: [Point; 4]) -> Result<Self> {
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite vertex".into()));
        }
        if !is_simple_quad(&vertices) {
            return Err(Error::Degenerate("annotated quad is self-intersecting or empty".into()));
        }
        if !is_simple_quad(&canonical_source) {
            return Err(Error::Degenerate("canonical quad is self-intersecting or empty".into()));
        }
        if signed_area(&vertices).signum() != signed_area(&canonical_source).signum() {
            return Err(Error::Degenerate("annotated quad is mirrored relative to the canonical corners".into()));
        }
        Ok(QuadAnnotation {
            vertices,
            canonical_source,
        })
    }

    /// Annotation against the unit-square foreground frame.
    pub fn on_unit_square(vertices: [Point; 4]) -> Result<Self> {
        Self::new(vertices, UNIT_SQUARE)
    }

    /// Converts background pixel coordinates to normalized ones first.
    pub fn from_pixels(vertices_px: [Point; 4], bg_size: (u32, u32), canonical_source: [Point; 4]) -> Result<Self> {
        let (w, h) = (bg_size.0 as f64, bg_size.1 as f64);
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Invalid("background size must be positive".into()));
        }
        Self::new(vertices_px.map(|p| [p[0] / w, p[1] / h]), canonical_source)
    }

    pub fn vertices(&self) -> &[Point; 4] {
        &self.vertices
    }

    pub fn canonical_source(&self) -> &[Point; 4] {
        &self.canonical_source
    }
}

/// Exact four-point projective solve (direct linear transform with
/// `theta[2][2] = 1`).
pub fn solve_dlt(q: &QuadAnnotation) -> Result<Homography> {
    let (src, dst) = (&q.canonical_source, &q.vertices);
    if has_collinear_triple(src) || has_collinear_triple(dst) {
        return Err(Error::Degenerate("three of the four points are collinear".into()));
    }
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let ([x, y], [u, v]) = (src[i], dst[i]);
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Degenerate("four-point system is singular".into()))?;
    let theta = Homography([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0]);
    let projected = project(&theta, src)?;
    let worst = projected
        .iter()
        .zip(dst)
        .map(|(p, d)| (p[0] - d[0]).abs().max((p[1] - d[1]).abs()))
        .fold(0.0, f64::max);
    if !(worst < 1e-6) {
        return Err(Error::Degenerate(format!("four-point solve reprojects with error {worst:e}")));
    }
    Ok(theta)
}

/// Mean over the four corners of the per-axis-averaged L1 displacement
/// between where `pred` and `gt` send each corner.
pub fn vertex_displacement(pred: &Homography, gt: &Homography, canonical_source: &[Point; 4]) -> Result<f64> {
    let a = project(pred, canonical_source)?;
    let b = project(gt, canonical_source)?;
    Ok(a.iter()
        .zip(&b)
        .map(|(p, q)| ((p[0] - q[0]).abs() + (p[1] - q[1]).abs()) / 2.0)
        .sum::<f64>()
        / 4.0)
}

/// Differentiable version of [`solve_linear`] for targets on a graph.
///
/// `targets` is an `[n, 2]` node; `rows` optionally restricts the fit to a
/// subset of pairs and `weights` scales rows by `sqrt(weight)`. Sources are
/// constants.
pub fn solve_linear_graph(
    g: &mut Graph,
    source: &[Point],
    targets: Var,
    rows: Option<&[usize]>,
    weights: Option<&[f64]>,
) -> Result<Var> {
    let n = source.len();
    if g.shape(targets) != [n, 2] {
        return Err(Error::shape(
            "solve_linear",
            format!("{} sources but targets {:?}", n, g.shape(targets)),
        ));
    }
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..n).collect();
            &all
        }
    };
    if rows.len() < 3 {
        return Err(Error::Degenerate(format!("{} pairs, need at least 3", rows.len())));
    }
    let scale: Vec<f64> = rows.iter().map(|&i| weights.map_or(1.0, |w| w[i].sqrt())).collect();
    let picked: Vec<Point> = rows.iter().map(|&i| source[i]).collect();
    let ps_rows = homogeneous_rows(&picked, None);
    let ps_data: Vec<f64> = ps_rows
        .iter()
        .zip(&scale)
        .flat_map(|(r, s)| r.map(|v| v * s))
        .collect();
    let m = rows.len();
    let ps = g.constant(Tensor::new(vec![m, 3], ps_data)?);

    let tsel = g.gather(targets, rows)?;
    let ones = g.constant(Tensor::full(&[m, 1], 1.0));
    let pt = g.concat(&[tsel, ones], 1)?;
    let pt = if scale.iter().any(|&s| s != 1.0) {
        let s: Vec<f64> = scale.iter().flat_map(|&s| [s; 3]).collect();
        let s = g.constant(Tensor::new(vec![m, 3], s)?);
        g.mul(pt, s)?
    } else {
        pt
    };

    let pst = g.transpose(ps)?;
    let gram = g.matmul(pst, ps)?;
    let det = Homography(g.data(gram).try_into().expect("3x3")).det();
    if !(det.abs() > GRAM_EPS) {
        return Err(Error::Degenerate(format!("source Gram matrix is singular (det = {det:e})")));
    }
    let gram_inv = g.inverse3x3(gram)?;
    let ptt = g.transpose(pt)?;
    let cross = g.matmul(ptt, ps)?;
    g.matmul(cross, gram_inv)
}
