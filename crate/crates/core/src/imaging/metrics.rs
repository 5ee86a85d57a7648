//! Local SSIM inside the foreground bounding box, and binarized mask IoU.

use crate::error::{Error, Result};
use crate::imaging::Image;

const WINDOW_RADIUS: usize = 5;
const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const DYNAMIC_RANGE: f64 = 1.0;

/// Tight bounding box `(x0, y0, width, height)` of mask pixels above 0.5.
pub fn mask_bbox(mask: &Image) -> Option<(usize, usize, usize, usize)> {
    let (w, h) = mask.dims();
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y, 0) > 0.5 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0 != usize::MAX).then(|| (x0, y0, x1 - x0 + 1, y1 - y0 + 1))
}

fn gaussian_taps() -> [f64; 2 * WINDOW_RADIUS + 1] {
    let mut taps = [0.0; 2 * WINDOW_RADIUS + 1];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - WINDOW_RADIUS as f64;
        *t = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    taps
}

/// Separable Gaussian filter over one channel. The window is truncated at
/// the borders and renormalized; since the truncated window is a product of
/// per-axis truncations, normalizing each pass separately is exact.
fn gaussian_filter(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let taps = gaussian_taps();
    let r = WINDOW_RADIUS as i64;
    let pass = |src: &[f64], len: usize, stride: usize, lines: usize, line_stride: usize| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for line in 0..lines {
            for i in 0..len as i64 {
                let (mut acc, mut norm) = (0.0, 0.0);
                for k in -r..=r {
                    let j = i + k;
                    if j < 0 || j >= len as i64 {
                        continue;
                    }
                    let t = taps[(k + r) as usize];
                    acc += t * src[line * line_stride + j as usize * stride];
                    norm += t;
                }
                out[line * line_stride + i as usize * stride] = acc / norm;
            }
        }
        out
    };
    let horizontal = pass(src, w, 1, h, w);
    pass(&horizontal, h, w, w, 1)
}

/// Mean SSIM between two same-sized images, averaged over pixels and
/// channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(Error::Invalid(format!(
            "ssim of {:?}x{} vs {:?}x{}",
            a.dims(),
            a.channels(),
            b.dims(),
            b.channels()
        )));
    }
    let (w, h) = a.dims();
    let c1 = (K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (K2 * DYNAMIC_RANGE).powi(2);
    let mut total = 0.0;
    for c in 0..a.channels() {
        let x: Vec<f64> = (0..w * h).map(|i| a.get(i % w, i / w, c)).collect();
        let y: Vec<f64> = (0..w * h).map(|i| b.get(i % w, i / w, c)).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (gaussian_filter(&x, w, h), gaussian_filter(&y, w, h));
        let (exx, eyy, exy) = (gaussian_filter(&xx, w, h), gaussian_filter(&yy, w, h), gaussian_filter(&xy, w, h));
        for i in 0..w * h {
            let vx = exx[i] - mx[i] * mx[i];
            let vy = eyy[i] - my[i] * my[i];
            let cov = exy[i] - mx[i] * my[i];
            total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (w * h * a.channels()) as f64)
}

/// SSIM restricted to the bounding box of `gt_mask > 0.5`.
pub fn lssim(pred: &Image, gt: &Image, gt_mask: &Image) -> Result<f64> {
    if pred.dims() != gt.dims() || gt_mask.dims() != gt.dims() {
        return Err(Error::Invalid("lssim inputs must share dimensions".into()));
    }
    let (x0, y0, bw, bh) = mask_bbox(gt_mask).ok_or_else(|| Error::Invalid("ground-truth mask is empty".into()))?;
    ssim(&pred.crop(x0, y0, bw, bh), &gt.crop(x0, y0, bw, bh))
}

/// Intersection over union of the two masks binarized at 0.5. Two empty masks
/// score 1.
pub fn mask_iou(pred_mask: &Image, gt_mask: &Image) -> Result<f64> {
    if pred_mask.dims() != gt_mask.dims() {
        return Err(Error::Invalid(format!(
            "mask_iou of {:?} vs {:?}",
            pred_mask.dims(),
            gt_mask.dims()
        )));
    }
    let (w, h) = gt_mask.dims();
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            let a = pred_mask.get(x, y, 0) > 0.5;
            let b = gt_mask.get(x, y, 0) > 0.5;
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Per-pixel window loop with explicit weighted moments.
    fn brute_force_ssim(a: &Image, b: &Image) -> f64 {
        let (w, h) = a.dims();
        let r = WINDOW_RADIUS as i64;
        let (c1, c2) = ((K1 * DYNAMIC_RANGE).powi(2), (K2 * DYNAMIC_RANGE).powi(2));
        let mut total = 0.0;
        for c in 0..a.channels() {
            for py in 0..h as i64 {
                for px in 0..w as i64 {
                    let mut window = Vec::new();
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (x, y) = (px + dx, py + dy);
                            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                                continue;
                            }
                            let wt = (-((dx * dx + dy * dy) as f64) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
                            window.push((wt, a.get(x as usize, y as usize, c), b.get(x as usize, y as usize, c)));
                        }
                    }
                    let norm: f64 = window.iter().map(|t| t.0).sum();
                    let mx = window.iter().map(|t| t.0 * t.1).sum::<f64>() / norm;
                    let my = window.iter().map(|t| t.0 * t.2).sum::<f64>() / norm;
                    let vx = window.iter().map(|t| t.0 * (t.1 - mx).powi(2)).sum::<f64>() / norm;
                    let vy = window.iter().map(|t| t.0 * (t.2 - my).powi(2)).sum::<f64>() / norm;
                    let cov = window.iter().map(|t| t.0 * (t.1 - mx) * (t.2 - my)).sum::<f64>() / norm;
                    total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                }
            }
        }
        total / (w * h * a.channels()) as f64
    }

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, c, (0..w * h * c).map(|_| rng.gen()).collect()).unwrap()
    }

    fn rect_mask(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Image {
        Image::from_fn(w, h, 1, |x, y, _| ((x0..x1).contains(&x) && (y0..y1).contains(&y)) as u8 as f64)
    }

    #[test]
    fn identical_images_score_one() {
        let img = random_image(20, 16, 3, 1);
        let mask = rect_mask(20, 16, 3, 2, 15, 12);
        assert_eq!(lssim(&img, &img, &mask).unwrap(), 1.0);
    }

    #[test]
    fn inverted_pattern_scores_low() {
        let img = Image::from_fn(24, 24, 3, |x, y, _| ((x / 3 + y / 3) % 2) as f64);
        let inv = Image::from_fn(24, 24, 3, |x, y, c| 1.0 - img.get(x, y, c));
        let mask = rect_mask(24, 24, 2, 2, 22, 22);
        let s = lssim(&inv, &img, &mask).unwrap();
        assert!(s < 0.5, "{s}");
    }

    #[test]
    fn separable_matches_brute_force() {
        for seed in 0..3 {
            let a = random_image(23, 17, 3, 10 + seed);
            let b = random_image(23, 17, 3, 20 + seed);
            let fast = ssim(&a, &b).unwrap();
            let slow = brute_force_ssim(&a, &b);
            assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
        }
        // boxes smaller than the window
        let a = random_image(6, 4, 1, 7);
        let b = random_image(6, 4, 1, 8);
        assert!((ssim(&a, &b).unwrap() - brute_force_ssim(&a, &b)).abs() < 1e-6);
    }

    #[test]
    fn lssim_is_symmetric() {
        let a = random_image(20, 20, 3, 30);
        let b = random_image(20, 20, 3, 31);
        let mask = rect_mask(20, 20, 4, 5, 16, 18);
        assert_eq!(lssim(&a, &b, &mask).unwrap(), lssim(&b, &a, &mask).unwrap());
    }

    #[test]
    fn empty_mask_is_an_error() {
        let a = random_image(8, 8, 3, 1);
        assert!(lssim(&a, &a, &Image::filled(8, 8, 1, 0.2)).is_err());
    }

    #[test]
    fn iou_fixtures() {
        let a = rect_mask(20, 10, 0, 0, 8, 10);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &rect_mask(20, 10, 10, 0, 18, 10)).unwrap(), 0.0);
        assert_eq!(mask_iou(&a, &rect_mask(20, 10, 4, 0, 12, 10)).unwrap(), 1.0 / 3.0);
        let empty = Image::filled(20, 10, 1, 0.0);
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn bbox_is_tight() {
        let m = rect_mask(10, 10, 2, 3, 7, 9);
        assert_eq!(mask_bbox(&m), Some((2, 3, 5, 6)));
    }
}
