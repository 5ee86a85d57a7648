use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::imaging::Image;

const SNAP: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Bilinear sample at a continuous pixel-index position (pixel centres at
/// integers). Returns false for positions outside the image area.
fn sample(img: &Image, sx: f64, sy: f64, out: &mut [f64]) -> bool {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if !(sx >= -0.5 && sx <= w - 0.5 && sy >= -0.5 && sy <= h - 0.5) {
        return false;
    }
    let x0 = sx.floor();
    let y0 = sy.floor();
    let (fx, fy) = (sx - x0, sy - y0);
    let clamp_x = |v: f64| v.clamp(0.0, w - 1.0) as usize;
    let clamp_y = |v: f64| v.clamp(0.0, h - 1.0) as usize;
    let (xa, xb) = (clamp_x(x0), clamp_x(x0 + 1.0));
    let (ya, yb) = (clamp_y(y0), clamp_y(y0 + 1.0));
    for (c, o) in out.iter_mut().enumerate() {
        let top = img.get(xa, ya, c) * (1.0 - fx) + if fx > 0.0 { img.get(xb, ya, c) * fx } else { 0.0 };
        let bottom = img.get(xa, yb, c) * (1.0 - fx) + if fx > 0.0 { img.get(xb, yb, c) * fx } else { 0.0 };
        let v = if fy > 0.0 { top * (1.0 - fy) + bottom * fy } else { top };
        *o = v.clamp(0.0, 1.0);
    }
    true
}

/// Inverse-maps every output pixel through `theta^-1` (normalized
/// coordinates), bilinearly samples the source and zero-fills samples that
/// fall outside it.
pub fn warp(img: &Image, theta: &Homography) -> Result<Image> {
    let det = theta.det();
    if !(det.abs() > 1e-9) {
        return Err(Error::Singular { det });
    }
    let inv = theta.inverse()?;
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut out = Image::filled(w, h, ch, 0.0);
    let mut px = vec![0.0; ch];
    for y in 0..h {
        for x in 0..w {
            let p = [(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64];
            let Some(src) = inv.project_point(p) else { continue };
            let sx = snap(src[0] * w as f64 - 0.5);
            let sy = snap(src[1] * h as f64 - 0.5);
            if sample(img, sx, sy, &mut px) {
                for (c, &v) in px.iter().enumerate() {
                    out.set(x, y, c, v);
                }
            }
        }
    }
    Ok(out)
}

/// Warped foreground, warped mask and their blend over the background.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeResult {
    pub composite: Image,
    pub warped_fg: Image,
    pub warped_mask: Image,
}

/// Alpha blend `warped_fg * warped_mask + bg * (1 - warped_mask)` at every
/// pixel.
pub fn blend(warped_fg: &Image, warped_mask: &Image, bg: &Image) -> Result<Image> {
    if warped_fg.dims() != bg.dims() || warped_mask.dims() != bg.dims() {
        return Err(Error::Invalid(format!(
            "dimension mismatch: fg {:?}, mask {:?}, bg {:?}",
            warped_fg.dims(),
            warped_mask.dims(),
            bg.dims()
        )));
    }
    if warped_mask.channels() != 1 || warped_fg.channels() != bg.channels() {
        return Err(Error::Invalid("mask must be single-channel and fg/bg channels must match".into()));
    }
    let (w, h) = bg.dims();
    let mut out = bg.clone();
    for y in 0..h {
        for x in 0..w {
            let m = warped_mask.get(x, y, 0);
            for c in 0..bg.channels() {
                out.set(x, y, c, warped_fg.get(x, y, c) * m + bg.get(x, y, c) * (1.0 - m));
            }
        }
    }
    Ok(out)
}

/// Warps foreground and mask with the same `theta` and blends them over `bg`.
pub fn composite(fg: &Image, mask: &Image, bg: &Image, theta: &Homography) -> Result<CompositeResult> {
    if fg.dims() != bg.dims() || mask.dims() != bg.dims() {
        return Err(Error::Invalid(format!(
            "dimension mismatch: fg {:?}, mask {:?}, bg {:?}",
            fg.dims(),
            mask.dims(),
            bg.dims()
        )));
    }
    if mask.channels() != 1 {
        return Err(Error::Invalid("mask must be single-channel".into()));
    }
    let warped_fg = warp(fg, theta)?;
    let warped_mask = warp(mask, theta)?;
    let composite = blend(&warped_fg, &warped_mask, bg)?;
    Ok(CompositeResult {
        composite,
        warped_fg,
        warped_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * c).map(|_| rng.gen::<f64>()).collect();
        Image::new(w, h, c, data).unwrap()
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = random_image(17, 11, 3, 1).quantized();
        let out = warp(&img, &Homography::IDENTITY).unwrap();
        assert_eq!(out.to_bytes(), img.to_bytes());
        assert_eq!(out, img);
    }

    #[test]
    fn one_pixel_translation() {
        let img = random_image(8, 5, 1, 2);
        let out = warp(&img, &Homography::translation(1.0 / 8.0, 0.0)).unwrap();
        for y in 0..5 {
            assert_eq!(out.get(0, y, 0), 0.0);
            for x in 1..8 {
                assert!((out.get(x, y, 0) - img.get(x - 1, y, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_theta_is_rejected() {
        let img = random_image(4, 4, 1, 3);
        let flat = Homography([1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(warp(&img, &flat), Err(Error::Singular { .. })));
    }

    #[test]
    fn round_trip_on_smooth_gradient() {
        let (w, h) = (64, 64);
        let img = Image::from_fn(w, h, 3, |x, y, c| {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            match c {
                0 => u,
                1 => v,
                _ => 0.5 + 0.4 * (3.0 * u + 2.0 * v).sin(),
            }
        });
        let theta = Homography([0.9, 0.08, 0.06, -0.05, 0.95, 0.04, 0.1, -0.08, 1.0]);
        let back = warp(&warp(&img, &theta).unwrap(), &theta.inverse().unwrap()).unwrap();
        let (mut err, mut count) = (0.0, 0);
        for y in 12..52 {
            for x in 12..52 {
                for c in 0..3 {
                    err += (back.get(x, y, c) - img.get(x, y, c)).abs();
                    count += 1;
                }
            }
        }
        assert!(err / (count as f64) < 0.01, "mae {}", err / count as f64);
    }

    #[test]
    fn composite_identities() {
        let fg = random_image(9, 7, 3, 4);
        let bg = random_image(9, 7, 3, 5);
        let zero = Image::filled(9, 7, 1, 0.0);
        let one = Image::filled(9, 7, 1, 1.0);
        let half = Image::filled(9, 7, 1, 0.5);
        let theta = Homography([0.8, 0.1, 0.1, 0.0, 0.9, 0.05, 0.05, 0.0, 1.0]);
        assert_eq!(composite(&fg, &zero, &bg, &theta).unwrap().composite, bg);
        assert_eq!(composite(&fg, &one, &bg, &Homography::IDENTITY).unwrap().composite, fg);
        let mixed = composite(&fg, &half, &bg, &Homography::IDENTITY).unwrap().composite;
        for (i, v) in mixed.data().iter().enumerate() {
            assert!((v - (0.5 * fg.data()[i] + 0.5 * bg.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn composite_rejects_mismatched_sizes() {
        let fg = random_image(4, 4, 3, 6);
        let bg = random_image(5, 4, 3, 7);
        let mask = Image::filled(4, 4, 1, 1.0);
        assert!(composite(&fg, &mask, &bg, &Homography::IDENTITY).is_err());
    }
}
