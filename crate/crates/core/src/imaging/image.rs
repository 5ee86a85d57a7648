use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Interleaved `height x width x channels` raster with values in `[0, 1]`.
///
/// Pixel `(x, y)` covers the continuous square `[x, x+1) x [y, y+1)`; its
/// centre is `(x + 0.5, y + 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Invalid(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Invalid(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value.clamp(0.0, 1.0); width * height * channels],
        }
    }

    /// Builds an image from `f(x, y, channel)`, clamping into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Image {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = (y * self.width + x) * self.channels + c;
        self.data[i] = v.clamp(0.0, 1.0);
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        Image::from_fn(w, h, self.channels, |x, y, c| self.get(x0 + x, y0 + y, c))
    }

    /// Channel-first `[c, h, w]` tensor for the encoders.
    pub fn to_chw(&self) -> Tensor {
        let (w, h, ch) = (self.width, self.height, self.channels);
        let mut data = vec![0.0; w * h * ch];
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    data[(c * h + y) * w + x] = self.get(x, y, c);
                }
            }
        }
        Tensor::new(vec![ch, h, w], data).expect("consistent dims")
    }

    /// Values quantized to 8 bits, as written to PNG.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(width, height, channels, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Round-trips through 8-bit quantization.
    pub fn quantized(&self) -> Image {
        Image::from_bytes(self.width, self.height, self.channels, &self.to_bytes()).expect("same dims")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let bytes = self.to_bytes();
        let res = if self.channels == 3 {
            RgbImage::from_raw(w, h, bytes).expect("sized").save(path)
        } else {
            GrayImage::from_raw(w, h, bytes).expect("sized").save(path)
        };
        res.map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Loads an RGB image; grayscale files are expanded to three channels.
    pub fn load_rgb(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        Image::from_bytes(rgb.width() as usize, rgb.height() as usize, 3, rgb.as_raw())
    }

    /// Loads a single-channel mask, converting colour files to luma.
    pub fn load_mask(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let gray = img.to_luma8();
        Image::from_bytes(gray.width() as usize, gray.height() as usize, 1, gray.as_raw())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_bad_lengths() {
        assert!(Image::new(2, 2, 1, vec![0.0, 0.5, 1.0, 1.5]).is_err());
        assert!(Image::new(2, 2, 3, vec![0.0; 4]).is_err());
        assert!(Image::new(2, 2, 2, vec![0.0; 8]).is_err());
    }

    #[test]
    fn png_round_trip_is_lossless_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 3, 3, |x, y, c| (x * 3 + y + c) as f64 / 20.0).quantized();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        assert_eq!(Image::load_rgb(&path).unwrap(), img);

        let mask = Image::from_fn(4, 4, 1, |x, _, _| if x < 2 { 1.0 } else { 0.0 });
        let path = dir.path().join("m.png");
        mask.save_png(&path).unwrap();
        assert_eq!(Image::load_mask(&path).unwrap(), mask);
    }

    #[test]
    fn chw_layout() {
        let img = Image::from_fn(2, 1, 3, |x, _, c| (x * 3 + c) as f64 / 10.0);
        let t = img.to_chw();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[0.0, 0.3, 0.1, 0.4, 0.2, 0.5]);
    }
}
