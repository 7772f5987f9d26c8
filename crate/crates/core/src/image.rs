//! Images in model input space.

use std::path::Path;

use image::{DynamicImage, Rgb, RgbImage};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel means (RGB, 0..255 scale) of the ImageNet training set.
pub const IMAGENET_MEAN_RGB: [f64; 3] = [123.675, 116.28, 103.53];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorSpace {
    /// RGB on a 0..255 scale with the channel mean subtracted.
    RgbMeanSubtracted,
}

/// A 3×H×W image in preprocessed space.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pixels: Array3<f64>,
    mean: [f64; 3],
    colorspace: ColorSpace,
}

impl ImageBuffer {
    pub fn from_pixels(pixels: Array3<f64>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch {
                what: "image".into(),
                expected: vec![3, h.max(1), w.max(1)],
                actual: vec![c, h, w],
            });
        }
        Ok(Self {
            pixels,
            mean: IMAGENET_MEAN_RGB,
            colorspace: ColorSpace::RgbMeanSubtracted,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::from_pixels(Array3::zeros((3, height, width)))
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let mean = IMAGENET_MEAN_RGB;
        let pixels = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            f64::from(img.get_pixel(x as u32, y as u32)[c]) - mean[c]
        });
        Self {
            pixels,
            mean,
            colorspace: ColorSpace::RgbMeanSubtracted,
        }
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        Self::from_rgb8(&img.to_rgb8())
    }

    /// Decodes a PNG or JPEG file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_dynamic(&image::open(path)?))
    }

    /// Adds the mean back, rounds and saturates to 8 bits.
    pub fn to_rgb8(&self) -> RgbImage {
        let (_, h, w) = self.pixels.dim();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                let v = self.pixels[[c, y as usize, x as usize]] + self.mean[c];
                v.round().clamp(0.0, 255.0) as u8
            };
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Array3<f64> {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn mean(&self) -> [f64; 3] {
        self.mean
    }

    pub fn colorspace(&self) -> ColorSpace {
        self.colorspace
    }

    /// Per-channel `(low, high)` bounds of valid 8-bit pixels in this space.
    pub fn pixel_bounds(&self) -> [(f64, f64); 3] {
        self.mean.map(|m| (-m, 255.0 - m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_on_8bit_images() {
        let img = RgbImage::from_fn(37, 33, |x, y| {
            Rgb([(x * 7 % 256) as u8, (y * 13 % 256) as u8, ((x * y) % 256) as u8])
        });
        let back = ImageBuffer::from_rgb8(&img).to_rgb8();
        for (a, b) in img.pixels().zip(back.pixels()) {
            for c in 0..3 {
                assert!((i16::from(a[c]) - i16::from(b[c])).abs() <= 1);
            }
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = RgbImage::from_fn(40, 32, |x, y| Rgb([x as u8 * 5, y as u8 * 3, 200]));
        ImageBuffer::from_rgb8(&img).save_png(&path).unwrap();
        let loaded = ImageBuffer::open(&path).unwrap();
        assert_eq!(loaded.to_rgb8(), img);
    }

    #[test]
    fn bounds_cover_the_8bit_range() {
        let b = ImageBuffer::zeros(4, 4).unwrap().pixel_bounds();
        assert_eq!(b[0], (-123.675, 255.0 - 123.675));
    }

    #[test]
    fn rejects_non_rgb() {
        assert!(ImageBuffer::from_pixels(Array3::zeros((1, 4, 4))).is_err());
        assert!(ImageBuffer::from_pixels(Array3::zeros((3, 0, 4))).is_err());
    }
}
