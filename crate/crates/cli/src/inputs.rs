//! Image loading and resizing for the front end.

use std::path::Path;

use anyhow::{bail, Context, Result};
use image::imageops::{self, FilterType};
use image::RgbImage;
use mapinv_core::backbone::sha256_file;
use mapinv_core::ImageBuffer;

/// A decoded input with the hash of the file it came from.
pub struct Input {
    pub image: ImageBuffer,
    pub sha256: String,
}

fn decode(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).with_context(|| format!("cannot read image {}", path.display()))?;
    Ok(img.to_rgb8())
}

/// Dimensions with the longer side scaled to `size`; 0 keeps the original.
pub fn fit_longer_side(width: u32, height: u32, size: u32) -> (u32, u32) {
    if size == 0 || width.max(height) == size {
        return (width, height);
    }
    let scale = f64::from(size) / f64::from(width.max(height));
    let w = (f64::from(width) * scale).round().max(1.0) as u32;
    let h = (f64::from(height) * scale).round().max(1.0) as u32;
    (w, h)
}

/// Dimensions with the aspect ratio of `width`×`height` and the given area.
pub fn match_area(width: u32, height: u32, area: u64) -> Result<(u32, u32)> {
    let aspect = f64::from(width) / f64::from(height);
    let w = (area as f64 * aspect).sqrt().round() as u32;
    let h = (area as f64 / aspect).sqrt().round() as u32;
    if w == 0 || h == 0 {
        bail!("resizing {width}x{height} to area {area} gives an empty image");
    }
    Ok((w, h))
}

/// Parses `WxH`.
pub fn parse_dims(s: &str) -> Result<(u32, u32)> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("size `{s}` is not of the form WxH"))?;
    let w: u32 = w.trim().parse().with_context(|| format!("invalid width in `{s}`"))?;
    let h: u32 = h.trim().parse().with_context(|| format!("invalid height in `{s}`"))?;
    if w == 0 || h == 0 {
        bail!("size `{s}` is degenerate");
    }
    Ok((w, h))
}

fn resized(img: RgbImage, (w, h): (u32, u32)) -> RgbImage {
    if img.dimensions() == (w, h) {
        img
    } else {
        imageops::resize(&img, w, h, FilterType::Lanczos3)
    }
}

/// Opens an image and scales its longer side to `size`.
pub fn load(path: &Path, size: u32) -> Result<Input> {
    let img = decode(path)?;
    let dims = fit_longer_side(img.width(), img.height(), size);
    Ok(Input {
        image: ImageBuffer::from_rgb8(&resized(img, dims)),
        sha256: sha256_file(path)?,
    })
}

/// Opens an image and resizes it to exactly `dims`, or to `area` pixels when
/// `dims` is `None`.
pub fn load_style(path: &Path, dims: Option<(u32, u32)>, area: u64) -> Result<Input> {
    let img = decode(path)?;
    let dims = match dims {
        Some(d) => d,
        None => match_area(img.width(), img.height(), area)?,
    };
    Ok(Input {
        image: ImageBuffer::from_rgb8(&resized(img, dims)),
        sha256: sha256_file(path)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn longer_side_scaling() {
        assert_eq!(fit_longer_side(400, 300, 224), (224, 168));
        assert_eq!(fit_longer_side(300, 400, 224), (168, 224));
        assert_eq!(fit_longer_side(50, 40, 0), (50, 40));
        assert_eq!(fit_longer_side(224, 10, 224), (224, 10));
    }

    #[test]
    fn area_matching() {
        let (w, h) = match_area(200, 100, 224 * 224).unwrap();
        assert_eq!((w, h), (317, 158));
        assert!(match_area(1000, 1, 1).is_err());
    }

    #[test]
    fn dims() {
        assert_eq!(parse_dims("64x32").unwrap(), (64, 32));
        assert!(parse_dims("0x32").is_err());
        assert!(parse_dims("64").is_err());
    }
}
