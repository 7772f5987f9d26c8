//! Contact sheets: one row per layer, one column per filter or seed.

use anyhow::{ensure, Result};
use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

const PAD: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// Cell width and height in pixels.
    pub cell: (u32, u32),
    /// File name of each cell, row-major.
    pub labels: Vec<String>,
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    /// Lays `cells` (row-major) out on a white sheet with a small gutter.
    /// Cells of a different size are rescaled to fit.
    pub fn render(&self, cells: &[RgbImage]) -> Result<RgbImage> {
        ensure!(
            cells.len() == self.len(),
            "grid has {}x{} slots but {} images",
            self.rows.len(),
            self.cols.len(),
            cells.len()
        );
        let (cw, ch) = self.cell;
        let ncols = self.cols.len() as u32;
        let nrows = self.rows.len() as u32;
        let mut sheet = RgbImage::from_pixel(
            ncols * cw + (ncols + 1) * PAD,
            nrows * ch + (nrows + 1) * PAD,
            Rgb([255, 255, 255]),
        );
        for (i, cell) in cells.iter().enumerate() {
            let (r, c) = (i as u32 / ncols, i as u32 % ncols);
            let x = PAD + c * (cw + PAD);
            let y = PAD + r * (ch + PAD);
            if cell.dimensions() == (cw, ch) {
                imageops::replace(&mut sheet, cell, x.into(), y.into());
            } else {
                let scaled = imageops::resize(cell, cw, ch, imageops::FilterType::Triangle);
                imageops::replace(&mut sheet, &scaled, x.into(), y.into());
            }
        }
        Ok(sheet)
    }
}
