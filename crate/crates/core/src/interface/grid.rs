//! Image grids in the usual `make_grid` layout, with PNG and raw float output.
//!
//! Cells are CHW vectors laid out row-major: row `r`, column `c` is cell
//! `r * cols + c`. Cells are separated and framed by 2 pixels of padding
//! valued 0. With `scale_each`, every cell is min-max rescaled to `[0, 1]` on
//! its own; a cell with zero range renders as uniform 0.5. Without it, values
//! are clamped to `[0, 1]`. An intensity `v` becomes the byte
//! `floor(255 v + 0.5)`.

use std::io::Cursor;

use image::{ExtendedColorType, ImageEncoder};
use ndarray::Array1;

use crate::error::{Error, Result};
use crate::network::Shape;

pub const PADDING: usize = 2;
pub const RAW_MAGIC: &[u8; 8] = b"GKGRID01";

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub rows: usize,
    pub cols: usize,
    pub cell_shape: Shape,
    pub cells: Vec<Array1<f64>>,
    pub scale_each: bool,
}

/// Rendered pixels plus the lossless dump of the unscaled cells.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major HWC intensities in `[0, 1]` before quantization.
    pub intensities: Vec<f64>,
    pub png: Vec<u8>,
    pub raw: Vec<u8>,
}

impl ImageGrid {
    pub fn new(
        rows: usize,
        cols: usize,
        cell_shape: Shape,
        cells: Vec<Array1<f64>>,
        scale_each: bool,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || cells.is_empty() || cell_shape.numel() == 0 {
            return Err(Error::EmptyGrid);
        }
        if cells.len() != rows * cols {
            return Err(Error::Shape {
                what: "grid cell count".into(),
                expected: rows * cols,
                found: cells.len(),
            });
        }
        if let Some(bad) = cells.iter().find(|c| c.len() != cell_shape.numel()) {
            return Err(Error::Shape {
                what: "grid cell size".into(),
                expected: cell_shape.numel(),
                found: bad.len(),
            });
        }
        if !matches!(cell_shape.channels, 1 | 3) {
            return Err(Error::Config(format!(
                "grid cells need 1 or 3 channels, got {}",
                cell_shape.channels
            )));
        }
        Ok(Self {
            rows,
            cols,
            cell_shape,
            cells,
            scale_each,
        })
    }

    pub fn width(&self) -> usize {
        self.cols * (self.cell_shape.width + PADDING) + PADDING
    }

    pub fn height(&self) -> usize {
        self.rows * (self.cell_shape.height + PADDING) + PADDING
    }

    /// Top-left pixel `(y, x)` of cell `(row, col)`.
    pub fn cell_origin(&self, row: usize, col: usize) -> (usize, usize) {
        (
            PADDING + row * (self.cell_shape.height + PADDING),
            PADDING + col * (self.cell_shape.width + PADDING),
        )
    }

    fn normalized(&self, cell: &Array1<f64>) -> Array1<f64> {
        if !self.scale_each {
            return cell.mapv(|v| v.clamp(0.0, 1.0));
        }
        let lo = cell.fold(f64::INFINITY, |m, v| m.min(*v));
        let hi = cell.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let range = hi - lo;
        if !(range > 0.0) || !range.is_finite() {
            return Array1::from_elem(cell.len(), 0.5);
        }
        cell.mapv(|v| (v - lo) / range)
    }

    /// Raw dump: magic, `rows cols c h w` as u64, then each cell's values as f64,
    /// all little-endian.
    pub fn raw_dump(&self) -> Vec<u8> {
        let s = self.cell_shape;
        let mut out = RAW_MAGIC.to_vec();
        for v in [self.rows, self.cols, s.channels, s.height, s.width] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for cell in &self.cells {
            for v in cell {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn render(&self) -> Result<RenderedGrid> {
        let s = self.cell_shape;
        let (w, h, ch) = (self.width(), self.height(), s.channels);
        let mut intensities = vec![0.0; w * h * ch];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let cell = self.normalized(&self.cells[r * self.cols + c]);
                let (oy, ox) = self.cell_origin(r, c);
                for k in 0..ch {
                    for y in 0..s.height {
                        for x in 0..s.width {
                            intensities[((oy + y) * w + ox + x) * ch + k] = cell[s.index(k, y, x)];
                        }
                    }
                }
            }
        }
        let bytes: Vec<u8> = intensities.iter().map(|v| quantize(*v)).collect();
        let color = if ch == 1 {
            ExtendedColorType::L8
        } else {
            ExtendedColorType::Rgb8
        };
        let mut png = Vec::new();
        image::codecs::png::PngEncoder::new(Cursor::new(&mut png))
            .write_image(&bytes, w as u32, h as u32, color)
            .map_err(|e| Error::Image {
                path: "<memory>".into(),
                message: e.to_string(),
            })?;
        Ok(RenderedGrid {
            width: w,
            height: h,
            channels: ch,
            intensities,
            png,
            raw: self.raw_dump(),
        })
    }
}

pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn render_grid(grid: &ImageGrid) -> Result<RenderedGrid> {
    grid.render()
}

/// Inverse of [`ImageGrid::raw_dump`]; the `scale_each` flag is not stored.
pub fn read_raw_dump(bytes: &[u8]) -> Result<ImageGrid> {
    let bad = |offset: usize, message: &str| Error::Parse {
        offset: offset as u64,
        message: message.into(),
    };
    if bytes.len() < 48 || &bytes[..8] != RAW_MAGIC {
        return Err(bad(0, "not a grid dump"));
    }
    let dims: Vec<usize> = (0..5)
        .map(|i| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let shape = Shape::new(dims[2], dims[3], dims[4]);
    let n = dims[0] * dims[1] * shape.numel();
    if bytes.len() != 48 + 8 * n {
        return Err(bad(48, "payload size does not match the header"));
    }
    let values: Vec<f64> = bytes[48..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let cells = values
        .chunks(shape.numel().max(1))
        .map(|c| Array1::from_vec(c.to_vec()))
        .collect();
    ImageGrid::new(dims[0], dims[1], shape, cells, false)
}
