//! 8-bit image ingestion into the `[-1, 1]` pixel range.

use std::path::Path;

use image::imageops::FilterType;
use ndarray::Array1;

use crate::error::{Error, Result};
use crate::network::Shape;

/// Maps a byte to `x / 127.5 - 1`.
pub fn byte_to_unit(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Converts a decoded image to a CHW vector of `shape`, resizing if needed.
pub fn image_to_input(img: &image::DynamicImage, shape: Shape) -> Result<Array1<f64>> {
    let (w, h) = (shape.width as u32, shape.height as u32);
    let img = if img.width() != w || img.height() != h {
        img.resize_exact(w, h, FilterType::Triangle)
    } else {
        img.clone()
    };
    let plane = shape.height * shape.width;
    match shape.channels {
        1 => {
            let g = img.to_luma8();
            Ok(Array1::from_iter(
                g.as_raw().iter().map(|b| byte_to_unit(*b)),
            ))
        }
        3 => {
            let rgb = img.to_rgb8();
            let raw = rgb.as_raw();
            Ok(Array1::from_shape_fn(3 * plane, |i| {
                let (c, p) = (i / plane, i % plane);
                byte_to_unit(raw[3 * p + c])
            }))
        }
        c => Err(Error::Config(format!(
            "images map to 1 or 3 channels, model wants {c}"
        ))),
    }
}

pub fn load_image(path: impl AsRef<Path>, shape: Shape) -> Result<Array1<f64>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    image_to_input(&img, shape)
}
