//! Weight containers, BatchNorm folding, image input and grid rendering.

pub mod batchnorm;
pub mod container;
pub mod grid;
pub mod image;

pub use batchnorm::{fold_batchnorm, BatchNorm};
pub use container::{decode_model, encode_model, load_model, save_model, Dtype};
pub use grid::{render_grid, ImageGrid, RenderedGrid};
pub use image::load_image;
