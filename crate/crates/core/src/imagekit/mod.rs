//! Grayscale rasters and the image operations the pipeline needs.

mod affine;
mod clahe;
pub(crate) use clahe::bin_of;
mod image;
mod pgm;

pub use affine::{
    resize_bilinear, sample_bilinear, warp_affine, AffineTransform, PixelMap, MIN_ABS_DET,
};
pub use clahe::{clahe, ClaheConfig};
pub use image::GrayImage;
pub use pgm::{decode_pgm, encode_pgm, load_pgm, save_pgm};
