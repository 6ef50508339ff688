//! 8-bit PNG output. Row 0 of the picture is the shallowest depth, column 0
//! the smallest lateral coordinate.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{check_len, Error, Result};
use crate::multisample::{gray_level, Colormap};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(result: image::ImageResult<()>) -> Result<()> {
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Format(other.to_string()),
    })
}

/// Grayscale rendering of a dB image in `[-DR, 0]`.
pub fn gray_image(db: &[f64], n_z: usize, n_x: usize, dynamic_range_db: f64) -> Result<GrayImage> {
    check_len("render image", n_z * n_x, db.len())?;
    Ok(GrayImage::from_fn(n_x as u32, n_z as u32, |ix, iz| {
        image::Luma([to_u8(gray_level(db[ix as usize * n_z + iz as usize], dynamic_range_db))])
    }))
}

/// Colormapped rendering of a dB image.
pub fn colormap_image(db: &[f64], n_z: usize, n_x: usize, dynamic_range_db: f64, cmap: Colormap) -> Result<RgbImage> {
    check_len("render image", n_z * n_x, db.len())?;
    Ok(RgbImage::from_fn(n_x as u32, n_z as u32, |ix, iz| {
        let t = gray_level(db[ix as usize * n_z + iz as usize], dynamic_range_db);
        image::Rgb(cmap.rgb(t).map(to_u8))
    }))
}

/// Per-pixel RGB triples (depth-major) to an image.
pub fn rgb_image(rgb: &[[f64; 3]], n_z: usize, n_x: usize) -> Result<RgbImage> {
    check_len("render image", n_z * n_x, rgb.len())?;
    Ok(RgbImage::from_fn(n_x as u32, n_z as u32, |ix, iz| {
        image::Rgb(rgb[ix as usize * n_z + iz as usize].map(to_u8))
    }))
}

pub fn write_gray_png(path: &Path, img: &GrayImage) -> Result<()> {
    save(img.save_with_format(path, image::ImageFormat::Png))
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    save(img.save_with_format(path, image::ImageFormat::Png))
}
