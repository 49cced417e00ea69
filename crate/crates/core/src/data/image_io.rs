//! 8-bit RGB images (PNG, PPM) and KITTI 16-bit disparity PNGs.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageReader, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::image_shape;

/// KITTI stores `disparity * 256` in 16 bits.
pub const KITTI_SCALE: f32 = 256.0;

/// Reads an RGB (or grayscale, replicated) image as `(1, 3, H, W)` in `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = ImageReader::open(path)?.with_guessed_format()?.decode()?;
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    Ok(Tensor::from_fn(image_shape(h, w), |_, c, y, x| raw[(y * w + x) * 3 + c]))
}

/// Writes a `(1, 3, H, W)` image in `[0, 1]` as 8-bit RGB; the format
/// follows the extension (`.png`, `.ppm`).
pub fn write_image(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.batch != 1 || s.channels != 3 {
        return Err(Error::shape("write_image", format!("expected (1,3,H,W), got {s}")));
    }
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(s.width as u32, s.height as u32, |x, y| {
        Rgb([0, 1, 2].map(|c| to_u8(image.at(0, c, y as usize, x as usize))))
    });
    buf.save(path.as_ref())?;
    Ok(())
}

/// Single-channel `(1, 1, H, W)` map in `[0, 1]` as 8-bit grayscale PNG.
pub fn write_gray(path: impl AsRef<Path>, map: &Tensor<f32>) -> Result<()> {
    let s = map.shape();
    if s.batch != 1 || s.channels != 1 {
        return Err(Error::shape("write_gray", format!("expected (1,1,H,W), got {s}")));
    }
    let buf = ImageBuffer::<Luma<u8>, _>::from_fn(s.width as u32, s.height as u32, |x, y| {
        Luma([to_u8(map.at(0, 0, y as usize, x as usize))])
    });
    buf.save(path.as_ref())?;
    Ok(())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a KITTI disparity PNG: returns disparity in pixels and the mask of
/// pixels with ground truth (`raw > 0`).
pub fn read_kitti_disparity(path: impl AsRef<Path>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let path = path.as_ref();
    let img = ImageReader::open(path)?.with_guessed_format()?.decode()?;
    let DynamicImage::ImageLuma16(buf) = img else {
        return Err(Error::format(
            path,
            format!("KITTI disparity must be 16-bit grayscale, got {:?}", img.color()),
        ));
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let raw = buf.as_raw();
    let disp = Tensor::from_fn([1, 1, h, w], |_, _, y, x| raw[y * w + x] as f32 / KITTI_SCALE);
    let valid = Tensor::from_fn([1, 1, h, w], |_, _, y, x| if raw[y * w + x] > 0 { 1.0 } else { 0.0 });
    Ok((disp, valid))
}

/// Writes disparity in KITTI encoding; invalid pixels become 0.
pub fn write_kitti_disparity(path: impl AsRef<Path>, disparity: &Tensor<f32>, valid: &Tensor<f32>) -> Result<()> {
    let s = disparity.shape();
    if s.batch != 1 || s.channels != 1 || valid.shape() != s {
        return Err(Error::shape(
            "write_kitti_disparity",
            format!("disparity {s} and mask {} must both be (1,1,H,W)", valid.shape()),
        ));
    }
    let buf = ImageBuffer::<Luma<u16>, _>::from_fn(s.width as u32, s.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let raw = if valid.at(0, 0, y, x) > 0.0 {
            (disparity.at(0, 0, y, x) * KITTI_SCALE).round().clamp(1.0, u16::MAX as f32) as u16
        } else {
            0
        };
        Luma([raw])
    });
    buf.save(path.as_ref())?;
    Ok(())
}
