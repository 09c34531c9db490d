//! 8-bit PNG readers and writers for RGB panoramas, validity masks, and the
//! color-coded normal visualization.

use std::path::Path;

use crate::{Error, Result};

/// Quantize a unit-interval value to 8 bits, saturating outside [0,1].
pub fn quantize8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn save(img: image::DynamicImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Write channel-major `[3, h, w]` values in [0,1] as 8-bit RGB.
pub fn write_rgb8(path: &Path, height: usize, width: usize, rgb: &[f64]) -> Result<()> {
    if rgb.len() != 3 * height * width {
        return Err(Error::format(format!(
            "rgb length {} does not match 3x{height}x{width}",
            rgb.len()
        )));
    }
    let hw = height * width;
    let mut raw = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            raw.push(quantize8(rgb[c * hw + i]));
        }
    }
    let img = image::RgbImage::from_raw(width as u32, height as u32, raw)
        .expect("length checked above");
    save(image::DynamicImage::ImageRgb8(img), path)
}

/// Read an RGB PNG back to channel-major `[3, h, w]` values in [0,1].
pub fn read_rgb8(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = open(path)?.to_rgb8();
    let (width, height) = (img.width() as usize, img.height() as usize);
    let hw = height * width;
    let mut out = vec![0.0f64; 3 * hw];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * hw + i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok((height, width, out))
}

/// Write a validity mask; valid pixels are 255, invalid 0.
pub fn write_mask(path: &Path, height: usize, width: usize, mask: &[bool]) -> Result<()> {
    if mask.len() != height * width {
        return Err(Error::format(format!(
            "mask length {} does not match {height}x{width}",
            mask.len()
        )));
    }
    let raw: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, raw)
        .expect("length checked above");
    save(image::DynamicImage::ImageLuma8(img), path)
}

/// Read a mask PNG; any value of 128 or more counts as valid.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = open(path)?.to_luma8();
    let (width, height) = (img.width() as usize, img.height() as usize);
    let mask = img.pixels().map(|p| p.0[0] >= 128).collect();
    Ok((height, width, mask))
}

/// Color-coded normal map: each channel stores (n+1)/2, so the straight-ahead
/// normal (0,0,-1) becomes the pixel (128,128,0). Invalid pixels are black.
pub fn write_normal_png(
    path: &Path,
    height: usize,
    width: usize,
    normal: &[f64],
    mask: &[bool],
) -> Result<()> {
    let hw = height * width;
    if normal.len() != 3 * hw || mask.len() != hw {
        return Err(Error::format(format!(
            "normal/mask lengths {}/{} do not match 3x{height}x{width}",
            normal.len(),
            mask.len()
        )));
    }
    let encoded: Vec<f64> = (0..3 * hw)
        .map(|i| if mask[i % hw] { (normal[i] + 1.0) / 2.0 } else { 0.0 })
        .collect();
    write_rgb8(path, height, width, &encoded)
}
