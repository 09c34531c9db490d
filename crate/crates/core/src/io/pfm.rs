//! Portable float maps, the lossless float32 raster format used for depth
//! and normal ground truth and predictions.
//!
//! Layout on disk: `Pf` (1 channel) or `PF` (3 channels), a `width height`
//! line, a scale line whose sign gives the byte order (written as -1.0,
//! little-endian), then rows bottom-to-top with channels interleaved per
//! pixel. In memory this crate is channel-major `[c, h, w]` with row 0 at
//! the top; the converters here hide the difference.

use std::fs;
use std::path::Path;

use super::with_path;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major `[channels * height * width]`, row 0 at the top.
    pub data: Vec<f32>,
}

impl PfmImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::format(format!("pfm supports 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(Error::format(format!(
                "pfm data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(PfmImage { channels, height, width, data })
    }

    pub fn from_f64(channels: usize, height: usize, width: usize, data: &[f64]) -> Result<Self> {
        Self::new(channels, height, width, data.iter().map(|&v| v as f32).collect())
    }
}

pub fn write_pfm(path: &Path, img: &PfmImage) -> Result<()> {
    let (c, h, w) = (img.channels, img.height, img.width);
    let mut bytes = Vec::with_capacity(32 + 4 * img.data.len());
    bytes.extend_from_slice(if c == 3 { b"PF\n" } else { b"Pf\n" });
    bytes.extend_from_slice(format!("{w} {h}\n-1.0\n").as_bytes());
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                bytes.extend_from_slice(&img.data[(ch * h + y) * w + x].to_le_bytes());
            }
        }
    }
    with_path(fs::write(path, bytes), path)
}

pub fn read_pfm(path: &Path) -> Result<PfmImage> {
    let bytes = with_path(fs::read(path), path)?;
    parse(&bytes).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

fn parse(bytes: &[u8]) -> std::result::Result<PfmImage, String> {
    let mut pos = 0usize;
    // Three whitespace-terminated header tokens after the magic line; other
    // writers separate them with spaces or newlines interchangeably.
    let mut token = || -> std::result::Result<&str, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".to_string());
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ascii header")?;
        pos += 1; // single whitespace terminator, then binary data may begin
        Ok(tok)
    };
    let channels = match token()? {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(format!("bad magic {other:?}")),
    };
    let width: usize = token()?.parse().map_err(|e| format!("width: {e}"))?;
    let height: usize = token()?.parse().map_err(|e| format!("height: {e}"))?;
    let scale: f64 = token()?.parse().map_err(|e| format!("scale: {e}"))?;
    if scale == 0.0 || width == 0 || height == 0 {
        return Err("zero scale or dimension".to_string());
    }
    let little_endian = scale < 0.0;
    let n = channels * height * width;
    let body = &bytes[pos..];
    if body.len() != 4 * n {
        return Err(format!("expected {} data bytes, found {}", 4 * n, body.len()));
    }
    let mut data = vec![0.0f32; n];
    for y in 0..height {
        for x in 0..width {
            for ch in 0..channels {
                let at = ((y * width + x) * channels + ch) * 4;
                let raw: [u8; 4] = body[at..at + 4].try_into().expect("length checked");
                let v = if little_endian {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
                // file row 0 is the bottom image row
                data[(ch * height + (height - 1 - y)) * width + x] = v;
            }
        }
    }
    PfmImage::new(channels, height, width, data).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("pano-mtl-pfm-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_bit_exact_for_both_channel_counts() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for channels in [1usize, 3] {
            let (h, w) = (5, 9);
            let data: Vec<f32> =
                (0..channels * h * w).map(|_| rng.gen_range(-50.0..50.0f32)).collect();
            let img = PfmImage::new(channels, h, w, data).unwrap();
            let path = tmp(&format!("rt{channels}.pfm"));
            write_pfm(&path, &img).unwrap();
            let back = read_pfm(&path).unwrap();
            assert_eq!(img, back);
            let bits: Vec<u32> = img.data.iter().map(|v| v.to_bits()).collect();
            let bits_back: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, bits_back);
        }
    }

    #[test]
    fn disk_layout_is_bottom_up_interleaved_little_endian() {
        // 2x2 single channel: values index the image rows top to bottom.
        let img = PfmImage::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let path = tmp("layout.pfm");
        write_pfm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"Pf\n2 2\n-1.0\n"));
        let body = &bytes[b"Pf\n2 2\n-1.0\n".len()..];
        // bottom row (3,4) first
        assert_eq!(body[..4], 3.0f32.to_le_bytes());
        assert_eq!(body[4..8], 4.0f32.to_le_bytes());
        assert_eq!(body[8..12], 1.0f32.to_le_bytes());

        // and a 3-channel pixel is stored rgb-interleaved
        let rgb = PfmImage::new(3, 1, 1, vec![0.25, 0.5, 0.75]).unwrap();
        let path = tmp("interleave.pfm");
        write_pfm(&path, &rgb).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let body = &bytes[b"PF\n1 1\n-1.0\n".len()..];
        assert_eq!(body[..4], 0.25f32.to_le_bytes());
        assert_eq!(body[4..8], 0.5f32.to_le_bytes());
        assert_eq!(body[8..12], 0.75f32.to_le_bytes());
    }

    #[test]
    fn big_endian_and_space_separated_headers_read_back() {
        // A foreign writer: positive scale (big-endian), spaces in the header.
        let vals = [1.5f32, -2.0, 0.0, 8.25];
        let mut bytes = b"Pf 2 2 1.0\n".to_vec();
        for v in [vals[2], vals[3], vals[0], vals[1]] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let path = tmp("foreign.pfm");
        std::fs::write(&path, &bytes).unwrap();
        let img = read_pfm(&path).unwrap();
        assert_eq!(img.data, vals);
    }

    #[test]
    fn malformed_files_error_with_the_path() {
        for (name, bytes) in [
            ("magic.pfm", b"P5\n2 2\n-1.0\n".to_vec()),
            ("short.pfm", b"Pf\n2 2\n-1.0\n\x00\x00".to_vec()),
            ("dims.pfm", b"Pf\n2 x\n-1.0\n".to_vec()),
            ("extra.pfm", {
                let mut b = b"Pf\n1 1\n-1.0\n".to_vec();
                b.extend_from_slice(&[0u8; 8]);
                b
            }),
        ] {
            let path = tmp(name);
            std::fs::write(&path, &bytes).unwrap();
            let err = read_pfm(&path).unwrap_err().to_string();
            assert!(err.contains(name), "{err}");
        }
        let missing = tmp("nope/a.pfm");
        assert!(read_pfm(&missing).unwrap_err().to_string().contains("a.pfm"));
    }
}
