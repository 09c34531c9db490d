//! On-disk dataset layout and its loader.
//!
//! A dataset directory holds, per sample i, `{i:05}_rgb.png`,
//! `{i:05}_depth.pfm` (1 channel, meters), `{i:05}_normal.pfm` (3 channels,
//! camera-facing unit normals) and `{i:05}_mask.png`, plus a `manifest.txt`
//! naming one sample's four relative paths per line. Anything producing
//! these formats can be dropped in; the synthetic generator is just the
//! built-in producer.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{pfm, png, with_path};
use crate::geometry::ErpLayout;
use crate::synth::render_sample;
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";

/// One loaded training sample, channel-major f64 like the rest of the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// `[3*h*w]` in [0,1].
    pub rgb: Vec<f64>,
    /// `[h*w]` meters.
    pub depth: Vec<f64>,
    /// `[3*h*w]`.
    pub normal: Vec<f64>,
    /// `[h*w]`.
    pub mask: Vec<bool>,
}

/// Render `seeds.len()` synthetic samples into `dir` and write the manifest.
pub fn write_dataset(seeds: &[u64], layout: ErpLayout, dir: &Path) -> Result<()> {
    with_path(std::fs::create_dir_all(dir), dir)?;
    let mut manifest = String::new();
    for (i, &seed) in seeds.iter().enumerate() {
        let sample = render_sample(seed, layout);
        let names = [
            format!("{i:05}_rgb.png"),
            format!("{i:05}_depth.pfm"),
            format!("{i:05}_normal.pfm"),
            format!("{i:05}_mask.png"),
        ];
        let (h, w) = (layout.height, layout.width);
        png::write_rgb8(&dir.join(&names[0]), h, w, &sample.rgb)?;
        pfm::write_pfm(&dir.join(&names[1]), &pfm::PfmImage::from_f64(1, h, w, &sample.depth)?)?;
        pfm::write_pfm(&dir.join(&names[2]), &pfm::PfmImage::from_f64(3, h, w, &sample.normal)?)?;
        png::write_mask(&dir.join(&names[3]), h, w, &sample.mask)?;
        writeln!(manifest, "{} {} {} {}", names[0], names[1], names[2], names[3])
            .expect("write to string");
    }
    with_path(std::fs::write(dir.join(MANIFEST), manifest), &dir.join(MANIFEST))
}

/// A manifest plus its directory; samples load lazily via [`Dataset::load_sample`].
#[derive(Debug, Clone)]
pub struct Dataset {
    dir: PathBuf,
    entries: Vec<[String; 4]>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST);
        let text = with_path(std::fs::read_to_string(&manifest), &manifest)?;
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_ascii_whitespace().collect();
            if parts.len() != 4 {
                return Err(Error::format(format!(
                    "{}: line {} has {} fields, expected rgb depth normal mask",
                    manifest.display(),
                    idx + 1,
                    parts.len()
                )));
            }
            entries.push([
                parts[0].to_string(),
                parts[1].to_string(),
                parts[2].to_string(),
                parts[3].to_string(),
            ]);
        }
        Ok(Dataset { dir: dir.to_path_buf(), entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn load_sample(&self, i: usize) -> Result<Sample> {
        let entry = self
            .entries
            .get(i)
            .ok_or_else(|| Error::invalid(format!("sample {i} of {}", self.entries.len())))?;
        let (h, w, rgb) = png::read_rgb8(&self.dir.join(&entry[0]))?;
        let depth = pfm::read_pfm(&self.dir.join(&entry[1]))?;
        let normal = pfm::read_pfm(&self.dir.join(&entry[2]))?;
        let (mh, mw, mask) = png::read_mask(&self.dir.join(&entry[3]))?;
        let bad = |what: &str, gh: usize, gw: usize, gc: usize, wc: usize| {
            Error::format(format!(
                "{}: {what} is {gc}x{gh}x{gw}, rgb is {wc}x{h}x{w}",
                self.dir.join(&entry[0]).display()
            ))
        };
        if (depth.height, depth.width, depth.channels) != (h, w, 1) {
            return Err(bad("depth", depth.height, depth.width, depth.channels, 1));
        }
        if (normal.height, normal.width, normal.channels) != (h, w, 3) {
            return Err(bad("normal", normal.height, normal.width, normal.channels, 3));
        }
        if (mh, mw) != (h, w) {
            return Err(bad("mask", mh, mw, 1, 1));
        }
        Ok(Sample {
            height: h,
            width: w,
            rgb,
            depth: depth.data.iter().map(|&v| v as f64).collect(),
            normal: normal.data.iter().map(|&v| v as f64).collect(),
            mask,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("pano-mtl-dataset-tests").join(name);
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn round_trip_keeps_depth_bits_and_quantizes_rgb_once() {
        let layout = ErpLayout::new(16, 32).unwrap();
        let dir = tmp("roundtrip");
        write_dataset(&[5, 6], layout, &dir).unwrap();
        let ds = Dataset::open(&dir).unwrap();
        assert_eq!(ds.len(), 2);

        let raw = render_sample(5, layout);
        let loaded = ds.load_sample(0).unwrap();
        // PFM stores f32; the loader must reproduce those exact values.
        for (a, b) in raw.depth.iter().zip(&loaded.depth) {
            assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
            assert_eq!(*b, (*a as f32) as f64);
        }
        for (a, b) in raw.normal.iter().zip(&loaded.normal) {
            assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
        }
        assert_eq!(raw.mask, loaded.mask);
        // RGB is 8-bit on disk: equal after one quantization, and a second
        // write/read cycle changes nothing.
        for (a, b) in raw.rgb.iter().zip(&loaded.rgb) {
            assert_eq!(png::quantize8(*a) as f64 / 255.0, *b);
        }
        let dir2 = tmp("requantize");
        std::fs::create_dir_all(&dir2).unwrap();
        png::write_rgb8(&dir2.join("again.png"), 16, 32, &loaded.rgb).unwrap();
        let (_, _, again) = png::read_rgb8(&dir2.join("again.png")).unwrap();
        assert_eq!(again, loaded.rgb);
    }

    #[test]
    fn manifest_lists_exactly_the_written_samples() {
        let layout = ErpLayout::new(8, 16).unwrap();
        let dir = tmp("manifest");
        write_dataset(&[1, 2, 3], layout, &dir).unwrap();
        let text = std::fs::read_to_string(dir.join(MANIFEST)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "00000_rgb.png 00000_depth.pfm 00000_normal.pfm 00000_mask.png");
        assert_eq!(lines[2], "00002_rgb.png 00002_depth.pfm 00002_normal.pfm 00002_mask.png");
        // every named file exists, and nothing else was written
        let mut files: Vec<String> = std::fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        files.sort();
        assert_eq!(files.len(), 13); // 3 samples x 4 files + manifest
        for line in &lines {
            for name in line.split(' ') {
                assert!(files.contains(&name.to_string()), "missing {name}");
            }
        }
    }

    #[test]
    fn writes_are_byte_deterministic_in_the_seed() {
        let layout = ErpLayout::new(8, 16).unwrap();
        let (a, b) = (tmp("det-a"), tmp("det-b"));
        write_dataset(&[42], layout, &a).unwrap();
        write_dataset(&[42], layout, &b).unwrap();
        for name in ["00000_rgb.png", "00000_depth.pfm", "00000_normal.pfm", "00000_mask.png"] {
            let ba = std::fs::read(a.join(name)).unwrap();
            let bb = std::fs::read(b.join(name)).unwrap();
            assert_eq!(ba, bb, "{name} differs between identical writes");
        }
    }

    #[test]
    fn loader_rejects_broken_directories() {
        let layout = ErpLayout::new(8, 16).unwrap();
        assert!(Dataset::open(&tmp("void")).is_err());

        let dir = tmp("mismatch");
        write_dataset(&[7], layout, &dir).unwrap();
        // swap the depth file for one with the wrong size
        let small = pfm::PfmImage::new(1, 4, 8, vec![1.0; 32]).unwrap();
        pfm::write_pfm(&dir.join("00000_depth.pfm"), &small).unwrap();
        let ds = Dataset::open(&dir).unwrap();
        assert!(ds.load_sample(0).is_err());
        assert!(ds.load_sample(3).is_err());

        let dir = tmp("shortline");
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join(MANIFEST), "a.png b.pfm\n").unwrap();
        assert!(Dataset::open(&dir).is_err());
    }

    #[test]
    fn sixteen_desk_samples_render_within_budget() {
        let layout = ErpLayout::new(64, 128).unwrap();
        let dir = tmp("budget");
        let seeds: Vec<u64> = (0..16).collect();
        let t0 = Instant::now();
        write_dataset(&seeds, layout, &dir).unwrap();
        let elapsed = t0.elapsed();
        assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
        assert_eq!(Dataset::open(&dir).unwrap().len(), 16);
    }
}
