//! Checkpoint container: a magic header, a format version, the network
//! config as a key-value blob, and named fp32 tensors, all little-endian.
//! Optional trailing sections carry the optimizer moments and training
//! progress so a run can resume exactly where it stopped.

use std::collections::BTreeMap;
use std::path::Path;

use super::with_path;
use crate::config::{net_from_text, net_to_text};
use crate::net::NetworkConfig;
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PMTL";
pub const FORMAT_VERSION: u32 = 1;

/// Where a training run stood when the checkpoint was written.
#[derive(Debug, Clone, PartialEq)]
pub struct Progress {
    /// First epoch the resumed run should execute.
    pub next_epoch: usize,
    pub global_step: u64,
    /// Best monitored validation value so far, if any epoch validated.
    pub best_val: Option<f64>,
    pub epochs_since_best: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: NetworkConfig,
    pub params: BTreeMap<String, Tensor<f32>>,
    pub adam: Option<Adam<f32>>,
    pub progress: Option<Progress>,
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn push_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    out.reserve(4 * vals.len());
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    push_str(&mut out, &net_to_text(&ckpt.net));

    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.params {
        push_str(&mut out, name);
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        push_f32s(&mut out, &t.data);
    }

    match &ckpt.adam {
        None => out.push(0),
        Some(adam) => {
            out.push(1);
            out.extend_from_slice(&adam.step.to_le_bytes());
            out.extend_from_slice(&(adam.m.len() as u32).to_le_bytes());
            for (name, m) in &adam.m {
                let v = adam.v.get(name).ok_or_else(|| {
                    Error::invalid(format!("optimizer state for {name} has m but no v"))
                })?;
                if v.len() != m.len() {
                    return Err(Error::invalid(format!("optimizer m/v length mismatch for {name}")));
                }
                push_str(&mut out, name);
                out.extend_from_slice(&(m.len() as u32).to_le_bytes());
                push_f32s(&mut out, m);
                push_f32s(&mut out, v);
            }
        }
    }

    match &ckpt.progress {
        None => out.push(0),
        Some(p) => {
            out.push(1);
            out.extend_from_slice(&(p.next_epoch as u32).to_le_bytes());
            out.extend_from_slice(&p.global_step.to_le_bytes());
            out.push(p.best_val.is_some() as u8);
            out.extend_from_slice(&p.best_val.unwrap_or(0.0).to_le_bytes());
            out.extend_from_slice(&(p.epochs_since_best as u32).to_le_bytes());
        }
    }

    with_path(std::fs::write(path, out), path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated reading {what}"));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, String> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("length 4")))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("length 8")))
    }

    fn f64(&mut self, what: &str) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("length 8")))
    }

    fn string(&mut self, what: &str) -> std::result::Result<String, String> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| format!("{what} is not utf-8"))
    }

    fn f32s(&mut self, n: usize, what: &str) -> std::result::Result<Vec<f32>, String> {
        let raw = self.take(4 * n, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect())
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = with_path(std::fs::read(path), path)?;
    parse(&bytes).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

fn parse(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err("not a checkpoint (bad magic)".to_string());
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(format!("format version {version}, this build reads {FORMAT_VERSION}"));
    }
    let blob = c.string("config blob")?;
    let net = net_from_text(&blob).map_err(|e| format!("embedded config: {e}"))?;

    let count = c.u32("tensor count")? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name = c.string("tensor name")?;
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = c.u32("dim")? as usize;
            numel = numel.checked_mul(d).ok_or("dimension overflow")?;
            shape.push(d);
        }
        let data = c.f32s(numel, &format!("data of {name}"))?;
        let t = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?.with_grad();
        if params.insert(name.clone(), t).is_some() {
            return Err(format!("duplicate tensor {name}"));
        }
    }

    let adam = match c.u8("optimizer flag")? {
        0 => None,
        1 => {
            let step = c.u64("optimizer step")?;
            let entries = c.u32("optimizer entry count")? as usize;
            let mut adam = Adam::new();
            adam.step = step;
            for _ in 0..entries {
                let name = c.string("moment name")?;
                let len = c.u32("moment length")? as usize;
                let m = c.f32s(len, &format!("m of {name}"))?;
                let v = c.f32s(len, &format!("v of {name}"))?;
                adam.m.insert(name.clone(), m);
                adam.v.insert(name, v);
            }
            Some(adam)
        }
        other => return Err(format!("optimizer flag {other}")),
    };

    let progress = match c.u8("progress flag")? {
        0 => None,
        1 => {
            let next_epoch = c.u32("next epoch")? as usize;
            let global_step = c.u64("global step")?;
            let has_best = c.u8("best flag")?;
            let best = c.f64("best value")?;
            let epochs_since_best = c.u32("epochs since best")? as usize;
            Some(Progress {
                next_epoch,
                global_step,
                best_val: (has_best != 0).then_some(best),
                epochs_since_best,
            })
        }
        other => return Err(format!("progress flag {other}")),
    };

    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - c.pos));
    }
    Ok(Checkpoint { net, params, adam, progress })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("pano-mtl-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn sample_checkpoint() -> Checkpoint {
        let mut params = BTreeMap::new();
        params.insert(
            "enc.w".to_string(),
            Tensor::new(vec![2, 3], vec![1.0f32 / 3.0, -0.0, f32::MIN_POSITIVE, 1e-38, 7.5, -2.25])
                .unwrap(),
        );
        params.insert("enc.b".to_string(), Tensor::scalar(0.125f32));
        let mut adam = Adam::new();
        adam.step = 17;
        adam.m.insert("enc.w".to_string(), vec![0.5f32; 6]);
        adam.v.insert("enc.w".to_string(), vec![0.25f32; 6]);
        adam.m.insert("enc.b".to_string(), vec![-1.5f32]);
        adam.v.insert("enc.b".to_string(), vec![2.0f32]);
        Checkpoint {
            net: NetworkConfig::desk(),
            params,
            adam: Some(adam),
            progress: Some(Progress {
                next_epoch: 9,
                global_step: 541,
                best_val: Some(0.0321),
                epochs_since_best: 3,
            }),
        }
    }

    #[test]
    fn round_trip_is_bit_exact_including_moments() {
        let ckpt = sample_checkpoint();
        let path = tmp("rt.ckpt");
        save(&path, &ckpt).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.net, ckpt.net);
        assert_eq!(back.progress, ckpt.progress);
        assert_eq!(back.params.len(), ckpt.params.len());
        for (name, t) in &ckpt.params {
            let b = &back.params[name];
            assert_eq!(b.shape, t.shape);
            let bits: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            let back_bits: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, back_bits, "{name}");
            assert!(b.requires_grad, "loaded parameters must be trainable");
        }
        assert_eq!(back.adam, ckpt.adam);

        // saving the loaded checkpoint reproduces the file byte for byte
        let path2 = tmp("rt2.ckpt");
        save(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn optimizer_and_progress_sections_are_optional() {
        let mut ckpt = sample_checkpoint();
        ckpt.adam = None;
        ckpt.progress = None;
        let path = tmp("bare.ckpt");
        save(&path, &ckpt).unwrap();
        let back = load(&path).unwrap();
        assert!(back.adam.is_none());
        assert!(back.progress.is_none());

        ckpt.progress = Some(Progress {
            next_epoch: 0,
            global_step: 0,
            best_val: None,
            epochs_since_best: 0,
        });
        let path = tmp("nobest.ckpt");
        save(&path, &ckpt).unwrap();
        assert_eq!(load(&path).unwrap().progress, ckpt.progress);
    }

    #[test]
    fn damaged_files_are_rejected_with_reasons() {
        let ckpt = sample_checkpoint();
        let path = tmp("good.ckpt");
        save(&path, &ckpt).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut magic = good.clone();
        magic[0] = b'X';
        let mut version = good.clone();
        version[4] = 99;
        let truncated = good[..good.len() - 3].to_vec();
        let mut trailing = good.clone();
        trailing.extend_from_slice(b"junk");
        for (name, bytes, needle) in [
            ("magic.ckpt", magic, "magic"),
            ("version.ckpt", version, "version"),
            ("trunc.ckpt", truncated, "truncated"),
            ("trail.ckpt", trailing, "trailing"),
        ] {
            let p = tmp(name);
            std::fs::write(&p, bytes).unwrap();
            let err = load(&p).unwrap_err().to_string();
            assert!(err.contains(needle), "{name}: {err}");
        }
        assert!(load(&tmp("absent.ckpt")).is_err());
    }
}
