//! Plain-text `key = value` run configuration.
//!
//! One file drives a whole run: network shape under `net.`, loss weights
//! under `loss.`, schedule and paths under `train.`. Lines are independent,
//! `#` starts a comment, unknown keys are errors rather than silent typos.
//! `to_text` emits every key so a round trip reproduces the config exactly.

use std::path::{Path, PathBuf};

use crate::losses::LossWeights;
use crate::net::{NetworkConfig, TaskMode};
use crate::{Error, Result};

/// Environment variable that overrides `train.seed`.
pub const ENV_SEED: &str = "PANO_MTL_SEED";
/// Environment variable that overrides `train.out_dir`.
pub const ENV_OUT: &str = "PANO_MTL_OUT";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub net: NetworkConfig,
    pub loss: LossWeights,
    /// Initial learning rate, halved every `lr_halve_every` epochs.
    pub lr: f64,
    pub lr_halve_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before training stops.
    pub patience: usize,
    pub seed: u64,
    pub data_dir: PathBuf,
    /// Held-out directory; when absent the tail of the training set is split off.
    pub val_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Validate every this many epochs.
    pub eval_every: usize,
    /// Hard cap on optimizer steps, for smoke runs.
    pub max_steps: Option<u64>,
    /// Global gradient-norm bound; `none` disables clipping.
    pub clip: Option<f64>,
    /// Seed of the frozen feature extractor used by the perceptual terms.
    pub perceptual_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetworkConfig::default(),
            loss: LossWeights::default(),
            lr: 1e-4,
            lr_halve_every: 12,
            batch_size: 2,
            epochs: 120,
            patience: 12,
            seed: 0,
            data_dir: PathBuf::from("data"),
            val_dir: None,
            out_dir: PathBuf::from("out"),
            eval_every: 1,
            max_steps: None,
            clip: Some(5.0),
            perceptual_seed: 7,
        }
    }
}

impl TrainConfig {
    /// Defaults at the small resolution everything in this repository runs at.
    pub fn desk() -> Self {
        TrainConfig { net: NetworkConfig::desk(), ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("train.lr {} must be positive", self.lr)));
        }
        if self.lr_halve_every == 0 {
            return Err(Error::config("train.lr_halve_every must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every must be at least 1"));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::config(format!("train.clip {c} must be positive or none")));
            }
        }
        Ok(())
    }

    /// Parse a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines to this config in place.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", idx + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", idx + 1)))?;
        }
        Ok(())
    }

    /// Set a single dotted key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(field) = key.strip_prefix("net.") {
            return set_net_field(&mut self.net, field, value);
        }
        if let Some(field) = key.strip_prefix("loss.") {
            return set_loss_field(&mut self.loss, field, value);
        }
        let field = key
            .strip_prefix("train.")
            .ok_or_else(|| Error::config(format!("unknown key {key:?}")))?;
        match field {
            "lr" => self.lr = parse_float(key, value)?,
            "lr_halve_every" => self.lr_halve_every = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "val_dir" => self.val_dir = if value == "none" { None } else { Some(PathBuf::from(value)) },
            "out_dir" => self.out_dir = PathBuf::from(value),
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "max_steps" => {
                self.max_steps = if value == "none" { None } else { Some(parse_num(key, value)?) }
            }
            "clip" => {
                self.clip = if value == "none" { None } else { Some(parse_float(key, value)?) }
            }
            "perceptual_seed" => self.perceptual_seed = parse_num(key, value)?,
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Emit every key in a fixed order; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# network\n");
        for line in net_to_text(&self.net).lines() {
            out.push_str("net.");
            out.push_str(line);
            out.push('\n');
        }
        out.push_str("\n# loss weights\n");
        for line in loss_to_text(&self.loss).lines() {
            out.push_str("loss.");
            out.push_str(line);
            out.push('\n');
        }
        out.push_str("\n# schedule and paths\n");
        out.push_str(&format!("train.lr = {}\n", self.lr));
        out.push_str(&format!("train.lr_halve_every = {}\n", self.lr_halve_every));
        out.push_str(&format!("train.batch_size = {}\n", self.batch_size));
        out.push_str(&format!("train.epochs = {}\n", self.epochs));
        out.push_str(&format!("train.patience = {}\n", self.patience));
        out.push_str(&format!("train.seed = {}\n", self.seed));
        out.push_str(&format!("train.data_dir = {}\n", self.data_dir.display()));
        match &self.val_dir {
            Some(p) => out.push_str(&format!("train.val_dir = {}\n", p.display())),
            None => out.push_str("train.val_dir = none\n"),
        }
        out.push_str(&format!("train.out_dir = {}\n", self.out_dir.display()));
        out.push_str(&format!("train.eval_every = {}\n", self.eval_every));
        match self.max_steps {
            Some(n) => out.push_str(&format!("train.max_steps = {n}\n")),
            None => out.push_str("train.max_steps = none\n"),
        }
        match self.clip {
            Some(c) => out.push_str(&format!("train.clip = {c}\n")),
            None => out.push_str("train.clip = none\n"),
        }
        out.push_str(&format!("train.perceptual_seed = {}\n", self.perceptual_seed));
        out
    }

    /// Read a config file, then apply environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    /// Override seed and output dir from the environment. The lookup is
    /// injected so tests never mutate real process state.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = lookup(ENV_SEED) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|e| Error::config(format!("{ENV_SEED}={v:?}: {e}")))?;
        }
        if let Some(v) = lookup(ENV_OUT) {
            self.out_dir = PathBuf::from(v);
        }
        Ok(())
    }
}

/// NetworkConfig as prefix-free `key = value` lines; this exact blob is
/// embedded in checkpoints so a model file is self-describing.
pub fn net_to_text(net: &NetworkConfig) -> String {
    format!(
        "base_channels = {}\nheads = {}\nk_side = {}\nheight = {}\nwidth = {}\n\
         use_shared_fb = {}\nuse_fusion = {}\nuse_multiscale = {}\ntask_mode = {}\nd_max = {}\n",
        net.base_channels,
        net.heads,
        net.k_side,
        net.height,
        net.width,
        net.use_shared_fb,
        net.use_fusion,
        net.use_multiscale,
        net.task_mode.as_str(),
        net.d_max,
    )
}

pub fn net_from_text(text: &str) -> Result<NetworkConfig> {
    let mut net = NetworkConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value", idx + 1)))?;
        set_net_field(&mut net, key.trim(), value.trim())?;
    }
    Ok(net)
}

fn set_net_field(net: &mut NetworkConfig, field: &str, value: &str) -> Result<()> {
    match field {
        "base_channels" => net.base_channels = parse_num(field, value)?,
        "heads" => net.heads = parse_num(field, value)?,
        "k_side" => net.k_side = parse_num(field, value)?,
        "height" => net.height = parse_num(field, value)?,
        "width" => net.width = parse_num(field, value)?,
        "use_shared_fb" => net.use_shared_fb = parse_bool(field, value)?,
        "use_fusion" => net.use_fusion = parse_bool(field, value)?,
        "use_multiscale" => net.use_multiscale = parse_bool(field, value)?,
        "task_mode" => net.task_mode = TaskMode::parse(value)?,
        "d_max" => net.d_max = parse_float(field, value)?,
        _ => return Err(Error::config(format!("unknown key \"net.{field}\""))),
    }
    Ok(())
}

fn loss_to_text(w: &LossWeights) -> String {
    format!(
        "depth_mse = {}\ndepth_grad = {}\ndepth_perceptual = {}\n\
         normal_mse = {}\nnormal_angle = {}\nnormal_perceptual = {}\n",
        w.depth_mse, w.depth_grad, w.depth_perceptual, w.normal_mse, w.normal_angle, w.normal_perceptual,
    )
}

fn set_loss_field(w: &mut LossWeights, field: &str, value: &str) -> Result<()> {
    match field {
        "depth_mse" => w.depth_mse = parse_float(field, value)?,
        "depth_grad" => w.depth_grad = parse_float(field, value)?,
        "depth_perceptual" => w.depth_perceptual = parse_float(field, value)?,
        "normal_mse" => w.normal_mse = parse_float(field, value)?,
        "normal_angle" => w.normal_angle = parse_float(field, value)?,
        "normal_perceptual" => w.normal_perceptual = parse_float(field, value)?,
        _ => return Err(Error::config(format!("unknown key \"loss.{field}\""))),
    }
    Ok(())
}

fn parse_num<T: std::str::FromStr>(field: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::config(format!("{field}: {e} (got {value:?})")))
}

fn parse_float(field: &str, value: &str) -> Result<f64> {
    let f: f64 = parse_num(field, value)?;
    if !f.is_finite() {
        return Err(Error::config(format!("{field}: {value} is not finite")));
    }
    Ok(f)
}

fn parse_bool(field: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("{field}: expected true or false, got {value:?}"))),
    }
}
