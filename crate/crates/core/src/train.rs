//! Training loop, evaluation, and inference export.
//!
//! The loop is bit-deterministic given (seed, config, dataset): shuffles are
//! seeded per epoch, log lines carry no wall-clock state, and checkpoints at
//! epoch boundaries restore the exact optimizer trajectory. `last.ckpt` is
//! rewritten every epoch for resuming; `best.ckpt` tracks the best validation
//! score seen so far.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::geometry::ErpLayout;
use crate::io::checkpoint::{self, Checkpoint, Progress};
use crate::io::dataset::{Dataset, Sample};
use crate::io::{pfm, ply, png};
use crate::losses::{build_pyramid, total_loss, LossBreakdown, PerceptualNet, SupervisionPyramid};
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::net::{forward, GridSet, NetworkConfig, NetworkState, STAGES, TaskMode};
use crate::optim::Adam;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// Learning rate at an epoch: the base halves every `halve_every` epochs.
pub fn lr_at(base: f64, halve_every: usize, epoch: usize) -> f64 {
    base * 0.5f64.powi((epoch / halve_every.max(1)) as i32)
}

/// Seeded Fisher-Yates permutation of `0..n`, different each epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// A sample converted to network units: f32 RGB and a ground-truth pyramid
/// with depth divided by `d_max` to match the sigmoid head's range.
struct Prepared {
    rgb: Vec<f32>,
    pyramid: SupervisionPyramid<f32>,
}

fn prepare(sample: &Sample, net: &NetworkConfig) -> Result<Prepared> {
    if sample.height != net.height || sample.width != net.width {
        return Err(Error::invalid(format!(
            "sample is {}x{}, network expects {}x{}",
            sample.height, sample.width, net.height, net.width
        )));
    }
    let rgb: Vec<f32> = sample.rgb.iter().map(|&v| v as f32).collect();
    let depth: Vec<f32> = sample.depth.iter().map(|&d| (d / net.d_max) as f32).collect();
    let normal: Vec<f32> = sample.normal.iter().map(|&v| v as f32).collect();
    let scales = if net.use_multiscale { STAGES } else { 1 };
    let pyramid =
        build_pyramid(&depth, &normal, &sample.mask, sample.height, sample.width, scales)?;
    Ok(Prepared { rgb, pyramid })
}

/// Tail split used when no validation directory is configured: the last
/// max(1, n/5) samples are held out.
fn split_tail(mut all: Vec<Sample>) -> (Vec<Sample>, Vec<Sample>) {
    let k = (all.len() / 5).max(1).min(all.len());
    let val = all.split_off(all.len() - k);
    (all, val)
}

fn fmt_term(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6e}"),
        None => "-".to_string(),
    }
}

fn step_line(step: u64, epoch: usize, lr: f64, b: &LossBreakdown) -> String {
    format!(
        "step {step} epoch {epoch} lr {lr:.6e} total {:.6e} dmse {} dgrad {} dperc {} nmse {} nang {} nperc {}",
        b.total,
        fmt_term(b.depth_mse),
        fmt_term(b.depth_grad),
        fmt_term(b.depth_perceptual),
        fmt_term(b.normal_mse),
        fmt_term(b.normal_angle),
        fmt_term(b.normal_perceptual),
    )
}

/// What `train` did, with the paths it wrote.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Epochs fully completed by this call.
    pub epochs_run: usize,
    pub global_step: u64,
    /// Total loss at the first and last step this call executed.
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Best monitored validation value (depth RMSE, or mean normal error in
    /// normal-only mode).
    pub best_val: Option<f64>,
    pub stopped_early: bool,
    pub log_path: PathBuf,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
}

fn monitored(report: &MetricsReport, mode: TaskMode) -> Result<(&'static str, f64)> {
    if mode.depth() {
        let d = report.depth.as_ref().ok_or_else(|| Error::invalid("no depth metrics"))?;
        Ok(("depth_rmse", d.rmse))
    } else {
        let n = report.normal.as_ref().ok_or_else(|| Error::invalid("no normal metrics"))?;
        Ok(("normal_mean", n.mean_deg))
    }
}

fn one_step(
    state: &mut NetworkState<f32>,
    adam: &mut Adam<f32>,
    cfg: &TrainConfig,
    grids: &GridSet,
    perceptual: &PerceptualNet<f32>,
    batch: &[&Prepared],
    lr: f64,
) -> Result<LossBreakdown> {
    let (h, w) = (cfg.net.height, cfg.net.width);
    let mut rgb = Vec::with_capacity(batch.len() * 3 * h * w);
    for s in batch {
        rgb.extend_from_slice(&s.rgb);
    }
    let mut tape = Tape::new();
    let rid = tape.constant(Tensor::new(vec![batch.len(), 3, h, w], rgb)?)?;
    let fp = forward(&mut tape, rid, state, &cfg.net, grids)?;
    let pyramids: Vec<SupervisionPyramid<f32>> = batch.iter().map(|s| s.pyramid.clone()).collect();
    let tl = total_loss(&mut tape, &fp.preds, &pyramids, &cfg.loss, perceptual)?;
    tape.backward(tl.total)?;
    let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for (name, &id) in &fp.param_ids {
        // branches disabled by the task mode legitimately get no gradient
        if let Some(g) = tape.grad(id) {
            grads.insert(name.clone(), g.to_vec());
        }
    }
    adam.step(&mut state.params, &grads, lr, cfg.clip)?;
    Ok(tl.breakdown)
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::format(format!("{}: {e}", cfg.out_dir.display())))?;
    let last_path = cfg.out_dir.join("last.ckpt");
    let best_path = cfg.out_dir.join("best.ckpt");
    let log_path = cfg.out_dir.join("train.log");

    let all = Dataset::open(&cfg.data_dir)?.load_all()?;
    let (train_samples, val_samples) = match &cfg.val_dir {
        Some(dir) => (all, Dataset::open(dir)?.load_all()?),
        None => split_tail(all),
    };
    if train_samples.is_empty() {
        return Err(Error::invalid(
            "no training samples left; a dataset without val_dir needs at least 2",
        ));
    }
    if val_samples.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let prepared: Vec<Prepared> =
        train_samples.iter().map(|s| prepare(s, &cfg.net)).collect::<Result<_>>()?;

    let grids = GridSet::for_config(&cfg.net)?;
    let perceptual = PerceptualNet::<f32>::new(cfg.perceptual_seed);

    // resume from last.ckpt when the output dir already holds one
    let (mut state, mut adam, start_epoch, mut global_step, mut best_val, mut stale) =
        if last_path.exists() {
            let ck = checkpoint::load(&last_path)?;
            if ck.net != cfg.net {
                return Err(Error::config(format!(
                    "{} was trained with a different network config",
                    last_path.display()
                )));
            }
            let p = ck
                .progress
                .ok_or_else(|| Error::format("checkpoint has no training progress to resume"))?;
            (
                NetworkState { params: ck.params },
                ck.adam.unwrap_or_default(),
                p.next_epoch,
                p.global_step,
                p.best_val,
                p.epochs_since_best,
            )
        } else {
            (NetworkState::init(&cfg.net, cfg.seed)?, Adam::new(), 0, 0, None, 0)
        };

    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::format(format!("{}: {e}", log_path.display())))?;
    let mut logln = |line: String| -> Result<()> {
        writeln!(log, "{line}").map_err(|e| Error::format(format!("write log: {e}")))
    };

    let save = |state: &NetworkState<f32>, adam: Option<&Adam<f32>>, prog: Progress, path: &Path| {
        checkpoint::save(
            path,
            &Checkpoint {
                net: cfg.net.clone(),
                params: state.params.clone(),
                adam: adam.cloned(),
                progress: Some(prog),
            },
        )
    };

    let mut outcome = TrainOutcome {
        epochs_run: 0,
        global_step,
        initial_loss: None,
        final_loss: None,
        best_val,
        stopped_early: false,
        log_path: log_path.clone(),
        best_path: best_path.clone(),
        last_path: last_path.clone(),
    };

    'epochs: for epoch in start_epoch..cfg.epochs {
        let lr = lr_at(cfg.lr, cfg.lr_halve_every, epoch);
        let order = epoch_order(prepared.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|cap| global_step >= cap) {
                // A cap stops mid-epoch: save the state for evaluation, but a
                // resume restarts this epoch, so trajectories only match
                // uninterrupted runs when stopping at epoch boundaries.
                save(
                    &state,
                    Some(&adam),
                    Progress { next_epoch: epoch, global_step, best_val, epochs_since_best: stale },
                    &last_path,
                )?;
                break 'epochs;
            }
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
            let breakdown = one_step(&mut state, &mut adam, cfg, &grids, &perceptual, &batch, lr)?;
            logln(step_line(global_step, epoch, lr, &breakdown))?;
            global_step += 1;
            outcome.initial_loss.get_or_insert(breakdown.total);
            outcome.final_loss = Some(breakdown.total);
        }
        outcome.epochs_run += 1;

        let validate_now = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        if validate_now {
            let report = evaluate_state(&state, &cfg.net, &grids, &val_samples)?;
            let (name, value) = monitored(&report, cfg.net.task_mode)?;
            let improved = best_val.is_none_or(|b| value < b);
            if improved {
                best_val = Some(value);
                stale = 0;
                save(
                    &state,
                    None,
                    Progress {
                        next_epoch: epoch + 1,
                        global_step,
                        best_val,
                        epochs_since_best: 0,
                    },
                    &best_path,
                )?;
            } else {
                stale += 1;
            }
            logln(format!(
                "epoch {epoch} val {name} {value:.6e} best {:.6e} stale {stale}",
                best_val.expect("set on first validation")
            ))?;
        }
        save(
            &state,
            Some(&adam),
            Progress { next_epoch: epoch + 1, global_step, best_val, epochs_since_best: stale },
            &last_path,
        )?;
        if validate_now && stale >= cfg.patience {
            logln(format!("early stop at epoch {epoch} after {stale} stale validations"))?;
            outcome.stopped_early = true;
            break;
        }
    }

    outcome.global_step = global_step;
    outcome.best_val = best_val;
    Ok(outcome)
}

/// Finest-scale maps for one panorama: depth in meters and raw (tanh-range)
/// normals, each `None` when the task mode disables that head.
pub fn infer_maps(
    state: &NetworkState<f32>,
    net: &NetworkConfig,
    grids: &GridSet,
    rgb: &[f64],
    height: usize,
    width: usize,
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
    if height != net.height || width != net.width {
        return Err(Error::invalid(format!(
            "input is {height}x{width}, network expects {}x{}",
            net.height, net.width
        )));
    }
    let data: Vec<f32> = rgb.iter().map(|&v| v as f32).collect();
    let mut tape = Tape::new();
    let rid = tape.constant(Tensor::new(vec![1, 3, height, width], data)?)?;
    let fp = forward(&mut tape, rid, state, net, grids)?;
    let depth = fp.preds.depth.last().map(|&id| {
        tape.data(id).iter().map(|&v| v as f64 * net.d_max).collect::<Vec<f64>>()
    });
    let normal = fp.preds.normal.last().map(|&id| {
        let raw = tape.data(id);
        let hw = height * width;
        let mut out = vec![0.0f64; 3 * hw];
        for i in 0..hw {
            let n = [raw[i] as f64, raw[hw + i] as f64, raw[2 * hw + i] as f64];
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            // a degenerate head output stays zero rather than dividing by ~0
            let s = if len > 1e-12 { 1.0 / len } else { 0.0 };
            out[i] = n[0] * s;
            out[hw + i] = n[1] * s;
            out[2 * hw + i] = n[2] * s;
        }
        out
    });
    Ok((depth, normal))
}

/// Run the network over a sample set and pool the metrics; medians come from
/// the pooled per-pixel angles, so chunking the set cannot change the report.
pub fn evaluate_state(
    state: &NetworkState<f32>,
    net: &NetworkConfig,
    grids: &GridSet,
    samples: &[Sample],
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let mut acc = MetricsAccumulator::new();
    for s in samples {
        let (depth, normal) = infer_maps(state, net, grids, &s.rgb, s.height, s.width)?;
        if let Some(d) = depth {
            acc.add_depth(&d, &s.depth, &s.mask)?;
        }
        if let Some(n) = normal {
            acc.add_normal(&n, &s.normal, &s.mask)?;
        }
    }
    Ok(acc.report())
}

/// Evaluate a checkpoint against a dataset directory.
pub fn evaluate_checkpoint(ckpt: &Path, data_dir: &Path) -> Result<MetricsReport> {
    let ck = checkpoint::load(ckpt)?;
    let samples = Dataset::open(data_dir)?.load_all()?;
    let grids = GridSet::for_config(&ck.net)?;
    evaluate_state(&NetworkState { params: ck.params }, &ck.net, &grids, &samples)
}

/// Predict from one RGB panorama and write every export the checkpoint's
/// task mode supports: depth PFM, normal PFM, color-coded normal PNG, and
/// two ASCII point clouds (image-colored and normal-colored). Returns the
/// written paths.
pub fn infer_and_export(ckpt: &Path, rgb_png: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let ck = checkpoint::load(ckpt)?;
    let (height, width, rgb) = png::read_rgb8(rgb_png)?;
    let grids = GridSet::for_config(&ck.net)?;
    let state = NetworkState { params: ck.params };
    let (depth, normal) = infer_maps(&state, &ck.net, &grids, &rgb, height, width)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::format(format!("{}: {e}", out_dir.display())))?;
    let stem = rgb_png
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::invalid(format!("no file stem in {}", rgb_png.display())))?;

    let mask = vec![true; height * width];
    let mut written = Vec::new();
    let mut put = |name: String, write: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        let path = out_dir.join(name);
        write(&path)?;
        written.push(path);
        Ok(())
    };
    if let Some(d) = &depth {
        put(format!("{stem}_depth.pfm"), &|p| {
            pfm::write_pfm(p, &pfm::PfmImage::from_f64(1, height, width, d)?)
        })?;
        let layout = ErpLayout::new(height, width).map_err(|e| Error::invalid(e.to_string()))?;
        put(format!("{stem}_cloud_rgb.ply"), &|p| {
            ply::write_ply(p, &ply::rgb_cloud(layout, d, &mask, &rgb)?)
        })?;
        if let Some(n) = &normal {
            put(format!("{stem}_cloud_normal.ply"), &|p| {
                ply::write_ply(p, &ply::normal_cloud(layout, d, &mask, n)?)
            })?;
        }
    }
    if let Some(n) = &normal {
        put(format!("{stem}_normal.pfm"), &|p| {
            pfm::write_pfm(p, &pfm::PfmImage::from_f64(3, height, width, n)?)
        })?;
        put(format!("{stem}_normal.png"), &|p| {
            png::write_normal_png(p, height, width, n, &mask)
        })?;
    }
    Ok(written)
}
