//! Command-line front end: dataset synthesis, training, evaluation,
//! inference export, gradient verification and ground-truth cloud export.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use pano_mtl::config::{TrainConfig, ENV_OUT, ENV_SEED};
use pano_mtl::geometry::ErpLayout;
use pano_mtl::gradsuite;
use pano_mtl::io::{dataset, ply};
use pano_mtl::train;

#[derive(Parser)]
#[command(name = "pano-mtl", version, about = "Joint 360 depth and surface-normal estimation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic panorama dataset with exact ground truth
    Synth {
        /// Output dataset directory (created if missing)
        #[arg(long)]
        out: PathBuf,
        /// Number of samples
        #[arg(long)]
        count: usize,
        /// Seed of the first sample; sample i uses seed + i
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Panorama height in pixels (width is always twice the height)
        #[arg(long, default_value_t = 64)]
        height: usize,
    },
    /// Train from a key=value config file
    Train {
        /// Config file; PANO_MTL_SEED and PANO_MTL_OUT override it
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory with a manifest
        #[arg(long)]
        data: PathBuf,
        /// Also write report.txt and report.json here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a checkpoint on one RGB panorama and export PFM, PNG and PLY maps
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input panorama (8-bit RGB PNG, 2:1 aspect)
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against central finite differences
    Gradcheck {
        /// op, block, network or all
        #[arg(long, default_value = "all")]
        scope: String,
    },
    /// Export a dataset sample's ground truth as colored point clouds
    ExportPly {
        #[arg(long)]
        data: PathBuf,
        /// Sample index within the manifest
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Synth { out, count, seed, height } => synth(out, count, seed, height),
        Cmd::Train { config } => run_train(config),
        Cmd::Eval { checkpoint, data, out } => eval(checkpoint, data, out),
        Cmd::Infer { checkpoint, rgb, out } => infer(checkpoint, rgb, out),
        Cmd::Gradcheck { scope } => gradcheck(&scope),
        Cmd::ExportPly { data, index, out } => export_ply(data, index, out),
    }
}

fn synth(out: PathBuf, count: usize, seed: u64, height: usize) -> Result<()> {
    if count == 0 {
        bail!("count must be at least 1");
    }
    let layout = ErpLayout::new(height, 2 * height)?;
    let seeds: Vec<u64> = (0..count as u64).map(|i| seed + i).collect();
    dataset::write_dataset(&seeds, layout, &out)?;
    println!("wrote {count} samples at {height}x{} to {}", 2 * height, out.display());
    Ok(())
}

fn run_train(config: PathBuf) -> Result<()> {
    let mut cfg = TrainConfig::load(&config)?;
    cfg.apply_env(|k| std::env::var(k).ok())
        .with_context(|| format!("environment overrides {ENV_SEED} / {ENV_OUT}"))?;
    let outcome = train::train(&cfg)?;
    println!("epochs run       {}", outcome.epochs_run);
    println!("global step      {}", outcome.global_step);
    if let (Some(first), Some(last)) = (outcome.initial_loss, outcome.final_loss) {
        println!("train loss       {first:.6e} -> {last:.6e}");
    }
    if let Some(best) = outcome.best_val {
        println!("best validation  {best:.6e}");
    }
    if outcome.stopped_early {
        println!("stopped early");
    }
    println!("log              {}", outcome.log_path.display());
    println!("best checkpoint  {}", outcome.best_path.display());
    println!("last checkpoint  {}", outcome.last_path.display());
    Ok(())
}

fn eval(checkpoint: PathBuf, data: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let report = train::evaluate_checkpoint(&checkpoint, &data)?;
    print!("{}", report.to_text());
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
        let txt = dir.join("report.txt");
        let json = dir.join("report.json");
        std::fs::write(&txt, report.to_text()).with_context(|| txt.display().to_string())?;
        std::fs::write(&json, report.to_json()).with_context(|| json.display().to_string())?;
        println!("wrote {}", txt.display());
        println!("wrote {}", json.display());
    }
    Ok(())
}

fn infer(checkpoint: PathBuf, rgb: PathBuf, out: PathBuf) -> Result<()> {
    for path in train::infer_and_export(&checkpoint, &rgb, &out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn gradcheck(scope: &str) -> Result<()> {
    let scope = gradsuite::Scope::parse(scope)
        .with_context(|| format!("unknown scope {scope:?}; use op, block, network or all"))?;
    let outcomes = gradsuite::run(scope)?;
    let mut failed = 0usize;
    for o in &outcomes {
        println!("{o}");
        if !o.good() {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", outcomes.len());
    }
    println!("all {} gradient checks passed", outcomes.len());
    Ok(())
}

fn export_ply(data: PathBuf, index: usize, out: PathBuf) -> Result<()> {
    let ds = dataset::Dataset::open(&data)?;
    let sample = ds.load_sample(index)?;
    let layout = ErpLayout::new(sample.height, sample.width)?;
    std::fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
    let rgb_pts = ply::rgb_cloud(layout, &sample.depth, &sample.mask, &sample.rgb)?;
    let normal_pts = ply::normal_cloud(layout, &sample.depth, &sample.mask, &sample.normal)?;
    let rgb_path = out.join(format!("{index:05}_gt_cloud_rgb.ply"));
    let normal_path = out.join(format!("{index:05}_gt_cloud_normal.ply"));
    ply::write_ply(&rgb_path, &rgb_pts)?;
    ply::write_ply(&normal_path, &normal_pts)?;
    println!("wrote {} ({} points)", rgb_path.display(), rgb_pts.len());
    println!("wrote {} ({} points)", normal_path.display(), normal_pts.len());
    Ok(())
}
