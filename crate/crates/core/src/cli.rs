//! `clcc` command line: train, eval, predict, synth, ablate.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{Config, ENV_PREFIX};
use crate::data::{self, Sample, SplitManifest};
use crate::error::{Error, Result};
use crate::evaluation::{self, aggregate_runs, comparison_table, MetricsReport, RunAggregate, THRESHOLD};
use crate::training::{self, run_training};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const MANIFEST_FILE: &str = "split_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "clcc", version, about = "Semi-supervised segmentation with cross-level consistency")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file (sections model, data, train, loss, eval).
    #[arg(long, global = true, env = "CLCC_CONFIG")]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=0.0005`. Repeatable.
    /// Environment variables `CLCC_<SECTION>__<KEY>` apply before these.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory for run artifacts.
    #[arg(long, global = true, env = "CLCC_RUN_DIR", default_value = "runs/default")]
    pub run_dir: PathBuf,
    /// Shortcut for `--set train.seed=N`.
    #[arg(long, global = true, env = "CLCC_SEED")]
    pub seed: Option<u64>,
    /// Compute device; only `cpu` is supported.
    #[arg(long, global = true, env = "CLCC_DEVICE", default_value = "cpu")]
    pub device: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Two-stage training; writes config snapshot, split manifest, log and checkpoints.
    Train {
        /// Continue from `<run-dir>/ckpt_last.safetensors`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train_labeled, train_unlabeled, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Split manifest; defaults to the run directory's manifest when present.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Report directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict a mask for one image; also writes `<out>_overlay.png`.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Binary mask PNG.
        #[arg(long)]
        out: PathBuf,
        /// Also write the foreground probability map as a grayscale PNG.
        #[arg(long)]
        prob: Option<PathBuf>,
    },
    /// Write a synthetic dataset (`images/` and `masks/`).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long = "data-seed", default_value_t = 0)]
        data_seed: u64,
    },
    /// Train the three loss-plan variants over several labeled-subset seeds.
    Ablate {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Add the supervised-only row (both unsupervised weights zero).
        #[arg(long)]
        with_baseline: bool,
    },
}

fn resolve_config(global: &GlobalArgs, fallback: Option<&Path>) -> Result<Config> {
    let mut overrides = Vec::new();
    if let Some(seed) = global.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    overrides.extend(global.overrides.iter().cloned());
    let file = global.config.as_deref().or(fallback.filter(|p| p.exists()));
    let env = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX));
    Config::resolve(file, env, &overrides)
}

pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    execute(cli)
}

pub fn execute(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if g.device != "cpu" {
        return Err(Error::Config(format!("device `{}` is not supported (only cpu)", g.device)));
    }
    match cli.command {
        Command::Train { resume } => {
            let config = resolve_config(g, None)?;
            cmd_train(&config, &g.run_dir, resume).map(|_| ())
        }
        Command::Eval {
            checkpoint,
            split,
            manifest,
            out,
        } => {
            let mut config = resolve_config(g, Some(&g.run_dir.join(CONFIG_SNAPSHOT)))?;
            let run_manifest = g.run_dir.join(MANIFEST_FILE);
            if let Some(m) = manifest {
                config.data.manifest = Some(m);
            } else if config.data.manifest.is_none() && run_manifest.exists() {
                config.data.manifest = Some(run_manifest);
            }
            let out = out.unwrap_or_else(|| g.run_dir.clone());
            let report = cmd_eval(&config, &checkpoint, &split, &out)?;
            print!("{report}");
            Ok(())
        }
        Command::Predict {
            checkpoint,
            image,
            out,
            prob,
        } => {
            let config = resolve_config(g, Some(&g.run_dir.join(CONFIG_SNAPSHOT)))?;
            cmd_predict(&checkpoint, &image, &out, prob.as_deref(), config.data.image_side)
        }
        Command::Synth {
            out,
            count,
            side,
            data_seed,
        } => {
            let samples = data::generate_synthetic(data_seed, count, side)?;
            data::save_dataset(&samples, &out)?;
            println!("wrote {count} samples to {}", out.display());
            Ok(())
        }
        Command::Ablate { seeds, with_baseline } => {
            let config = resolve_config(g, None)?;
            let rows = cmd_ablate(&config, &g.run_dir, seeds, with_baseline)?;
            print!("{}", comparison_table(&rows));
            Ok(())
        }
    }
}

/// Train, then evaluate the best checkpoint on the test split.
pub fn cmd_train(config: &Config, run_dir: &Path, resume: bool) -> Result<MetricsReport> {
    std::fs::create_dir_all(run_dir).map_err(|e| Error::file(run_dir, e))?;
    config.write(&run_dir.join(CONFIG_SNAPSHOT))?;
    let splits = training::load_splits(&config.data)?;
    splits.manifest().write(&run_dir.join(MANIFEST_FILE))?;
    log::info!(
        "splits: {} labeled, {} unlabeled, {} val, {} test",
        splits.train_labeled.len(),
        splits.train_unlabeled.len(),
        splits.val.len(),
        splits.test.len()
    );
    let outcome = run_training(config, &splits, run_dir, resume)?;
    let model = Checkpoint::load(&outcome.best_checkpoint)?.to_model()?;
    let report = evaluation::evaluate_model(&model, &splits.test, config.eval)?;
    report.write(run_dir, "test_metrics")?;
    log::info!(
        "best epoch {} (val dice {:.2}); test MAE {:.2} Dice {:.2} mIoU {:.2}",
        outcome.best_epoch,
        outcome.best_val_dice,
        report.mae,
        report.dice_fg,
        report.miou
    );
    Ok(report)
}

/// Evaluate `checkpoint` on `split`; writes `eval_<split>.json` and `.txt` into `out`.
pub fn cmd_eval(config: &Config, checkpoint: &Path, split: &str, out: &Path) -> Result<MetricsReport> {
    let ck = Checkpoint::load(checkpoint)?;
    ck.model_config
        .check_image_size(config.data.image_side, config.data.image_side)?;
    let model = ck.to_model()?;
    let splits = training::load_splits(&config.data)?;
    let report = evaluation::evaluate_model(&model, splits.partition(split)?, config.eval)?;
    report.write(out, &format!("eval_{split}"))?;
    Ok(report)
}

/// Predict a binary mask for one image file at its original resolution.
pub fn cmd_predict(
    checkpoint: &Path,
    image_path: &Path,
    out: &Path,
    prob_out: Option<&Path>,
    side: usize,
) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    model.config().check_image_size(side, side)?;
    let image = data::read_image(image_path)?;
    let (h, w) = (image.height as u32, image.width as u32);
    let sample = data::resize_sample(&Sample::new("input", image.clone(), None)?, side)?;
    let probs = model
        .predict_foreground(&sample.image.to_tensor()?.unsqueeze(0)?)?
        .squeeze(0)?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let small: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(side as u32, side as u32, probs).expect("side x side buffer");
    let full = image::imageops::resize(&small, w, h, FilterType::Triangle);

    let mask = GrayImage::from_fn(w, h, |x, y| Luma([if full.get_pixel(x, y)[0] > THRESHOLD { 255 } else { 0 }]));
    mask.save(out).map_err(|e| Error::file(out, e))?;
    let rgb = image.to_rgb8();
    let overlay = RgbImage::from_fn(w, h, |x, y| {
        let p = rgb.get_pixel(x, y).0;
        if mask.get_pixel(x, y)[0] > 0 {
            Rgb([p[0] / 2 + 127, p[1] / 2, p[2] / 2])
        } else {
            Rgb(p)
        }
    });
    let overlay_path = overlay_path(out);
    overlay.save(&overlay_path).map_err(|e| Error::file(&overlay_path, e))?;
    if let Some(p) = prob_out {
        let gray = GrayImage::from_fn(w, h, |x, y| {
            Luma([(full.get_pixel(x, y)[0].clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        gray.save(p).map_err(|e| Error::file(p, e))?;
    }
    Ok(())
}

pub fn overlay_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_overlay.png"))
}

/// Variant name and its loss plan applied to a base config.
pub fn ablation_variants(base: &Config, with_baseline: bool) -> Vec<(String, Config)> {
    let total = base.train.total_epochs;
    let mut out = Vec::new();
    let mut no_consist = base.clone();
    no_consist.train.stage1_epochs = total;
    out.push(("ours (w/o consist)".to_string(), no_consist));
    let mut no_contrast = base.clone();
    no_contrast.train.stage1_epochs = 0;
    out.push(("ours (w/o contrast)".to_string(), no_contrast));
    out.push(("ours (all)".to_string(), base.clone()));
    if with_baseline {
        let mut sup = base.clone();
        sup.loss.alpha = 0.0;
        sup.loss.beta = 0.0;
        out.insert(0, ("supervised only".to_string(), sup));
    }
    out
}

#[derive(Serialize)]
struct AblationRow<'a> {
    method: &'a str,
    aggregate: &'a RunAggregate,
}

/// Run every variant over `seeds` labeled-subset seeds; writes
/// `ablation.json` and `ablation.txt` into `run_dir`.
pub fn cmd_ablate(
    base: &Config,
    run_dir: &Path,
    seeds: u64,
    with_baseline: bool,
) -> Result<Vec<(String, RunAggregate)>> {
    let mut rows = Vec::new();
    for (vi, (name, variant)) in ablation_variants(base, with_baseline).into_iter().enumerate() {
        let mut reports = Vec::new();
        for k in 0..seeds {
            let mut cfg = variant.clone();
            cfg.data.labeled_seed = base.data.labeled_seed + k;
            cfg.train.seed = base.train.seed + k;
            let dir = run_dir.join(format!("variant{vi}")).join(format!("seed{k}"));
            log::info!("{name}, seed {k} -> {}", dir.display());
            reports.push(cmd_train(&cfg, &dir, false)?);
        }
        rows.push((name, aggregate_runs(&reports)?));
    }
    std::fs::create_dir_all(run_dir).map_err(|e| Error::file(run_dir, e))?;
    let json: Vec<AblationRow> = rows
        .iter()
        .map(|(m, a)| AblationRow {
            method: m,
            aggregate: a,
        })
        .collect();
    let path = run_dir.join("ablation.json");
    std::fs::write(&path, serde_json::to_string_pretty(&json)? + "\n").map_err(|e| Error::file(&path, e))?;
    let path = run_dir.join("ablation.txt");
    std::fs::write(&path, comparison_table(&rows)).map_err(|e| Error::file(&path, e))?;
    Ok(rows)
}

/// Split manifest of a finished run.
pub fn read_manifest(run_dir: &Path) -> Result<SplitManifest> {
    SplitManifest::read(&run_dir.join(MANIFEST_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn variants_follow_stage_plans() {
        let mut c = Config::desk();
        c.train.total_epochs = 6;
        c.train.stage1_epochs = 2;
        let v = ablation_variants(&c, true);
        assert_eq!(v.len(), 4);
        assert_eq!(v[1].1.train.stage1_epochs, 6);
        assert_eq!(v[2].1.train.stage1_epochs, 0);
        assert_eq!(v[3].1.train.stage1_epochs, 2);
        assert_eq!((v[0].1.loss.alpha, v[0].1.loss.beta), (0.0, 0.0));
    }

    #[test]
    fn unsupported_device_rejected() {
        let err = run(["clcc", "--device", "cuda", "train"]).unwrap_err();
        assert!(err.to_string().contains("cuda"));
    }

    #[test]
    fn overlay_name() {
        assert_eq!(overlay_path(Path::new("/a/b/mask.png")), Path::new("/a/b/mask_overlay.png"));
    }
}
