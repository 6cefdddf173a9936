//! Acceptance suite. Runs every criterion in sequence and prints one
//! PASS/FAIL line per criterion; exits non-zero if any criterion fails.
//!
//! Pass a substring as the first free argument to run only matching
//! criteria, e.g. `cargo test --test acceptance -- overfit`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use clcc::config::Config;
use clcc::data::{generate_synthetic, Mask};
use clcc::evaluation::{compute_metrics, evaluate_model, MetricOptions};
use clcc::losses::{
    consistency_loss, contrastive_loss, ce_loss, dice_loss, LossWeights,
};
use clcc::model::{BackboneKind, ModelConfig, PredictionMap, ProjectedGrid, ProjectedVectors, SegModel};
use clcc::training::{self, run_training, Trainer};
use clcc::{ops, patching};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    run: Check,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn scalar(t: &Tensor) -> f64 {
    ops::scalar(t).unwrap()
}

fn grid_and_patches(g: &[f64], p: &[f64], b: usize, cells: usize, d: usize, side: usize) -> (ProjectedGrid, ProjectedVectors) {
    (
        ProjectedGrid {
            data: tensor(g, &[b, cells, d]),
            side,
        },
        ProjectedVectors(tensor(p, &[b * cells, d])),
    )
}

fn contrastive_equivalence() -> Result<String, String> {
    let (n, d, tau) = (4, 16, 0.1);
    let cells = n * n;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0f64;
    for _ in 0..50 {
        let b = rng.random_range(1..=3);
        let grid: Vec<Vec<f64>> = (0..b * cells).map(|_| random_unit(d, &mut rng)).collect();
        let patches: Vec<Vec<f64>> = (0..b * cells).map(|_| random_unit(d, &mut rng)).collect();
        let (g, p) = grid_and_patches(&grid.concat(), &patches.concat(), b, cells, d, n);
        let ours = scalar(&contrastive_loss(&g, &p, tau).map_err(|e| e.to_string())?);
        let oracle = (0..b)
            .map(|i| contrastive_oracle(&grid[i * cells..(i + 1) * cells], &patches[i * cells..(i + 1) * cells], tau))
            .sum::<f64>()
            / b as f64;
        worst = worst.max((ours - oracle).abs());
    }
    ensure(worst <= 1e-6, || format!("max abs difference {worst:.3e} > 1e-6"))?;
    Ok(format!("50 instances, max |loss - oracle| = {worst:.2e}"))
}

fn identity_case() -> Result<String, String> {
    let cells = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = random_unit(16, &mut rng);
    let all: Vec<f64> = (0..cells).flat_map(|_| v.clone()).collect();
    let (g, p) = grid_and_patches(&all, &all, 1, cells, 16, 4);
    let loss = scalar(&contrastive_loss(&g, &p, 0.1).map_err(|e| e.to_string())?);
    let expect = 16f64.ln();
    ensure((loss - expect).abs() <= 1e-6, || format!("loss {loss} vs ln 16 = {expect}"))?;
    Ok(format!("loss {loss:.6} vs ln 16 = {expect:.6}"))
}

const FD_STEP: f64 = 1e-4;
const FD_TRIALS: usize = 20;
/// Denominator floor of the elementwise relative error.
const REL_FLOOR: f64 = 1e-6;

/// Max relative error of autodiff vs central differences over `FD_TRIALS`
/// random inputs of length `len` for a scalar function of one tensor.
fn gradient_check(
    len: usize,
    seed: u64,
    f: impl Fn(&Tensor, &mut ChaCha8Rng) -> Tensor,
    setup: impl Fn(&mut ChaCha8Rng) -> u64,
) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..FD_TRIALS {
        let x = random_normal(len, &mut rng);
        let aux = setup(&mut rng);
        let var = Var::from_tensor(&tensor(&x, &[len])).map_err(|e| e.to_string())?;
        let loss = f(var.as_tensor(), &mut ChaCha8Rng::seed_from_u64(aux));
        let grads = loss.backward().map_err(|e| e.to_string())?;
        let analytic = grads
            .get(var.as_tensor())
            .ok_or("no gradient reached the input")?
            .to_vec1::<f64>()
            .map_err(|e| e.to_string())?;
        let numeric = finite_difference(&x, FD_STEP, |v| {
            scalar(&f(&tensor(v, &[len]), &mut ChaCha8Rng::seed_from_u64(aux)))
        });
        worst = worst.max(max_relative_error(&analytic, &numeric, REL_FLOOR));
    }
    Ok(worst)
}

fn random_mask(rng: &mut ChaCha8Rng, count: usize) -> Vec<f64> {
    let density = rng.random_range(0.1..0.9);
    (0..count).map(|_| f64::from(u8::from(rng.random_bool(density)))).collect()
}

fn gradient_checks() -> Result<String, String> {
    let (n, d) = (2usize, 4usize);
    let cells = n * n;
    let contrast = gradient_check(
        2 * cells * d,
        11,
        |x, _| {
            let g = ops::l2_normalize(&x.narrow(0, 0, cells * d).unwrap().reshape((1, cells, d)).unwrap()).unwrap();
            let p = ops::l2_normalize(&x.narrow(0, cells * d, cells * d).unwrap().reshape((cells, d)).unwrap()).unwrap();
            contrastive_loss(&ProjectedGrid { data: g, side: n }, &ProjectedVectors(p), 0.1).unwrap()
        },
        |_| 0,
    )?;
    let consist = gradient_check(
        2 * 2 * 8 * 8,
        12,
        |x, _| {
            let global = x.narrow(0, 0, 128).unwrap().reshape((1, 2, 8, 8)).unwrap();
            let patches = x.narrow(0, 128, 128).unwrap().reshape((4, 2, 4, 4)).unwrap();
            consistency_loss(&PredictionMap(global), &PredictionMap(patches), n).unwrap()
        },
        |_| 0,
    )?;
    let mask_of = |rng: &mut ChaCha8Rng| tensor(&random_mask(rng, 2 * 8 * 8), &[2, 8, 8]);
    let dice = gradient_check(
        2 * 2 * 8 * 8,
        13,
        |x, rng| dice_loss(&PredictionMap(x.reshape((2, 2, 8, 8)).unwrap()), &mask_of(rng)).unwrap(),
        |rng| rng.random(),
    )?;
    let ce = gradient_check(
        2 * 2 * 8 * 8,
        14,
        |x, rng| ce_loss(&PredictionMap(x.reshape((2, 2, 8, 8)).unwrap()), &mask_of(rng)).unwrap(),
        |rng| rng.random(),
    )?;
    let worst = contrast.max(consist).max(dice).max(ce);
    let detail = format!(
        "max rel err: contrastive {contrast:.2e}, consistency {consist:.2e}, dice {dice:.2e}, ce {ce:.2e}"
    );
    ensure(worst < 1e-3, || format!("{detail} (limit 1e-3)"))?;
    Ok(detail)
}

fn local_stub_equality() -> Result<String, String> {
    let cfg = ModelConfig {
        backbone: BackboneKind::Pointwise,
        embed_dim: 16,
        ..ModelConfig::desk()
    };
    let n = cfg.grid_side;
    let model = SegModel::new(cfg, 3, DType::F32).map_err(|e| e.to_string())?;
    let (mut emb, mut cons) = (0f64, 0f64);
    for i in 0..10 {
        let img = Tensor::rand(0f32, 1., (1, 3, 64, 64), &Device::Cpu).map_err(|e| e.to_string())?;
        let _ = i;
        let fm = model.backbone_forward(&img).unwrap();
        let grid = model.project_global(&fm, n).unwrap();
        let patches = patching::to_patch_batch(&img, n).unwrap();
        let fm_p = model.backbone_forward(&patches).unwrap();
        let pv = model.project_patch(&fm_p).unwrap();
        let diff = (grid.data.squeeze(0).unwrap() - &pv.0).unwrap().abs().unwrap();
        emb = emb.max(scalar(&diff.max_all().unwrap()));
        let loss = consistency_loss(&model.predict_head(&fm).unwrap(), &model.predict_head(&fm_p).unwrap(), n).unwrap();
        cons = cons.max(scalar(&loss));
    }
    ensure(emb <= 1e-5, || format!("embedding difference {emb:.2e} > 1e-5"))?;
    ensure(cons < 1e-10, || format!("consistency loss {cons:.2e} >= 1e-10"))?;
    Ok(format!("10 images, max embedding diff {emb:.2e}, max consistency {cons:.2e}"))
}

fn metrics_oracle_check() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut identity_worst = 0f64;
    for i in 0..200 {
        // every tenth instance has an empty prediction or truth
        let (dp, dt) = match i % 10 {
            0 => (0.0, rng.random_range(0.0..1.0)),
            5 => (rng.random_range(0.0..1.0), 0.0),
            _ => (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
        };
        let pred: Vec<Vec<bool>> = (0..8).map(|_| (0..8).map(|_| rng.random_bool(dp)).collect()).collect();
        let truth: Vec<Vec<bool>> = (0..8).map(|_| (0..8).map(|_| rng.random_bool(dt)).collect()).collect();
        let probs: Vec<f32> = pred.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let mask = Mask::new(8, 8, truth.iter().flatten().map(|&b| u8::from(b)).collect()).unwrap();
        let m = compute_metrics(&probs, &mask, MetricOptions::default()).map_err(|e| e.to_string())?;
        let (mae, dice, miou) = metrics_oracle(&pred, &truth);
        ensure((m.mae, m.dice_fg, m.miou) == (mae, dice, miou), || {
            format!("instance {i}: {m:?} vs oracle ({mae}, {dice}, {miou})")
        })?;
        let c = count_pixels(&pred, &truth);
        let den = c.tp + c.fp + c.fn_;
        let iou = if den == 0 { 1.0 } else { c.tp as f64 / den as f64 };
        let gap = (m.dice_fg / 100.0 - 2.0 * iou / (1.0 + iou)).abs();
        identity_worst = identity_worst.max(gap);
        ensure(gap < 1e-12, || format!("instance {i}: Dice/IoU identity off by {gap:.2e}"))?;
    }
    Ok(format!("200 instances exact; Dice = 2 IoU / (1 + IoU) within {identity_worst:.1e}"))
}

fn tiling_round_trip() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut count = 0;
    for n in [2usize, 4, 5] {
        for _ in 0..20 {
            let (h, w) = (n * rng.random_range(1..=12), n * rng.random_range(1..=12));
            let values: Vec<f32> = (0..3 * h * w).map(|_| rng.random()).collect();
            let img = Tensor::from_vec(values.clone(), (3, h, w), &Device::Cpu).unwrap();
            let set = patching::decompose_image(&img, n).map_err(|e| e.to_string())?;
            let back = set.reassemble().map_err(|e| e.to_string())?;
            let back = back.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            ensure(back == values, || format!("round trip differs for {h}x{w}, n = {n}"))?;
            count += 1;
        }
    }
    Ok(format!("{count} images (20 per n in {{2, 4, 5}}) bit-exact"))
}

fn overfit_smoke() -> Result<String, String> {
    let samples = generate_synthetic(41, 20, 64).map_err(|e| e.to_string())?;
    let mut cfg = Config::desk();
    cfg.train.labeled_per_batch = 4;
    cfg.train.unlabeled_per_batch = 0;
    let mut trainer = Trainer::new(cfg, samples.len(), 0).map_err(|e| e.to_string())?;
    let weights = LossWeights::new(0.0, 0.0, 0.1).unwrap();
    let mut last = f64::NAN;
    for _ in 0..200 {
        let batch = trainer.next_batch(&samples, &[]).map_err(|e| e.to_string())?;
        last = trainer
            .train_step(&batch, &weights, Default::default())
            .map_err(|e| e.to_string())?
            .total;
    }
    let report = evaluate_model(trainer.model(), &samples, MetricOptions::default()).map_err(|e| e.to_string())?;
    let detail = format!("train Dice {:.2} after 200 steps (final loss {last:.4})", report.dice_fg);
    ensure(report.dice_fg > 90.0, || format!("{detail}; needs > 90"))?;
    Ok(detail)
}

fn semi_config(seed: u64, baseline: bool) -> Config {
    let mut c = Config::desk();
    c.data.synthetic_count = 167;
    c.data.synthetic_seed = 7;
    c.data.labeled_fraction = 0.1;
    c.data.labeled_seed = seed;
    c.train.seed = seed;
    c.train.total_epochs = 30;
    c.train.stage1_epochs = 10;
    if baseline {
        c.loss.alpha = 0.0;
        c.loss.beta = 0.0;
    }
    c
}

fn check_schedule(log: &[training::EpochLog], cfg: &Config) -> Result<(), String> {
    ensure(log.len() == cfg.train.total_epochs, || {
        format!("log has {} epochs, expected {}", log.len(), cfg.train.total_epochs)
    })?;
    for (e, r) in log.iter().enumerate() {
        let expect = if e < cfg.train.stage1_epochs { (1.0, 0.0) } else { (0.0, 1.0) };
        ensure(r.epoch == e && (r.alpha, r.beta) == expect, || {
            format!("epoch {e}: logged (alpha, beta) = ({}, {}), expected {expect:?}", r.alpha, r.beta)
        })?;
    }
    Ok(())
}

fn train_and_test(cfg: &Config, dir: &Path) -> Result<(f64, Vec<training::EpochLog>), String> {
    let splits = training::load_splits(&cfg.data).map_err(|e| e.to_string())?;
    ensure(
        (splits.train_labeled.len(), splits.train_unlabeled.len()) == (10, 90),
        || format!("split sizes {} / {}", splits.train_labeled.len(), splits.train_unlabeled.len()),
    )?;
    let outcome = run_training(cfg, &splits, dir, false).map_err(|e| e.to_string())?;
    let model = clcc::checkpoint::Checkpoint::load(&outcome.best_checkpoint)
        .and_then(|c| c.to_model())
        .map_err(|e| e.to_string())?;
    let report = evaluate_model(&model, &splits.test, cfg.eval).map_err(|e| e.to_string())?;
    Ok((report.dice_fg, outcome.log))
}

fn semi_supervised_benefit() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (mut base, mut full) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let cfg = semi_config(seed, true);
        let (d, _) = train_and_test(&cfg, &tmp.path().join(format!("base{seed}")))?;
        base.push(d);
        let cfg = semi_config(seed, false);
        let (d, log) = train_and_test(&cfg, &tmp.path().join(format!("full{seed}")))?;
        check_schedule(&log, &cfg)?;
        full.push(d);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mb, mf) = (mean(&base), mean(&full));
    let fmt = |v: &[f64]| v.iter().map(|d| format!("{d:.2}")).collect::<Vec<_>>().join(", ");
    let detail = format!(
        "test Dice baseline [{}] mean {mb:.2}; full [{}] mean {mf:.2}",
        fmt(&base),
        fmt(&full)
    );
    ensure(mf >= mb, || format!("{detail}; full mean below baseline"))?;
    Ok(detail)
}

fn schedule_conformance() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = Config::desk();
    cfg.data.image_side = 32;
    cfg.data.synthetic_count = 30;
    cfg.data.labeled_fraction = 0.5;
    cfg.train.total_epochs = 6;
    cfg.train.stage1_epochs = 2;
    let splits = training::load_splits(&cfg.data).map_err(|e| e.to_string())?;
    run_training(&cfg, &splits, tmp.path(), false).map_err(|e| e.to_string())?;
    let log = training::read_log(&tmp.path().join(training::LOG_FILE)).map_err(|e| e.to_string())?;
    check_schedule(&log, &cfg)?;
    Ok(format!(
        "log shows (1, 0) for epochs 0..{} then (0, 1) through epoch {}",
        cfg.train.stage1_epochs,
        cfg.train.total_epochs - 1
    ))
}

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria = [
        Criterion { name: "contrastive oracle equivalence", limit: Some(Duration::from_secs(5)), run: contrastive_equivalence },
        Criterion { name: "identity case ln 16", limit: None, run: identity_case },
        Criterion { name: "gradient checks", limit: Some(Duration::from_secs(60)), run: gradient_checks },
        Criterion { name: "local-stub cross-level equality", limit: Some(Duration::from_secs(10)), run: local_stub_equality },
        Criterion { name: "metrics oracle", limit: None, run: metrics_oracle_check },
        Criterion { name: "tiling round trip", limit: None, run: tiling_round_trip },
        Criterion { name: "overfit smoke", limit: Some(Duration::from_secs(300)), run: overfit_smoke },
        Criterion { name: "schedule conformance", limit: None, run: schedule_conformance },
        Criterion { name: "semi-supervised benefit", limit: Some(Duration::from_secs(3600)), run: semi_supervised_benefit },
    ];
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if filter.as_deref().is_some_and(|f| !c.name.contains(f)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match (result, c.limit) {
            (Ok(d), Some(limit)) if elapsed > limit => Err(format!("{d}; took {elapsed:.1?}, limit {limit:?}")),
            (r, _) => r,
        };
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:<34} {detail} [{:.1}s]", c.name, elapsed.as_secs_f64());
    }
    println!(
        "not run: full Kvasir-SEG protocol (needs the external dataset; see README for the command)"
    );
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
