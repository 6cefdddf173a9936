//! Two-stage training: batch composition, loss scheduling, optimizer steps,
//! per-epoch validation, checkpoints and the epoch log.
//!
//! Run directory layout:
//!
//! ```text
//! <run_dir>/log.jsonl               one EpochLog per line
//! <run_dir>/ckpt_best.safetensors   best validation foreground Dice
//! <run_dir>/ckpt_last.safetensors   weights, optimizer moments, TrainState
//! ```

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Config, DataConfig, LossConfig, TrainConfig};
use crate::data::{self, Sample, SplitManifest, Splits};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, MetricsReport};
use crate::losses::{self, LossWeights};
use crate::model::SegModel;
use crate::optim::{grad_norm, AdamW};
use crate::ops;
use crate::patching;

pub const LOG_FILE: &str = "log.jsonl";
pub const BEST_CHECKPOINT: &str = "ckpt_best.safetensors";
pub const LAST_CHECKPOINT: &str = "ckpt_last.safetensors";

/// `(alpha, beta)` for `epoch`: the contrastive weight during the first
/// `stage1_epochs`, the consistency weight afterwards.
pub fn loss_schedule(epoch: usize, train: &TrainConfig, loss: &LossConfig) -> Result<(f64, f64)> {
    if epoch >= train.total_epochs {
        return Err(Error::IndexOutOfRange {
            index: epoch,
            len: train.total_epochs,
        });
    }
    Ok(if epoch < train.stage1_epochs {
        (loss.alpha, 0.0)
    } else {
        (0.0, loss.beta)
    })
}

/// 1 or 2.
pub fn stage_of(epoch: usize, train: &TrainConfig) -> u8 {
    if epoch < train.stage1_epochs {
        1
    } else {
        2
    }
}

/// Endless without-replacement draws from `0..len`, reshuffled after each
/// full cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclingSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl CyclingSampler {
    pub fn new(len: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn next_index(&mut self) -> Option<usize> {
        if self.order.is_empty() {
            return None;
        }
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        Some(self.order[self.pos - 1])
    }

    pub fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k).map_while(|_| self.next_index()).collect()
    }
}

/// Samplers over the labeled and unlabeled pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSampler {
    pub labeled: CyclingSampler,
    pub unlabeled: CyclingSampler,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
}

impl BatchSampler {
    pub fn new(labeled_len: usize, unlabeled_len: usize, train: &TrainConfig) -> Self {
        Self {
            labeled: CyclingSampler::new(labeled_len, train.seed, 1),
            unlabeled: CyclingSampler::new(unlabeled_len, train.seed, 2),
            labeled_per_batch: train.labeled_per_batch,
            unlabeled_per_batch: train.unlabeled_per_batch,
        }
    }

    /// Steps in one epoch: one pass over the larger pool (in batches).
    pub fn steps_per_epoch(&self) -> usize {
        let per = |len: usize, k: usize| if k == 0 { 0 } else { len.div_ceil(k) };
        per(self.labeled.len(), self.labeled_per_batch)
            .max(per(self.unlabeled.len(), self.unlabeled_per_batch))
            .max(1)
    }
}

/// One optimisation batch. Tensors are `None` when the side is empty.
#[derive(Debug, Clone)]
pub struct Batch {
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    /// `[L, 3, H, W]`
    pub labeled: Option<Tensor>,
    /// `[L, H, W]`
    pub masks: Option<Tensor>,
    /// `[U, 3, H, W]`
    pub unlabeled: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labeled_ids.len() + self.unlabeled_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<&str> {
        self.labeled_ids.iter().chain(&self.unlabeled_ids).map(String::as_str).collect()
    }

    /// Build a batch from explicit samples; every labeled one needs a mask.
    pub fn from_samples(labeled: &[Sample], unlabeled: &[Sample]) -> Result<Self> {
        let ids = |v: &[Sample]| v.iter().map(|s| s.id.clone()).collect();
        let images = |v: &[Sample]| -> Result<Option<Tensor>> {
            if v.is_empty() {
                Ok(None)
            } else {
                data::stack_images(v.iter().map(|s| &s.image)).map(Some)
            }
        };
        let masks = if labeled.is_empty() {
            None
        } else {
            let m = labeled.iter().map(Sample::require_mask).collect::<Result<Vec<_>>>()?;
            Some(data::stack_masks(m)?)
        };
        Ok(Self {
            labeled_ids: ids(labeled),
            unlabeled_ids: ids(unlabeled),
            labeled: images(labeled)?,
            masks,
            unlabeled: images(unlabeled)?,
        })
    }
}

/// Draw the next batch: `labeled_per_batch` labeled and
/// `unlabeled_per_batch` unlabeled samples, with optional random flips.
pub fn compose_batch(
    labeled_pool: &[Sample],
    unlabeled_pool: &[Sample],
    sampler: &mut BatchSampler,
    augment: Option<&mut ChaCha8Rng>,
) -> Result<Batch> {
    if labeled_pool.len() != sampler.labeled.len() || unlabeled_pool.len() != sampler.unlabeled.len() {
        return Err(Error::CountMismatch {
            what: "pool samples for the sampler",
            expected: sampler.labeled.len() + sampler.unlabeled.len(),
            actual: labeled_pool.len() + unlabeled_pool.len(),
        });
    }
    if sampler.labeled_per_batch > 0 && labeled_pool.is_empty() {
        return Err(Error::EmptyPartition("train_labeled"));
    }
    let pick = |pool: &[Sample], idx: Vec<usize>| -> Vec<Sample> { idx.into_iter().map(|i| pool[i].clone()).collect() };
    let mut lab = pick(labeled_pool, sampler.labeled.take(sampler.labeled_per_batch));
    let mut unl = pick(unlabeled_pool, sampler.unlabeled.take(sampler.unlabeled_per_batch));
    if let Some(rng) = augment {
        for s in lab.iter_mut().chain(unl.iter_mut()) {
            data::augment(s, rng);
        }
    }
    Batch::from_samples(&lab, &unl)
}

/// Loss scalars of one step; `None` marks a skipped term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub sup: Option<f64>,
    pub contrast: Option<f64>,
    pub consist: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

/// Options of the loss computation that are not weights.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepOptions {
    pub negatives: Option<usize>,
}

/// Per-epoch log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: u8,
    pub alpha: f64,
    pub beta: f64,
    pub steps: usize,
    pub sup: Option<f64>,
    pub contrast: Option<f64>,
    pub consist: Option<f64>,
    pub total: f64,
    pub val_mae: f64,
    pub val_dice: f64,
    pub val_miou: f64,
    pub seconds: f64,
}

/// Everything besides weights and moments needed to resume exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub step: usize,
    pub best_val_dice: Option<f64>,
    pub best_epoch: Option<usize>,
    pub rng: ChaCha8Rng,
    pub sampler: BatchSampler,
}

/// Model, optimizer and mutable training state.
pub struct Trainer {
    model: SegModel,
    optimizer: AdamW,
    config: Config,
    state: TrainState,
}

fn fmt_term(v: Option<f64>) -> String {
    v.map_or("skipped".to_string(), |x| format!("{x:.6}"))
}

impl Trainer {
    pub fn new(config: Config, labeled_len: usize, unlabeled_len: usize) -> Result<Self> {
        config.validate()?;
        let model = SegModel::new(config.model.clone(), config.train.seed, DType::F32)?;
        let optimizer = AdamW::new(config.train.optimizer(), model.params())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(3);
        let state = TrainState {
            epoch: 0,
            step: 0,
            best_val_dice: None,
            best_epoch: None,
            rng,
            sampler: BatchSampler::new(labeled_len, unlabeled_len, &config.train),
        };
        Ok(Self {
            model,
            optimizer,
            config,
            state,
        })
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    pub fn next_batch(&mut self, labeled: &[Sample], unlabeled: &[Sample]) -> Result<Batch> {
        let augment = self.config.data.augment.then_some(&mut self.state.rng);
        compose_batch(labeled, unlabeled, &mut self.state.sampler, augment)
    }

    /// Loss terms for `batch` without updating anything. Zero-weight
    /// unsupervised terms are not computed at all.
    pub fn losses(
        &mut self,
        batch: &Batch,
        weights: &LossWeights,
        opts: StepOptions,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        weights.validate()?;
        let model = &self.model;
        let unsup = weights.alpha > 0.0 || weights.beta > 0.0;
        let mut parts = Vec::new();
        parts.extend(batch.labeled.iter().cloned());
        if unsup {
            parts.extend(batch.unlabeled.iter().cloned());
        }
        if parts.is_empty() {
            return Err(Error::InvalidValue(
                "batch has no images contributing to an active loss".into(),
            ));
        }
        let images = Tensor::cat(&parts, 0)?;
        let fm = model.backbone_forward(&images)?;
        let pred = model.predict_head(&fm)?;

        let n_lab = batch.labeled_ids.len();
        let sup = match (&batch.masks, n_lab) {
            (Some(masks), l) if l > 0 => {
                let lp = crate::model::PredictionMap(pred.0.narrow(0, 0, l)?);
                Some(losses::supervised_loss(&lp, masks)?)
            }
            _ => None,
        };
        let (mut contrast, mut consist) = (None, None);
        if unsup {
            let n = model.config().grid_side;
            let patches = patching::to_patch_batch(&images.to_dtype(model.dtype())?, n)?;
            let fm_p = model.backbone_forward(&patches)?;
            if weights.alpha > 0.0 {
                let grid = model.project_global(&fm, n)?;
                let pv = model.project_patch(&fm_p)?;
                contrast = Some(match opts.negatives {
                    Some(k) => losses::contrastive_loss_sampled(&grid, &pv, weights.tau, k, &mut self.state.rng)?,
                    None => losses::contrastive_loss(&grid, &pv, weights.tau)?,
                });
            }
            if weights.beta > 0.0 {
                let pred_p = model.predict_head(&fm_p)?;
                consist = Some(losses::consistency_loss(&pred, &pred_p, n)?);
            }
        }
        Ok((sup, contrast, consist))
    }

    /// Forward, backward and one optimizer update.
    pub fn train_step(&mut self, batch: &Batch, weights: &LossWeights, opts: StepOptions) -> Result<StepLog> {
        let (sup, contrast, consist) = self.losses(batch, weights, opts)?;
        let value = |t: &Option<Tensor>| t.as_ref().map(ops::scalar).transpose();
        let (s, c, k) = (value(&sup)?, value(&contrast)?, value(&consist)?);
        let diverged = |detail: String, state: &TrainState| Error::Diverged {
            epoch: state.epoch,
            step: state.step,
            detail: format!("{detail}; batch ids [{}]", batch.ids().join(", ")),
        };
        let total = match losses::total_loss(sup.as_ref(), contrast.as_ref(), consist.as_ref(), weights) {
            Ok(t) => t,
            Err(Error::NonFiniteTerm { term, value }) => {
                return Err(diverged(
                    format!(
                        "{term} loss is {value} (sup {}, contrast {}, consist {}); grad-norm not computed",
                        fmt_term(s),
                        fmt_term(c),
                        fmt_term(k)
                    ),
                    &self.state,
                ))
            }
            Err(e) => return Err(e),
        };
        let total_v = ops::scalar(&total)?;
        let grads = total.backward()?;
        let gn = grad_norm(self.model.params(), &grads)?;
        if !total_v.is_finite() || !gn.is_finite() {
            return Err(diverged(
                format!(
                    "total {total_v}, grad-norm {gn} (sup {}, contrast {}, consist {})",
                    fmt_term(s),
                    fmt_term(c),
                    fmt_term(k)
                ),
                &self.state,
            ));
        }
        self.optimizer.step(self.model.params(), &grads)?;
        self.state.step += 1;
        Ok(StepLog {
            sup: s,
            contrast: c,
            consist: k,
            total: total_v,
            grad_norm: gn,
        })
    }

    /// Weights for the current epoch per the two-stage schedule.
    pub fn current_weights(&self) -> Result<LossWeights> {
        let (alpha, beta) = loss_schedule(self.state.epoch, &self.config.train, &self.config.loss)?;
        LossWeights::new(alpha, beta, self.config.loss.tau)
    }

    /// Run all steps of the current epoch and return mean losses.
    pub fn run_epoch(&mut self, labeled: &[Sample], unlabeled: &[Sample]) -> Result<EpochLog> {
        let start = Instant::now();
        let weights = self.current_weights()?;
        let opts = StepOptions {
            negatives: self.config.loss.negatives,
        };
        let steps = self.state.sampler.steps_per_epoch();
        let mut sums = [0.0f64; 4];
        let mut seen = [false; 3];
        for _ in 0..steps {
            let batch = self.next_batch(labeled, unlabeled)?;
            let log = self.train_step(&batch, &weights, opts)?;
            for (i, v) in [log.sup, log.contrast, log.consist].into_iter().enumerate() {
                if let Some(v) = v {
                    sums[i] += v;
                    seen[i] = true;
                }
            }
            sums[3] += log.total;
        }
        let mean = |i: usize| seen[i].then(|| sums[i] / steps as f64);
        let epoch = self.state.epoch;
        Ok(EpochLog {
            epoch,
            stage: stage_of(epoch, &self.config.train),
            alpha: weights.alpha,
            beta: weights.beta,
            steps,
            sup: mean(0),
            contrast: mean(1),
            consist: mean(2),
            total: sums[3] / steps as f64,
            val_mae: f64::NAN,
            val_dice: f64::NAN,
            val_miou: f64::NAN,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Load weights from `best` (if given) and zero the optimizer moments.
    pub fn begin_stage2(&mut self, best: Option<&Checkpoint>) -> Result<()> {
        if let Some(ck) = best {
            self.model.params().load(&ck.params)?;
        }
        self.optimizer.reset(self.model.params())
    }

    /// Checkpoint with weights, moments and the serialized training state.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::of_model(&self.model)?;
        ck.optimizer = Some(self.optimizer.state().clone());
        ck.train_state = Some(serde_json::to_value(&self.state)?);
        Ok(ck)
    }

    /// Restore from a checkpoint written by [`Trainer::checkpoint`].
    pub fn restore(&mut self, ck: Checkpoint) -> Result<()> {
        if ck.model_config != self.config.model {
            return Err(Error::Checkpoint("model config differs from the run config".into()));
        }
        self.model.params().load(&ck.params)?;
        let opt = ck
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        self.optimizer.load_state(self.model.params(), opt)?;
        let state = ck
            .train_state
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?;
        let state: TrainState = serde_json::from_value(state)?;
        if state.sampler.labeled.len() != self.state.sampler.labeled.len()
            || state.sampler.unlabeled.len() != self.state.sampler.unlabeled.len()
        {
            return Err(Error::Checkpoint("pool sizes differ from the checkpointed run".into()));
        }
        self.state = state;
        Ok(())
    }
}

/// Outcome of [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub best_val_dice: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::file(path, e)))
        .collect()
}

fn write_log(path: &Path, records: &[EpochLog]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::file(path, e))
}

fn append_log(path: &Path, record: &EpochLog) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::file(path, e))?;
    writeln!(f, "{}", serde_json::to_string(record)?).map_err(|e| Error::file(path, e))
}

fn check_sizes(config: &Config, parts: &[&[Sample]]) -> Result<()> {
    for s in parts.iter().flat_map(|p| p.iter()) {
        if (s.image.height, s.image.width) != (config.data.image_side, config.data.image_side) {
            return Err(Error::InvalidValue(format!(
                "sample `{}` is {}x{}, expected {side}x{side}; resize first",
                s.id,
                s.image.height,
                s.image.width,
                side = config.data.image_side
            )));
        }
    }
    Ok(())
}

/// Full two-stage run over `splits`, writing artifacts into `run_dir`.
///
/// With `resume`, training continues from `ckpt_last` and the log is cut
/// back to the epochs it covers.
pub fn run_training(config: &Config, splits: &Splits, run_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    config.validate()?;
    if splits.val.is_empty() {
        return Err(Error::EmptyPartition("val"));
    }
    if config.train.unlabeled_per_batch > 0 && splits.train_unlabeled.is_empty() && config.data.labeled_fraction < 1.0 {
        return Err(Error::EmptyPartition("train_unlabeled"));
    }
    check_sizes(config, &[&splits.train_labeled, &splits.train_unlabeled, &splits.val])?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::file(run_dir, e))?;
    let log_path = run_dir.join(LOG_FILE);
    let best_path = run_dir.join(BEST_CHECKPOINT);
    let last_path = run_dir.join(LAST_CHECKPOINT);

    let mut trainer = Trainer::new(
        config.clone(),
        splits.train_labeled.len(),
        splits.train_unlabeled.len(),
    )?;
    let mut log = Vec::new();
    if resume {
        trainer.restore(Checkpoint::load(&last_path)?)?;
        let next = trainer.state().epoch;
        if log_path.exists() {
            log = read_log(&log_path)?;
        }
        log.retain(|r| r.epoch < next);
        write_log(&log_path, &log)?;
        log::info!("resuming at epoch {next}");
    } else {
        write_log(&log_path, &[])?;
    }

    let train = &config.train;
    while trainer.state().epoch < train.total_epochs {
        let epoch = trainer.state().epoch;
        if epoch == train.stage1_epochs && epoch > 0 {
            let best = Checkpoint::load(&best_path)?;
            trainer.begin_stage2(Some(&best))?;
            log::info!("stage 2 starts from the stage-1 best checkpoint");
        }
        let mut record = trainer.run_epoch(&splits.train_labeled, &splits.train_unlabeled)?;
        let report: MetricsReport = evaluate_model(trainer.model(), &splits.val, config.eval)?;
        record.val_mae = report.mae;
        record.val_dice = report.dice_fg;
        record.val_miou = report.miou;
        log::info!(
            "epoch {epoch} stage {} a={} b={} sup {} contrast {} consist {} | val dice {:.2} miou {:.2} mae {:.2} ({:.1}s)",
            record.stage,
            record.alpha,
            record.beta,
            fmt_term(record.sup),
            fmt_term(record.contrast),
            fmt_term(record.consist),
            record.val_dice,
            record.val_miou,
            record.val_mae,
            record.seconds
        );

        trainer.state.epoch += 1;
        if trainer.state.best_val_dice.is_none_or(|b| report.dice_fg > b) {
            trainer.state.best_val_dice = Some(report.dice_fg);
            trainer.state.best_epoch = Some(epoch);
            Checkpoint::of_model(trainer.model())?.save(&best_path)?;
        }
        append_log(&log_path, &record)?;
        trainer.checkpoint()?.save(&last_path)?;
        log.push(record);
    }
    let state = trainer.state();
    Ok(TrainOutcome {
        best_checkpoint: best_path,
        best_val_dice: state.best_val_dice.unwrap_or(f64::NAN),
        best_epoch: state.best_epoch.unwrap_or(0),
        log,
    })
}

/// Load (or synthesise) the dataset, resize it and split it per `cfg`.
pub fn load_splits(cfg: &DataConfig) -> Result<Splits> {
    let raw = match &cfg.root {
        Some(root) => data::load_dataset(root)?,
        None => data::generate_synthetic(cfg.synthetic_seed, cfg.synthetic_count, cfg.image_side)?,
    };
    let samples = raw
        .iter()
        .map(|s| data::resize_sample(s, cfg.image_side))
        .collect::<Result<Vec<_>>>()?;
    match &cfg.manifest {
        Some(path) => Splits::from_manifest(samples, &SplitManifest::read(path)?, cfg.split_spec()),
        None => data::make_splits(samples, &cfg.split_spec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn train_cfg(total: usize, stage1: usize) -> TrainConfig {
        TrainConfig {
            total_epochs: total,
            stage1_epochs: stage1,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_examples() {
        let t = TrainConfig::default();
        let l = LossConfig::default();
        assert_eq!(loss_schedule(0, &t, &l).unwrap(), (1.0, 0.0));
        assert_eq!(loss_schedule(99, &t, &l).unwrap(), (1.0, 0.0));
        assert_eq!(loss_schedule(100, &t, &l).unwrap(), (0.0, 1.0));
        assert_eq!(loss_schedule(299, &t, &l).unwrap(), (0.0, 1.0));
        assert!(loss_schedule(300, &t, &l).is_err());
    }

    #[test]
    fn schedule_ablation_plans() {
        let l = LossConfig::default();
        let no_consist = train_cfg(5, 5);
        let no_contrast = train_cfg(5, 0);
        for e in 0..5 {
            assert_eq!(loss_schedule(e, &no_consist, &l).unwrap().1, 0.0);
            assert_eq!(loss_schedule(e, &no_contrast, &l).unwrap().0, 0.0);
        }
    }

    #[test]
    fn sampler_cycles_without_repeats() {
        let mut s = CyclingSampler::new(7, 1, 0);
        for _ in 0..3 {
            let cycle: BTreeSet<usize> = s.take(7).into_iter().collect();
            assert_eq!(cycle.len(), 7);
        }
        assert_eq!(CyclingSampler::new(5, 9, 1).take(12), CyclingSampler::new(5, 9, 1).take(12));
        assert!(CyclingSampler::new(0, 0, 0).take(3).is_empty());
    }

    #[test]
    fn steps_per_epoch_follow_larger_pool() {
        let t = TrainConfig::default();
        assert_eq!(BatchSampler::new(10, 90, &t).steps_per_epoch(), 23);
        assert_eq!(BatchSampler::new(20, 0, &t).steps_per_epoch(), 5);
        assert_eq!(BatchSampler::new(120, 480, &t).steps_per_epoch(), 120);
    }

    fn pools() -> (Vec<Sample>, Vec<Sample>) {
        let mut all = data::generate_synthetic(1, 12, 32).unwrap();
        let unl = all.split_off(4);
        (all, unl)
    }

    #[test]
    fn default_batch_has_four_masks() {
        let (lab, unl) = pools();
        let mut sampler = BatchSampler::new(lab.len(), unl.len(), &TrainConfig::default());
        let b = compose_batch(&lab, &unl, &mut sampler, None).unwrap();
        assert_eq!(b.len(), 8);
        assert_eq!(b.masks.unwrap().dims(), [4, 32, 32]);
        assert_eq!(b.unlabeled.unwrap().dims(), [4, 3, 32, 32]);
    }

    #[test]
    fn empty_labeled_pool_rejected() {
        let (_, unl) = pools();
        let mut sampler = BatchSampler::new(0, unl.len(), &TrainConfig::default());
        assert!(matches!(
            compose_batch(&[], &unl, &mut sampler, None),
            Err(Error::EmptyPartition(_))
        ));
    }

    fn small_config() -> Config {
        let mut c = Config::desk();
        c.data.image_side = 32;
        c.model.depth = 2;
        c.train = train_cfg(2, 1);
        c
    }

    #[test]
    fn gating_skips_zero_weight_terms() {
        let (lab, unl) = pools();
        let mut t = Trainer::new(small_config(), lab.len(), unl.len()).unwrap();
        let b = t.next_batch(&lab, &unl).unwrap();
        let log = t.train_step(&b, &LossWeights::new(1.0, 0.0, 0.1).unwrap(), StepOptions::default()).unwrap();
        assert!(log.consist.is_none());
        assert!(log.contrast.unwrap().is_finite());
        let log = t.train_step(&b, &LossWeights::new(0.0, 1.0, 0.1).unwrap(), StepOptions::default()).unwrap();
        assert!(log.contrast.is_none() && log.consist.is_some());
        let log = t.train_step(&b, &LossWeights::new(0.0, 0.0, 0.1).unwrap(), StepOptions::default()).unwrap();
        assert!(log.contrast.is_none() && log.consist.is_none());
        assert_eq!(t.state().step, 3);
    }

    #[test]
    fn unlabeled_only_batch_has_no_supervised_term() {
        let (_, unl) = pools();
        let mut t = Trainer::new(small_config(), 0, unl.len()).unwrap();
        let b = Batch::from_samples(&[], &unl[..2]).unwrap();
        let log = t.train_step(&b, &LossWeights::new(1.0, 0.0, 0.1).unwrap(), StepOptions::default()).unwrap();
        assert!(log.sup.is_none());
        assert_eq!(Some(log.total), log.contrast);
    }

    #[test]
    fn supervised_loss_ignores_unlabeled_images() {
        let (lab, unl) = pools();
        let mut t = Trainer::new(small_config(), lab.len(), unl.len()).unwrap();
        let w = LossWeights::new(1.0, 1.0, 0.1).unwrap();
        let b = Batch::from_samples(&lab[..2], &unl[..2]).unwrap();
        let mut zeroed = b.clone();
        zeroed.unlabeled = Some(b.unlabeled.as_ref().unwrap().zeros_like().unwrap());
        let s1 = ops::scalar(&t.losses(&b, &w, StepOptions::default()).unwrap().0.unwrap()).unwrap();
        let s2 = ops::scalar(&t.losses(&zeroed, &w, StepOptions::default()).unwrap().0.unwrap()).unwrap();
        assert_eq!(s1, s2);
    }
}
