//! MAE / foreground Dice / mIoU, per-split reports and multi-run aggregation.
//!
//! All metrics are percentages. Prediction binarisation uses `p > 0.5`, so a
//! probability of exactly one half counts as background. A class absent from
//! both prediction and ground truth scores a perfect overlap.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{stack_images, Mask, Sample};
use crate::error::{Error, Result};
use crate::model::SegModel;

/// Foreground decision threshold on the predicted probability.
pub const THRESHOLD: f32 = 0.5;

const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub dice_fg: f64,
    pub miou: f64,
}

/// Metric options.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    /// Compute MAE on the binarised prediction instead of the probability.
    pub binarized_mae: bool,
}

fn overlap_ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(prob_fg: &[f32], mask: &Mask, opts: MetricOptions) -> Result<Metrics> {
    if prob_fg.len() != mask.data.len() {
        return Err(Error::ShapeMismatch {
            context: "probability map vs mask",
            left: vec![prob_fg.len()],
            right: vec![mask.height, mask.width],
        });
    }
    if let Some(p) = prob_fg.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidValue(format!("probability {p} outside [0, 1]")));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    let mut abs_err = 0.0f64;
    for (&p, &y) in prob_fg.iter().zip(&mask.data) {
        let b = p > THRESHOLD;
        let fg = y == 1;
        match (b, fg) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
        let pred = if opts.binarized_mae {
            f64::from(u8::from(b))
        } else {
            p as f64
        };
        abs_err += (pred - y as f64).abs();
    }
    let n = prob_fg.len().max(1) as f64;
    let dice = overlap_ratio(2 * tp, 2 * tp + fp + fn_);
    let iou_fg = overlap_ratio(tp, tp + fp + fn_);
    let iou_bg = overlap_ratio(tn, tn + fp + fn_);
    Ok(Metrics {
        mae: 100.0 * abs_err / n,
        dice_fg: 100.0 * dice,
        miou: 100.0 * 0.5 * (iou_fg + iou_bg),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub dice_fg: f64,
    pub miou: f64,
    pub n_samples: usize,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricsReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::EmptyPartition("evaluation"));
        }
        let n = per_sample.len() as f64;
        let mean = |f: fn(&Metrics) -> f64| per_sample.iter().map(|s| f(&s.metrics)).sum::<f64>() / n;
        Ok(Self {
            mae: mean(|m| m.mae),
            dice_fg: mean(|m| m.dice_fg),
            miou: mean(|m| m.miou),
            n_samples: per_sample.len(),
            per_sample,
        })
    }

    pub fn summary(&self) -> Metrics {
        Metrics {
            mae: self.mae,
            dice_fg: self.dice_fg,
            miou: self.miou,
        }
    }

    /// Write `<stem>.json` (per-sample rows plus aggregate) and a plain-text
    /// table `<stem>.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| Error::file(&json, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, self.to_string()).map_err(|e| Error::file(&txt, e))?;
        Ok(())
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>8} {:>8} {:>8}", "id", "MAE", "Dice", "mIoU")?;
        for s in &self.per_sample {
            let m = &s.metrics;
            writeln!(f, "{:<24} {:>8.2} {:>8.2} {:>8.2}", s.id, m.mae, m.dice_fg, m.miou)?;
        }
        writeln!(
            f,
            "{:<24} {:>8.2} {:>8.2} {:>8.2}",
            format!("mean (n={})", self.n_samples),
            self.mae,
            self.dice_fg,
            self.miou
        )
    }
}

/// Evaluate `model` on labelled `samples` (already at the model's input size).
pub fn evaluate_model(model: &SegModel, samples: &[Sample], opts: MetricOptions) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptyPartition("evaluation"));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images = stack_images(chunk.iter().map(|s| &s.image))?;
        let probs = model
            .predict_foreground(&images)?
            .to_dtype(candle_core::DType::F32)?;
        for (i, s) in chunk.iter().enumerate() {
            let p = probs.get(i)?.flatten_all()?.to_vec1::<f32>()?;
            let metrics = compute_metrics(&p, s.require_mask()?, opts)?;
            per_sample.push(SampleMetrics {
                id: s.id.clone(),
                metrics,
            });
        }
    }
    MetricsReport::from_samples(per_sample)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (`N - 1` denominator).
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::CountMismatch {
                what: "runs (at least)",
                expected: 2,
                actual: values.len(),
            });
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Self {
            mean,
            std: var.sqrt(),
        })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub mae: MeanStd,
    pub dice_fg: MeanStd,
    pub miou: MeanStd,
    pub runs: Vec<Metrics>,
}

pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<RunAggregate> {
    let runs: Vec<Metrics> = reports.iter().map(MetricsReport::summary).collect();
    let col = |f: fn(&Metrics) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    Ok(RunAggregate {
        mae: MeanStd::of(&col(|m| m.mae))?,
        dice_fg: MeanStd::of(&col(|m| m.dice_fg))?,
        miou: MeanStd::of(&col(|m| m.miou))?,
        runs,
    })
}

/// Method-by-metric comparison table, one `mean ± std` cell per metric.
pub fn comparison_table(rows: &[(String, RunAggregate)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut out = format!(
        "{:<width$} | {:>15} | {:>15} | {:>15}\n",
        "Method", "MAE", "Dice", "mIoU"
    );
    out.push_str(&format!("{}\n", "-".repeat(width + 57)));
    for (name, agg) in rows {
        out.push_str(&format!(
            "{:<width$} | {:>15} | {:>15} | {:>15}\n",
            name,
            agg.mae.to_string(),
            agg.dice_fg.to_string(),
            agg.miou.to_string()
        ));
    }
    out
}
