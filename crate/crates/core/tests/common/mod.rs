//! Plain-loop reference implementations used as test oracles.
#![allow(dead_code)]

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Cross-level InfoNCE for one image, written as softmax cross-entropy over
/// an explicit logit list `[positive, negatives...]` with target index 0.
pub fn contrastive_oracle(grid: &[Vec<f64>], patches: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let n = grid.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut logits = vec![dot(&grid[i], &patches[i]) / tau];
        for m in 0..n {
            if m != i {
                logits.push(dot(&grid[i], &grid[m]) / tau);
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let log_p0 = logits[0] - max - denom.ln();
        total -= log_p0;
    }
    total / n as f64
}

pub fn random_unit<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub fn random_normal<R: Rng>(count: usize, rng: &mut R) -> Vec<f64> {
    (0..count).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn tensor(values: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_slice(values, shape, &Device::Cpu).unwrap()
}

/// Confusion counts by explicit row/column iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn count_pixels(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Counts {
    let mut c = Counts {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for (prow, trow) in pred.iter().zip(truth) {
        for (&p, &t) in prow.iter().zip(trow) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    c
}

/// `(mae, dice, miou)` in percent from binary maps, empty classes scoring 1.
pub fn metrics_oracle(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> (f64, f64, f64) {
    let c = count_pixels(pred, truth);
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let pixels = (c.tp + c.fp + c.fn_ + c.tn) as f64;
    let mae = 100.0 * (c.fp + c.fn_) as f64 / pixels;
    let dice = 100.0 * ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    let iou_fg = ratio(c.tp, c.tp + c.fp + c.fn_);
    let iou_bg = ratio(c.tn, c.tn + c.fp + c.fn_);
    (mae, dice, 100.0 * 0.5 * (iou_fg + iou_bg))
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest elementwise `|a - n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
