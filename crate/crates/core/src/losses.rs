//! Training objectives.
//!
//! * cross-level contrastive loss between full-image block embeddings and
//!   whole-patch embeddings (InfoNCE, negatives from the same image's grid),
//! * patch-image consistency (MSE between softmax probabilities),
//! * supervised Dice + cross-entropy,
//! * the weighted total.
//!
//! Everything is built from differentiable tensor ops, so gradients flow
//! into both branches of each unsupervised loss.

use candle_core::{DType, Tensor, D};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PredictionMap, ProjectedGrid, ProjectedVectors};
use crate::ops;
use crate::patching;

/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1e-5;

/// Additive logit for excluded negatives; `exp` of it underflows to zero.
const EXCLUDED: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, tau: f64) -> Result<Self> {
        let w = Self { alpha, beta, tau };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidValue(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        check_tau(self.tau)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidValue(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

fn grid_and_patches(grid: &ProjectedGrid, patches: &ProjectedVectors) -> Result<(Tensor, Tensor)> {
    let (b, cells, dim) = grid.data.dims3()?;
    if cells != grid.side * grid.side {
        return Err(Error::CountMismatch {
            what: "grid cells",
            expected: grid.side * grid.side,
            actual: cells,
        });
    }
    let (p, pdim) = patches.0.dims2()?;
    if p != b * cells {
        return Err(Error::CountMismatch {
            what: "patch embeddings",
            expected: b * cells,
            actual: p,
        });
    }
    if pdim != dim {
        return Err(Error::ShapeMismatch {
            context: "embedding dim",
            left: vec![dim],
            right: vec![pdim],
        });
    }
    Ok((grid.data.clone(), patches.0.reshape((b, cells, dim))?))
}

/// Per-anchor logits `[B, N, N]`: row `i` holds the positive logit on the
/// diagonal and the same-grid negatives `g_i . g_m / tau` elsewhere.
fn anchor_logits(grid: &Tensor, patches: &Tensor, tau: f64) -> Result<(Tensor, Tensor)> {
    let n = grid.dim(1)?;
    let pos = ((grid * patches)?.sum(D::Minus1)? / tau)?;
    let sim = (grid.matmul(&grid.transpose(1, 2)?.contiguous()?)? / tau)?;
    let eye = Tensor::eye(n, grid.dtype(), grid.device())?;
    let off = (1.0 - &eye)?;
    let logits = (sim.broadcast_mul(&off)? + pos.unsqueeze(2)?.broadcast_mul(&eye)?)?;
    Ok((logits, pos))
}

/// Cross-level InfoNCE over every other cell of the same image's grid.
///
/// `grid` holds `B` images' `n * n` cell embeddings; `patches` holds the
/// `B * n * n` whole-patch embeddings in batch-then-row-major order. Returns
/// the mean over anchors and images.
pub fn contrastive_loss(
    grid: &ProjectedGrid,
    patches: &ProjectedVectors,
    tau: f64,
) -> Result<Tensor> {
    check_tau(tau)?;
    let (g, p) = grid_and_patches(grid, patches)?;
    let (logits, pos) = anchor_logits(&g, &p, tau)?;
    let lse = ops::logsumexp_last(&logits)?.squeeze(D::Minus1)?;
    Ok((lse - pos)?.mean_all()?)
}

/// Like [`contrastive_loss`] but each anchor sees only `negatives` randomly
/// chosen other cells. `negatives >= n * n - 1` uses all of them.
pub fn contrastive_loss_sampled<R: Rng + ?Sized>(
    grid: &ProjectedGrid,
    patches: &ProjectedVectors,
    tau: f64,
    negatives: usize,
    rng: &mut R,
) -> Result<Tensor> {
    check_tau(tau)?;
    let (g, p) = grid_and_patches(grid, patches)?;
    let (b, n, _) = g.dims3()?;
    if negatives == 0 {
        return Err(Error::InvalidValue("negative sample count must be positive".into()));
    }
    if negatives + 1 >= n {
        return contrastive_loss(grid, patches, tau);
    }
    let mut mask = vec![EXCLUDED; b * n * n];
    for img in 0..b {
        for anchor in 0..n {
            let row = &mut mask[(img * n + anchor) * n..(img * n + anchor + 1) * n];
            row[anchor] = 0.0;
            for pick in index::sample(rng, n - 1, negatives) {
                let m = if pick >= anchor { pick + 1 } else { pick };
                row[m] = 0.0;
            }
        }
    }
    let mask = Tensor::from_vec(mask, (b, n, n), g.device())?.to_dtype(g.dtype())?;
    let (logits, pos) = anchor_logits(&g, &p, tau)?;
    let lse = ops::logsumexp_last(&(logits + mask)?)?.squeeze(D::Minus1)?;
    Ok((lse - pos)?.mean_all()?)
}

/// Mean squared difference between softmaxed patch predictions and the
/// aligned crops of the softmaxed full-image prediction.
///
/// `global` is `[B, 2, H, W]`; `patches` is `[B * n * n, 2, H / n, W / n]`
/// in batch-then-row-major order.
pub fn consistency_loss(global: &PredictionMap, patches: &PredictionMap, n: usize) -> Result<Tensor> {
    let (b, c, h, w) = global.0.dims4()?;
    let (bh, bw) = patching::block_size(h, w, n)?;
    let (p, pc, ph, pw) = patches.0.dims4()?;
    if p != b * n * n {
        return Err(Error::CountMismatch {
            what: "patch predictions",
            expected: b * n * n,
            actual: p,
        });
    }
    if (pc, ph, pw) != (c, bh, bw) {
        return Err(Error::ShapeMismatch {
            context: "patch prediction shape",
            left: vec![c, bh, bw],
            right: vec![pc, ph, pw],
        });
    }
    let crops = patching::to_patch_batch(&global.probabilities()?, n)?;
    let diff = (patches.probabilities()? - crops)?;
    Ok(diff.sqr()?.mean_all()?)
}

fn check_mask(pred: &PredictionMap, mask: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = pred.0.dims4()?;
    if c != 2 || mask.dims() != [b, h, w] {
        return Err(Error::ShapeMismatch {
            context: "prediction vs mask",
            left: pred.0.dims().to_vec(),
            right: mask.dims().to_vec(),
        });
    }
    Ok(mask.to_dtype(pred.0.dtype())?)
}

/// Soft Dice loss on the foreground probability, averaged over images.
pub fn dice_loss(pred: &PredictionMap, mask: &Tensor) -> Result<Tensor> {
    let y = check_mask(pred, mask)?;
    let b = y.dim(0)?;
    let p = pred.foreground()?.reshape((b, ()))?;
    let y = y.reshape((b, ()))?;
    let inter = (&p * &y)?.sum(1)?;
    let num = ((inter * 2.0)? + DICE_EPS)?;
    let den = ((p.sum(1)? + y.sum(1)?)? + DICE_EPS)?;
    Ok((1.0 - (num / den)?)?.mean_all()?)
}

/// Mean per-pixel two-class cross-entropy. `mask` must be strictly 0/1.
pub fn ce_loss(pred: &PredictionMap, mask: &Tensor) -> Result<Tensor> {
    let y = check_mask(pred, mask)?;
    let values = y.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(v) = values.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::InvalidValue(format!("mask value {v} is not 0 or 1")));
    }
    let logp = ops::log_softmax(&pred.0, 1)?;
    let lp_bg = logp.narrow(1, 0, 1)?.squeeze(1)?;
    let lp_fg = logp.narrow(1, 1, 1)?.squeeze(1)?;
    let per_pixel = ((&y * lp_fg)? + ((1.0 - &y)? * lp_bg)?)?;
    Ok(per_pixel.mean_all()?.neg()?)
}

/// `(dice + ce) / 2`.
pub fn supervised_loss(pred: &PredictionMap, mask: &Tensor) -> Result<Tensor> {
    let dice = dice_loss(pred, mask)?;
    let ce = ce_loss(pred, mask)?;
    Ok(((dice + ce)? * 0.5)?)
}

fn ensure_finite(term: &'static str, t: &Tensor) -> Result<()> {
    let v = ops::scalar(t)?;
    if !v.is_finite() {
        return Err(Error::NonFiniteTerm { term, value: v });
    }
    Ok(())
}

/// `sup + alpha * contrast + beta * consist`. Absent terms contribute nothing.
pub fn total_loss(
    sup: Option<&Tensor>,
    contrast: Option<&Tensor>,
    consist: Option<&Tensor>,
    weights: &LossWeights,
) -> Result<Tensor> {
    weights.validate()?;
    let mut total: Option<Tensor> = None;
    for (term, value, weight) in [
        ("supervised", sup, 1.0),
        ("contrastive", contrast, weights.alpha),
        ("consistency", consist, weights.beta),
    ] {
        let Some(value) = value else { continue };
        ensure_finite(term, value)?;
        let scaled = (value * weight)?;
        total = Some(match total {
            Some(t) => (t + scaled)?,
            None => scaled,
        });
    }
    total.ok_or_else(|| Error::InvalidValue("total loss needs at least one term".into()))
}
