//! Non-overlapping `n x n` patch grids over the last two (spatial) axes.
//!
//! Patch `i` sits at grid row `i / n`, column `i % n` everywhere in the
//! crate. The global projection grid, the aligned prediction crops and the
//! batched patch forward all rely on this single row-major convention.

use candle_core::Tensor;

use crate::error::{Error, Result};

fn spatial_dims(t: &Tensor) -> Result<(usize, usize)> {
    let dims = t.dims();
    if dims.len() < 2 {
        return Err(Error::InvalidValue(format!(
            "expected at least 2 spatial dims, got shape {dims:?}"
        )));
    }
    Ok((dims[dims.len() - 2], dims[dims.len() - 1]))
}

/// Check that `height` and `width` split evenly into an `n x n` grid and
/// return the block size.
pub fn block_size(height: usize, width: usize, n: usize) -> Result<(usize, usize)> {
    if n == 0 {
        return Err(Error::InvalidValue("grid side must be positive".into()));
    }
    if !height.is_multiple_of(n) {
        return Err(Error::Indivisible {
            axis: "height",
            size: height,
            divisor: n,
        });
    }
    if !width.is_multiple_of(n) {
        return Err(Error::Indivisible {
            axis: "width",
            size: width,
            divisor: n,
        });
    }
    Ok((height / n, width / n))
}

/// The region of `map` spatially congruent to patch `index` of an `n x n` grid.
pub fn crop_aligned(map: &Tensor, index: usize, n: usize) -> Result<Tensor> {
    let (h, w) = spatial_dims(map)?;
    let (bh, bw) = block_size(h, w, n)?;
    if index >= n * n {
        return Err(Error::IndexOutOfRange {
            index,
            len: n * n,
        });
    }
    let rank = map.rank();
    let (r, c) = (index / n, index % n);
    Ok(map
        .narrow(rank - 2, r * bh, bh)?
        .narrow(rank - 1, c * bw, bw)?
        .contiguous()?)
}

/// All `n * n` patches of `image`, row-major.
pub fn decompose_image(image: &Tensor, n: usize) -> Result<PatchSet> {
    let (h, w) = spatial_dims(image)?;
    block_size(h, w, n)?;
    let patches = (0..n * n)
        .map(|i| crop_aligned(image, i, n))
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchSet {
        patches,
        n,
        origin_hw: (h, w),
    })
}

/// Inverse of [`decompose_image`]: tile `parts` row-major into one map.
pub fn reassemble(parts: &[Tensor], n: usize) -> Result<Tensor> {
    if n == 0 || parts.len() != n * n {
        return Err(Error::CountMismatch {
            what: "patches",
            expected: n * n,
            actual: parts.len(),
        });
    }
    let first = parts[0].dims();
    spatial_dims(&parts[0])?;
    if let Some(bad) = parts.iter().find(|p| p.dims() != first) {
        return Err(Error::ShapeMismatch {
            context: "reassemble",
            left: first.to_vec(),
            right: bad.dims().to_vec(),
        });
    }
    let rank = parts[0].rank();
    let rows = parts
        .chunks(n)
        .map(|row| Tensor::cat(row, rank - 1))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&rows, rank - 2)?)
}

/// The patch decomposition of one image.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patches: Vec<Tensor>,
    pub n: usize,
    pub origin_hw: (usize, usize),
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn reassemble(&self) -> Result<Tensor> {
        reassemble(&self.patches, self.n)
    }
}

/// Batched decomposition: `[B, C, H, W]` to `[B * n * n, C, H / n, W / n]`.
///
/// Row `b * n * n + i` holds patch `i` of image `b`, identical to
/// `crop_aligned(image_b, i, n)`.
pub fn to_patch_batch(x: &Tensor, n: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (bh, bw) = block_size(h, w, n)?;
    Ok(x.reshape((b, c, n, bh, n, bw))?
        .permute((0, 2, 4, 1, 3, 5))?
        .reshape((b * n * n, c, bh, bw))?)
}

/// Inverse of [`to_patch_batch`].
pub fn from_patch_batch(x: &Tensor, n: usize) -> Result<Tensor> {
    let (bn, c, bh, bw) = x.dims4()?;
    if n == 0 || bn % (n * n) != 0 {
        return Err(Error::Indivisible {
            axis: "patch batch",
            size: bn,
            divisor: n * n,
        });
    }
    let b = bn / (n * n);
    Ok(x.reshape((b, n, n, c, bh, bw))?
        .permute((0, 3, 1, 4, 2, 5))?
        .reshape((b, c, n * bh, n * bw))?)
}
