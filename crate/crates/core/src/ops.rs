//! Tensor kernels not covered well enough by the stock CPU backend.
//!
//! Same-padded, stride-1 2D convolution (with bias) is implemented as im2col
//! followed by one GEMM over the whole batch, with a fused hand-written
//! backward pass. 2x2 max pooling and nearest 2x upsampling also get direct
//! kernels for both directions. The stock backward passes of these ops
//! dominate training time on small-channel U-Nets.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor, WithDType, D};

use crate::error::{Error, Result};

trait Float: WithDType + Default {
    /// `c[m, n] = a[m, k] * b[k, n] + beta * c`, `c` row-major and contiguous.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
    );
}

impl Float for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
    }
}

impl Float for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
    }
}

/// Columns `x0..x1` of a row of width `w` whose source `x + dx` is in range.
fn valid_span(w: usize, dx: isize) -> (usize, usize) {
    let x0 = (-dx).clamp(0, w as isize) as usize;
    let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
    (x0, x1.max(x0))
}

/// Unfold one `[cin, h, w]` image into rows of `cols` (row stride `ld`),
/// starting at column `off`: `cols[(ci, ky, kx), off + y * w + x]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(x: &[T], cin: usize, h: usize, w: usize, k: usize, cols: &mut [T], ld: usize, off: usize) {
    let pad = (k / 2) as isize;
    for ci in 0..cin {
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = valid_span(w, dx);
                let base = ((ci * k + ky) * k + kx) * ld + off;
                for y in 0..h {
                    let dst = &mut cols[base + y * w..base + (y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let row = (ci * h + sy as usize) * w;
                    dst[..x0].fill(T::zero());
                    dst[x1..].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    dst[x0..x1].copy_from_slice(&x[row + s0..row + s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into one image.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Float>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, x: &mut [T], ld: usize, off: usize) {
    let pad = (k / 2) as isize;
    for ci in 0..cin {
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = valid_span(w, dx);
                let base = ((ci * k + ky) * k + kx) * ld + off;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &cols[base + y * w + x0..base + y * w + x1];
                    let row = (ci * h + sy as usize) * w;
                    let s0 = (x0 as isize + dx) as usize;
                    for (d, s) in x[row + s0..row + s0 + (x1 - x0)].iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// `[B, C, hw]` to `[C, B * hw]`.
fn batch_to_channel_major<T: Float>(x: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            out[ci * b * hw + bi * hw..ci * b * hw + (bi + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

/// `[C, B * hw]` to `[B, C, hw]`.
fn channel_to_batch_major<T: Float>(x: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x[ci * b * hw + bi * hw..ci * b * hw + (bi + 1) * hw];
            out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

/// `[cin * k * k, B * hw]` patch matrix of a `[B, cin, h, w]` batch.
fn unfold_batch<T: Float>(x: &[T], b: usize, cin: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    if k == 1 {
        return batch_to_channel_major(x, b, cin, h * w);
    }
    let hw = h * w;
    let ld = b * hw;
    let mut cols = vec![T::zero(); cin * k * k * ld];
    for bi in 0..b {
        im2col(&x[bi * cin * hw..(bi + 1) * cin * hw], cin, h, w, k, &mut cols, ld, bi * hw);
    }
    cols
}

trait Kernel {
    fn run<T: Float>(&self, args: &[&[T]], shapes: &[&Shape]) -> candle_core::Result<(Vec<T>, Shape)>;
}

fn contiguous_slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("custom kernels require contiguous inputs"),
    }
}

fn dispatch<K: Kernel>(kernel: &K, args: &[(&CpuStorage, &Layout)]) -> candle_core::Result<(CpuStorage, Shape)> {
    let shapes: Vec<&Shape> = args.iter().map(|(_, l)| l.shape()).collect();
    match args[0].0 {
        CpuStorage::F32(_) => {
            let xs = args
                .iter()
                .map(|(s, l)| contiguous_slice::<f32>(s, l))
                .collect::<candle_core::Result<Vec<_>>>()?;
            let (v, s) = kernel.run(&xs, &shapes)?;
            Ok((CpuStorage::F32(v), s))
        }
        CpuStorage::F64(_) => {
            let xs = args
                .iter()
                .map(|(s, l)| contiguous_slice::<f64>(s, l))
                .collect::<candle_core::Result<Vec<_>>>()?;
            let (v, s) = kernel.run(&xs, &shapes)?;
            Ok((CpuStorage::F64(v), s))
        }
        _ => candle_core::bail!("custom kernels support f32 or f64 operands only"),
    }
}

/// `y = conv(x, w) + b` over `(x [B, Cin, H, W], w [Cout, Cin, k, k], b [Cout])`.
struct ConvForward;

impl Kernel for ConvForward {
    fn run<T: Float>(&self, a: &[&[T]], s: &[&Shape]) -> candle_core::Result<(Vec<T>, Shape)> {
        let (b, cin, h, w) = s[0].dims4()?;
        let (cout, _, k, _) = s[1].dims4()?;
        let hw = h * w;
        let kk = cin * k * k;
        let cols = unfold_batch(a[0], b, cin, h, w, k);
        let mut y = vec![T::zero(); cout * b * hw];
        // y[cout, B * hw] = W[cout, kk] * cols[kk, B * hw]
        unsafe {
            T::gemm(cout, kk, b * hw, a[1].as_ptr(), kk as isize, 1, cols.as_ptr(), (b * hw) as isize, 1, T::zero(), y.as_mut_ptr());
        }
        for (row, &bias) in y.chunks_exact_mut(b * hw).zip(a[2]) {
            row.iter_mut().for_each(|v| *v += bias);
        }
        Ok((channel_to_batch_major(&y, b, cout, hw), Shape::from((b, cout, h, w))))
    }
}

/// Gradients of [`ConvForward`] packed as one flat vector
/// `[dx (B*Cin*H*W), dw (Cout*Cin*k*k), db (Cout)]` over `(x, w, grad_y)`.
struct ConvBackward;

impl Kernel for ConvBackward {
    fn run<T: Float>(&self, a: &[&[T]], s: &[&Shape]) -> candle_core::Result<(Vec<T>, Shape)> {
        let (b, cin, h, w) = s[0].dims4()?;
        let (cout, _, k, _) = s[1].dims4()?;
        let hw = h * w;
        let n = b * hw;
        let kk = cin * k * k;
        let g = batch_to_channel_major(a[2], b, cout, hw);
        let cols = unfold_batch(a[0], b, cin, h, w, k);
        let nx = b * cin * hw;
        let mut out = vec![T::zero(); nx + cout * kk + cout];
        let (dx, rest) = out.split_at_mut(nx);
        let (dw, db) = rest.split_at_mut(cout * kk);
        // dw[cout, kk] = g[cout, n] * cols^T[n, kk]
        unsafe {
            T::gemm(cout, n, kk, g.as_ptr(), n as isize, 1, cols.as_ptr(), 1, n as isize, T::zero(), dw.as_mut_ptr());
        }
        for (d, row) in db.iter_mut().zip(g.chunks_exact(n)) {
            *d = row.iter().fold(T::zero(), |acc, v| acc + *v);
        }
        // dcols[kk, n] = W^T[kk, cout] * g[cout, n]
        let mut dcols = cols;
        unsafe {
            T::gemm(kk, cout, n, a[1].as_ptr(), 1, kk as isize, g.as_ptr(), n as isize, 1, T::zero(), dcols.as_mut_ptr());
        }
        if k == 1 {
            dx.copy_from_slice(&channel_to_batch_major(&dcols, b, cin, hw));
        } else {
            for bi in 0..b {
                col2im(&dcols, cin, h, w, k, &mut dx[bi * cin * hw..(bi + 1) * cin * hw], n, bi * hw);
            }
        }
        let len = out.len();
        Ok((out, Shape::from(len)))
    }
}

struct Conv;

impl CustomOp3 for Conv {
    fn name(&self) -> &'static str {
        "same-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch(&ConvForward, &[(s1, l1), (s2, l2), (s3, l3)])
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let packed = x.apply_op3_no_bwd(w, &grad.contiguous()?, &ConvBackwardOp)?;
        let (nx, nw) = (x.elem_count(), w.elem_count());
        let dx = packed.narrow(0, 0, nx)?.reshape(x.shape())?;
        let dw = packed.narrow(0, nx, nw)?.reshape(w.shape())?;
        let db = packed.narrow(0, nx + nw, bias.elem_count())?.reshape(bias.shape())?;
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

struct ConvBackwardOp;

impl CustomOp3 for ConvBackwardOp {
    fn name(&self) -> &'static str {
        "same-conv2d-backward"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch(&ConvBackward, &[(s1, l1), (s2, l2), (s3, l3)])
    }
}

/// 2x2 max pooling of `[B, C, H, W]` with even `H`, `W`.
struct MaxPool;

impl Kernel for MaxPool {
    fn run<T: Float>(&self, a: &[&[T]], s: &[&Shape]) -> candle_core::Result<(Vec<T>, Shape)> {
        let (b, c, h, w) = s[0].dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        let x = a[0];
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in x.chunks_exact(h * w) {
            for y in 0..oh {
                let (r0, r1) = (&plane[2 * y * w..(2 * y + 1) * w], &plane[(2 * y + 1) * w..(2 * y + 2) * w]);
                for xx in 0..ow {
                    let m = [r0[2 * xx + 1], r1[2 * xx], r1[2 * xx + 1]]
                        .into_iter()
                        .fold(r0[2 * xx], |m, v| if v > m { v } else { m });
                    out.push(m);
                }
            }
        }
        Ok((out, Shape::from((b, c, oh, ow))))
    }
}

/// Routes each pooled gradient to the first maximum of its window, over `(x, grad_y)`.
struct MaxPoolGrad;

impl Kernel for MaxPoolGrad {
    fn run<T: Float>(&self, a: &[&[T]], s: &[&Shape]) -> candle_core::Result<(Vec<T>, Shape)> {
        let (b, c, h, w) = s[0].dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        let (x, g) = (a[0], a[1]);
        let mut dx = vec![T::zero(); x.len()];
        for p in 0..b * c {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let cands = [
                        (2 * y) * w + 2 * xx,
                        (2 * y) * w + 2 * xx + 1,
                        (2 * y + 1) * w + 2 * xx,
                        (2 * y + 1) * w + 2 * xx + 1,
                    ];
                    let best = cands[1..]
                        .iter()
                        .fold(cands[0], |m, &i| if plane[i] > plane[m] { i } else { m });
                    dx[p * h * w + best] += g[(p * oh + y) * ow + xx];
                }
            }
        }
        Ok((dx, s[0].clone()))
    }
}

struct MaxPoolOp;

impl CustomOp1 for MaxPoolOp {
    fn name(&self) -> &'static str {
        "max-pool2x2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch(&MaxPool, &[(s, l)])
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(x.apply_op2_no_bwd(&grad.contiguous()?, &MaxPoolGradOp)?))
    }
}

struct MaxPoolGradOp;

impl candle_core::CustomOp2 for MaxPoolGradOp {
    fn name(&self) -> &'static str {
        "max-pool2x2-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch(&MaxPoolGrad, &[(s1, l1), (s2, l2)])
    }
}

/// Nearest 2x upsampling (`down == false`) or its adjoint, 2x2 block sums.
struct Resample {
    down: bool,
}

impl Kernel for Resample {
    fn run<T: Float>(&self, a: &[&[T]], s: &[&Shape]) -> candle_core::Result<(Vec<T>, Shape)> {
        let (b, c, h, w) = s[0].dims4()?;
        let x = a[0];
        if self.down {
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![T::zero(); b * c * oh * ow];
            for p in 0..b * c {
                for y in 0..h {
                    let src = &x[(p * h + y) * w..(p * h + y + 1) * w];
                    let dst = &mut out[(p * oh + y / 2) * ow..(p * oh + y / 2 + 1) * ow];
                    for (xx, v) in src.iter().enumerate() {
                        dst[xx / 2] += *v;
                    }
                }
            }
            Ok((out, Shape::from((b, c, oh, ow))))
        } else {
            let (oh, ow) = (2 * h, 2 * w);
            let mut out = Vec::with_capacity(b * c * oh * ow);
            for row in x.chunks_exact(w) {
                for _ in 0..2 {
                    for v in row {
                        out.push(*v);
                        out.push(*v);
                    }
                }
            }
            Ok((out, Shape::from((b, c, oh, ow))))
        }
    }
}

struct UpsampleOp;

impl CustomOp1 for UpsampleOp {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch(&Resample { down: false }, &[(s, l)])
    }

    fn bwd(&self, _x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&BlockSumOp)?))
    }
}

struct BlockSumOp;

impl CustomOp1 for BlockSumOp {
    fn name(&self) -> &'static str {
        "block-sum2x2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch(&Resample { down: true }, &[(s, l)])
    }
}

/// Stride-1 convolution with `k / 2` zero padding, so spatial size is kept.
///
/// `x` is `[B, Cin, H, W]`, `weight` is `[Cout, Cin, k, k]` with odd `k`,
/// `bias` is `[Cout]` (zero when absent).
pub fn conv2d_same(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (_, cin, _, _) = x.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if cin != wcin || kh != kw || kh % 2 == 0 {
        return Err(Error::ShapeMismatch {
            context: "conv2d_same",
            left: x.dims().to_vec(),
            right: weight.dims().to_vec(),
        });
    }
    let bias = match bias {
        Some(b) if b.dims() == [cout] => b.contiguous()?,
        Some(b) => {
            return Err(Error::ShapeMismatch {
                context: "conv2d_same bias",
                left: vec![cout],
                right: b.dims().to_vec(),
            })
        }
        None => Tensor::zeros(cout, weight.dtype(), weight.device())?,
    };
    Ok(x.contiguous()?.apply_op3(&weight.contiguous()?, &bias, Conv)?)
}

fn check_even(x: &Tensor) -> Result<()> {
    let (_, _, h, w) = x.dims4()?;
    for (axis, size) in [("height", h), ("width", w)] {
        if size % 2 != 0 {
            return Err(Error::Indivisible { axis, size, divisor: 2 });
        }
    }
    Ok(())
}

/// 2x2 max pooling with stride 2 of a `[B, C, H, W]` tensor (even `H`, `W`).
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    check_even(x)?;
    Ok(x.contiguous()?.apply_op1(MaxPoolOp)?)
}

/// Nearest-neighbour 2x upsampling of a `[B, C, H, W]` tensor.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    x.dims4()?;
    Ok(x.contiguous()?.apply_op1(UpsampleOp)?)
}

/// Numerically stable softmax along `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

/// Numerically stable log-softmax along `dim`.
pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let shifted = x.broadcast_sub(&x.max_keepdim(dim)?.detach())?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Log-sum-exp over the last dimension, keeping it.
pub fn logsumexp_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(s.broadcast_add(&max)?)
}

/// L2-normalise rows along the last dimension.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x
        .sqr()?
        .sum_keepdim(D::Minus1)?
        .clamp(1e-24, f64::INFINITY)?
        .sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Scalar value of a rank-0 or single-element tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}
