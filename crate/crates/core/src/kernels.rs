//! Differentiable tensor kernels missing from (or slow in) `candle_core` on
//! the CPU: a GEMM-backed stride-1 convolution, `atan2` and `sigmoid` with
//! analytic backward passes, plus small composite layers.

use candle_core::{
    bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, WithDType, D,
};

type CResult<T> = candle_core::Result<T>;

/// Output widths up to this size go to the `gemm` crate, which handles
/// narrow products better; wider ones go to `matrixmultiply`.
const NARROW_GEMM: usize = 32;

trait Gemm: WithDType + Default {
    /// `c = alpha * a @ b + beta * c` with arbitrary strides.
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
        rsc: isize,
        csc: isize,
    );
}

impl Gemm for f32 {
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
        rsc: isize,
        csc: isize,
    ) {
        if n <= NARROW_GEMM {
            gemm::gemm(
                m, n, k, c, csc, rsc, beta != 0.0, a, csa, rsa, b, csb, rsb, beta, 1.0,
                false, false, false, gemm::Parallelism::None,
            )
        } else {
            matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
        }
    }
}

impl Gemm for f64 {
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
        rsc: isize,
        csc: isize,
    ) {
        if n <= NARROW_GEMM {
            gemm::gemm(
                m, n, k, c, csc, rsc, beta != 0.0, a, csa, rsa, b, csb, rsb, beta, 1.0,
                false, false, false, gemm::Parallelism::None,
            )
        } else {
            matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
        }
    }
}

fn contiguous_slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&s.as_slice::<T>()?[start..end]),
        None => bail!("kernel input must be contiguous"),
    }
}

/// Target size of one im2col block, in elements.
const COL_BLOCK_ELEMS: usize = 1 << 16;

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl ConvGeom {
    fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox + kx - pad` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let ow = self.out_w();
        let lo = self.pad.saturating_sub(kx).min(ow);
        let hi = (self.w + self.pad).saturating_sub(kx).min(ow).max(lo);
        (lo, hi)
    }

    /// Unfolds output rows `rows.start..rows.end` of one `(c_in, h, w)` image
    /// into a `(c_in·k·k, len(rows)·out_w)` column block.
    fn im2col<T: Gemm>(&self, x: &[T], out_rows: std::ops::Range<usize>, col: &mut [T]) {
        let ow = self.out_w();
        let n = out_rows.len() * ow;
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * n..(row + 1) * n];
                    let (lo, hi) = self.valid_cols(kx);
                    for (j, oy) in out_rows.clone().enumerate() {
                        let iy = oy + ky;
                        let out_row = &mut dst[j * ow..(j + 1) * ow];
                        if iy < self.pad || iy >= self.h + self.pad {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[(iy - self.pad) * self.w..(iy - self.pad + 1) * self.w];
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        out_row[lo..hi].copy_from_slice(&src[lo + kx - self.pad..hi + kx - self.pad]);
                    }
                }
            }
        }
    }

    /// Output-row blocks sized so one column block stays cache resident.
    fn row_blocks(&self) -> impl Iterator<Item = std::ops::Range<usize>> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let per = (COL_BLOCK_ELEMS / (self.col_rows() * ow).max(1)).clamp(1, oh.max(1));
        (0..oh).step_by(per).map(move |r| r..(r + per).min(oh))
    }

    /// Scatter-adds a column matrix back onto a `(c_in, h, w)` image.
    fn col2im<T: Gemm>(&self, col: &[T], x: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let n = oh * ow;
        for ci in 0..self.c_in {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &col[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < self.pad || iy >= self.h + self.pad {
                            continue;
                        }
                        let dst = &mut plane[(iy - self.pad) * self.w..(iy - self.pad + 1) * self.w];
                        let (lo, hi) = self.valid_cols(kx);
                        let src_row = &src[oy * ow + lo..oy * ow + hi];
                        for (d, &v) in dst[lo + kx - self.pad..hi + kx - self.pad].iter_mut().zip(src_row) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims(l_in: &Layout, l_w: &Layout, pad: usize) -> CResult<(usize, usize, ConvGeom)> {
    let (b, c_in, h, w) = l_in.shape().dims4()?;
    let (c_out, c_in_k, k, k2) = l_w.shape().dims4()?;
    if c_in != c_in_k || k != k2 {
        bail!("conv: input {:?} incompatible with kernel {:?}", l_in.shape(), l_w.shape());
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        bail!("conv: kernel {k} larger than padded input {h}x{w}");
    }
    Ok((b, c_out, ConvGeom { c_in, h, w, k, pad }))
}

/// Stride-1 square convolution, `(B, Cin, H, W) ⊛ (Cout, Cin, k, k)`.
struct Conv2d {
    pad: usize,
}

impl Conv2d {
    fn run<T: Gemm>(&self, x: &[T], lx: &Layout, wt: &[T], lw: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, c_out, g) = conv_dims(lx, lw, self.pad)?;
        let n = g.out_h() * g.out_w();
        let rows = g.col_rows();
        let mut out = vec![T::zero(); b * c_out * n];
        let ow = g.out_w();
        let mut col = Vec::new();
        for bi in 0..b {
            let xb = &x[bi * g.c_in * g.h * g.w..(bi + 1) * g.c_in * g.h * g.w];
            let ob = &mut out[bi * c_out * n..(bi + 1) * c_out * n];
            if g.is_pointwise() {
                unsafe {
                    T::gemm(
                        c_out, rows, n,
                        wt.as_ptr(), rows as isize, 1,
                        xb.as_ptr(), n as isize, 1,
                        T::zero(),
                        ob.as_mut_ptr(), n as isize, 1,
                    );
                }
                continue;
            }
            for block in g.row_blocks() {
                let bn = block.len() * ow;
                col.resize(rows * bn, T::zero());
                let start = block.start * ow;
                g.im2col(xb, block, &mut col);
                unsafe {
                    T::gemm(
                        c_out, rows, bn,
                        wt.as_ptr(), rows as isize, 1,
                        col.as_ptr(), bn as isize, 1,
                        T::zero(),
                        ob[start..].as_mut_ptr(), n as isize, 1,
                    );
                }
            }
        }
        Ok((T::to_cpu_storage_owned(out), Shape::from((b, c_out, g.out_h(), g.out_w()))))
    }
}

impl CustomOp2 for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d-gemm"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                self.run::<f32>(contiguous_slice(s1, l1)?, l1, contiguous_slice(s2, l2)?, l2)
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                self.run::<f64>(contiguous_slice(s1, l1)?, l1, contiguous_slice(s2, l2)?, l2)
            }
            _ => bail!("conv2d-gemm supports matching f32/f64 operands only"),
        }
    }

    fn bwd(
        &self,
        input: &Tensor,
        kernel: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, w) = input.dims4()?;
        let k = kernel.dim(2)?;
        let gx = if 2 * self.pad + 1 == k {
            // "same" convolution: the input gradient is a convolution of the
            // output gradient with the transposed, flipped kernel
            let flipped = kernel.contiguous()?.apply_op1_no_bwd(&TransposeFlip)?;
            grad.apply_op2_no_bwd(&flipped, &Conv2d { pad: k - 1 - self.pad })?
        } else {
            grad.apply_op2_no_bwd(kernel, &ConvGradInput { pad: self.pad, h, w })?
        };
        let gw = input.apply_op2_no_bwd(&grad, &ConvGradKernel { pad: self.pad, k })?;
        Ok((Some(gx), Some(gw)))
    }
}

/// Cache-blocked transpose of a row-major `(r, c)` matrix.
fn transpose<T: Copy>(src: &[T], r: usize, c: usize, dst: &mut [T]) {
    const TILE: usize = 32;
    for i0 in (0..r).step_by(TILE) {
        for j0 in (0..c).step_by(TILE) {
            for i in i0..(i0 + TILE).min(r) {
                for j in j0..(j0 + TILE).min(c) {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
    }
}

/// `(Cout, Cin, k, k)` → `(Cin, Cout, k, k)` with both spatial axes reversed.
struct TransposeFlip;

impl CustomOp1 for TransposeFlip {
    fn name(&self) -> &'static str {
        "transpose-flip"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (co, ci, k, _) = l.shape().dims4()?;
        fn run<T: WithDType>(w: &[T], co: usize, ci: usize, k: usize) -> Vec<T> {
            let mut out = vec![T::zero(); w.len()];
            for o in 0..co {
                for i in 0..ci {
                    let src = &w[(o * ci + i) * k * k..(o * ci + i + 1) * k * k];
                    let dst = &mut out[(i * co + o) * k * k..(i * co + o + 1) * k * k];
                    for (d, &v) in dst.iter_mut().rev().zip(src) {
                        *d = v;
                    }
                }
            }
            out
        }
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(run(contiguous_slice::<f32>(s, l)?, co, ci, k)),
            CpuStorage::F64(_) => CpuStorage::F64(run(contiguous_slice::<f64>(s, l)?, co, ci, k)),
            _ => bail!("transpose-flip supports f32/f64 only"),
        };
        Ok((out, Shape::from((ci, co, k, k))))
    }
}

/// Gradient w.r.t. the convolution input: `col2im(Wᵀ @ grad)`.
struct ConvGradInput {
    pad: usize,
    h: usize,
    w: usize,
}

impl ConvGradInput {
    fn run<T: Gemm>(&self, g: &[T], lg: &Layout, wt: &[T], lw: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, c_out, oh, ow) = lg.shape().dims4()?;
        let (c_out_k, c_in, k, _) = lw.shape().dims4()?;
        if c_out != c_out_k {
            bail!("conv grad: channel mismatch");
        }
        let geom = ConvGeom { c_in, h: self.h, w: self.w, k, pad: self.pad };
        if geom.out_h() != oh || geom.out_w() != ow {
            bail!("conv grad: spatial mismatch");
        }
        let n = oh * ow;
        let rows = geom.col_rows();
        let plane = c_in * self.h * self.w;
        let mut out = vec![T::zero(); b * plane];
        let mut col = vec![T::zero(); rows * n];
        for bi in 0..b {
            let gb = &g[bi * c_out * n..(bi + 1) * c_out * n];
            let xb = &mut out[bi * plane..(bi + 1) * plane];
            let dst: &mut [T] = if geom.is_pointwise() { xb } else { &mut col };
            unsafe {
                // (rows × c_out) @ (c_out × n), W read transposed
                T::gemm(
                    rows, c_out, n,
                    wt.as_ptr(), 1, rows as isize,
                    gb.as_ptr(), n as isize, 1,
                    T::zero(),
                    dst.as_mut_ptr(), n as isize, 1,
                );
            }
            if !geom.is_pointwise() {
                geom.col2im(&col, &mut out[bi * plane..(bi + 1) * plane]);
            }
        }
        Ok((T::to_cpu_storage_owned(out), Shape::from((b, c_in, self.h, self.w))))
    }
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "conv2d-gemm-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                self.run::<f32>(contiguous_slice(s1, l1)?, l1, contiguous_slice(s2, l2)?, l2)
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                self.run::<f64>(contiguous_slice(s1, l1)?, l1, contiguous_slice(s2, l2)?, l2)
            }
            _ => bail!("conv2d-gemm supports matching f32/f64 operands only"),
        }
    }
}

/// Gradient w.r.t. the kernel: `Σ_b grad_b @ col_bᵀ`.
struct ConvGradKernel {
    pad: usize,
    k: usize,
}

impl ConvGradKernel {
    fn run<T: Gemm>(&self, x: &[T], lx: &Layout, g: &[T], lg: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, c_in, h, w) = lx.shape().dims4()?;
        let (_, c_out, oh, ow) = lg.shape().dims4()?;
        let geom = ConvGeom { c_in, h, w, k: self.k, pad: self.pad };
        if geom.out_h() != oh || geom.out_w() != ow {
            bail!("conv kernel grad: spatial mismatch");
        }
        let n = oh * ow;
        let rows = geom.col_rows();
        let mut out = vec![T::zero(); c_out * rows];
        let mut col = Vec::new();
        let mut col_t = Vec::new();
        let mut first = true;
        for bi in 0..b {
            let xb = &x[bi * c_in * h * w..(bi + 1) * c_in * h * w];
            let gb = &g[bi * c_out * n..(bi + 1) * c_out * n];
            let blocks: Vec<_> = if geom.is_pointwise() { vec![0..oh] } else { geom.row_blocks().collect() };
            for block in blocks {
                let bn = block.len() * ow;
                let start = block.start * ow;
                let src: &[T] = if geom.is_pointwise() {
                    xb
                } else {
                    col.resize(rows * bn, T::zero());
                    geom.im2col(xb, block, &mut col);
                    &col
                };
                col_t.resize(rows * bn, T::zero());
                transpose(src, rows, bn, &mut col_t);
                unsafe {
                    // (c_out × bn) @ (bn × rows)
                    T::gemm(
                        c_out, bn, rows,
                        gb[start..].as_ptr(), n as isize, 1,
                        col_t.as_ptr(), rows as isize, 1,
                        if first { T::zero() } else { T::one() },
                        out.as_mut_ptr(), rows as isize, 1,
                    );
                }
                first = false;
            }
        }
        Ok((T::to_cpu_storage_owned(out), Shape::from((c_out, c_in, self.k, self.k))))
    }
}

impl CustomOp2 for ConvGradKernel {
    fn name(&self) -> &'static str {
        "conv2d-gemm-grad-kernel"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                self.run::<f32>(contiguous_slice(s1, l1)?, l1, contiguous_slice(s2, l2)?, l2)
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                self.run::<f64>(contiguous_slice(s1, l1)?, l1, contiguous_slice(s2, l2)?, l2)
            }
            _ => bail!("conv2d-gemm supports matching f32/f64 operands only"),
        }
    }
}

/// Stride-1 convolution with symmetric zero padding.
pub fn conv2d(x: &Tensor, kernel: &Tensor, pad: usize) -> CResult<Tensor> {
    x.contiguous()?.apply_op2(&kernel.contiguous()?, Conv2d { pad })
}

fn map_unary(
    s: &CpuStorage,
    l: &Layout,
    f32_fn: fn(f32) -> f32,
    f64_fn: fn(f64) -> f64,
) -> CResult<(CpuStorage, Shape)> {
    let out = match s {
        CpuStorage::F32(_) => {
            CpuStorage::F32(contiguous_slice::<f32>(s, l)?.iter().map(|&v| f32_fn(v)).collect())
        }
        CpuStorage::F64(_) => {
            CpuStorage::F64(contiguous_slice::<f64>(s, l)?.iter().map(|&v| f64_fn(v)).collect())
        }
        _ => bail!("unary kernel supports f32/f64 only"),
    };
    Ok((out, l.shape().clone()))
}

struct Atan2;

impl CustomOp2 for Atan2 {
    fn name(&self) -> &'static str {
        "atan2"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        if l1.shape() != l2.shape() {
            bail!("atan2 shape mismatch {:?} vs {:?}", l1.shape(), l2.shape());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                let (y, x) = (contiguous_slice::<f32>(s1, l1)?, contiguous_slice::<f32>(s2, l2)?);
                CpuStorage::F32(y.iter().zip(x).map(|(y, x)| y.atan2(*x)).collect())
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                let (y, x) = (contiguous_slice::<f64>(s1, l1)?, contiguous_slice::<f64>(s2, l2)?);
                CpuStorage::F64(y.iter().zip(x).map(|(y, x)| y.atan2(*x)).collect())
            }
            _ => bail!("atan2 supports matching f32/f64 operands only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, y: &Tensor, x: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let r2 = (y.sqr()? + x.sqr()?)?;
        let g = grad.div(&r2)?;
        Ok((Some(g.mul(x)?), Some(g.mul(y)?.neg()?)))
    }
}

/// Elementwise `atan2(y, x)` in radians. The gradient is undefined at the
/// origin; callers keep `y` or `x` away from it.
pub fn atan2(y: &Tensor, x: &Tensor) -> CResult<Tensor> {
    y.contiguous()?.apply_op2(&x.contiguous()?, Atan2)
}

struct Sigmoid;

fn sigmoid32(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

fn sigmoid64(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl CustomOp1 for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        map_unary(s, l, sigmoid32, sigmoid64)
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let d = res.mul(&res.affine(-1.0, 1.0)?)?;
        Ok(Some(grad.mul(&d)?))
    }
}

pub fn sigmoid(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Sigmoid)
}

/// Softmax over the last dimension, stabilized by the (constant) row maximum.
pub fn softmax_last(x: &Tensor) -> CResult<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

/// `log Σ exp(x)` over the last dimension.
pub fn logsumexp_last(x: &Tensor) -> CResult<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    s.add(&max)?.squeeze(D::Minus1)
}

fn values_f64(t: &Tensor) -> CResult<Vec<f64>> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => Ok(flat.to_vec1::<f32>()?.into_iter().map(f64::from).collect()),
        _ => flat.to_dtype(DType::F64)?.to_vec1(),
    }
}

fn tensor_like(values: Vec<f64>, shape: &Shape, like: &Tensor) -> CResult<Tensor> {
    match like.dtype() {
        DType::F32 => {
            let v: Vec<f32> = values.into_iter().map(|v| v as f32).collect();
            Tensor::from_vec(v, shape, like.device())
        }
        dtype => Tensor::from_vec(values, shape, like.device())?.to_dtype(dtype),
    }
}

fn map_slice<F: Fn(&[f64]) -> Vec<f64>>(s: &CpuStorage, l: &Layout, shape: Shape, f: F) -> CResult<(CpuStorage, Shape)> {
    let out = match s {
        CpuStorage::F32(_) => {
            let x: Vec<f64> = contiguous_slice::<f32>(s, l)?.iter().map(|&v| v as f64).collect();
            CpuStorage::F32(f(&x).into_iter().map(|v| v as f32).collect())
        }
        CpuStorage::F64(_) => CpuStorage::F64(f(contiguous_slice::<f64>(s, l)?)),
        _ => bail!("kernel supports f32/f64 only"),
    };
    Ok((out, shape))
}

struct Silu;

impl CustomOp1 for Silu {
    fn name(&self) -> &'static str {
        "silu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        map_unary(s, l, |v| v * sigmoid32(v), |v| v * sigmoid64(v))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let x = values_f64(arg)?;
        let g = values_f64(grad)?;
        let d: Vec<f64> = x
            .iter()
            .zip(&g)
            .map(|(&x, &g)| {
                let s = sigmoid64(x);
                g * s * (1.0 + x * (1.0 - s))
            })
            .collect();
        Ok(Some(tensor_like(d, arg.shape(), arg)?))
    }
}

/// `x · sigmoid(x)`
pub fn silu(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Silu)
}

/// Group normalization with per-channel affine; statistics accumulate in f64.
struct GroupNormOp {
    groups: usize,
    eps: f64,
}

impl GroupNormOp {
    /// Per `(batch, group)` mean and reciprocal standard deviation.
    fn stats(&self, x: &[f64], b: usize, c: usize, hw: usize) -> Vec<(f64, f64)> {
        let len = c / self.groups * hw;
        (0..b * self.groups)
            .map(|i| {
                let chunk = &x[i * len..(i + 1) * len];
                let mean = chunk.iter().sum::<f64>() / len as f64;
                let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
                (mean, 1.0 / (var + self.eps).sqrt())
            })
            .collect()
    }
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let hw = h * w;
        let to_f64 = |s: &CpuStorage, l: &Layout| -> CResult<Vec<f64>> {
            Ok(match s {
                CpuStorage::F32(_) => contiguous_slice::<f32>(s, l)?.iter().map(|&v| v as f64).collect(),
                CpuStorage::F64(_) => contiguous_slice::<f64>(s, l)?.to_vec(),
                _ => bail!("group-norm supports f32/f64 only"),
            })
        };
        let gamma = to_f64(s2, l2)?;
        let beta = to_f64(s3, l3)?;
        map_slice(s1, l1, l1.shape().clone(), |x| {
            let stats = self.stats(x, b, c, hw);
            let cpg = c / self.groups;
            let mut y = vec![0.0; x.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let (mean, rstd) = stats[bi * self.groups + ci / cpg];
                    let off = (bi * c + ci) * hw;
                    let scale = rstd * gamma[ci];
                    let shift = beta[ci] - mean * scale;
                    for (o, &v) in y[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                        *o = v * scale + shift;
                    }
                }
            }
            y
        })
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let hw = h * w;
        let cpg = c / self.groups;
        let xs = values_f64(x)?;
        let gs = values_f64(grad)?;
        let gam = values_f64(gamma)?;
        let stats = self.stats(&xs, b, c, hw);
        let mut dx = vec![0.0; xs.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let len = (cpg * hw) as f64;
        for bi in 0..b {
            for gi in 0..self.groups {
                let (mean, rstd) = stats[bi * self.groups + gi];
                // mean of dxhat and of dxhat·xhat over the group
                let (mut m1, mut m2) = (0.0, 0.0);
                for ci in gi * cpg..(gi + 1) * cpg {
                    let off = (bi * c + ci) * hw;
                    let (mut sg, mut sgx) = (0.0, 0.0);
                    for i in off..off + hw {
                        let xhat = (xs[i] - mean) * rstd;
                        sg += gs[i];
                        sgx += gs[i] * xhat;
                    }
                    dbeta[ci] += sg;
                    dgamma[ci] += sgx;
                    m1 += sg * gam[ci];
                    m2 += sgx * gam[ci];
                }
                m1 /= len;
                m2 /= len;
                for ci in gi * cpg..(gi + 1) * cpg {
                    let off = (bi * c + ci) * hw;
                    for i in off..off + hw {
                        let xhat = (xs[i] - mean) * rstd;
                        dx[i] = rstd * (gs[i] * gam[ci] - m1 - xhat * m2);
                    }
                }
            }
        }
        Ok((
            Some(tensor_like(dx, x.shape(), x)?),
            Some(tensor_like(dgamma, gamma.shape(), gamma)?),
            Some(tensor_like(dbeta, gamma.shape(), gamma)?),
        ))
    }
}

/// Group normalization of a `(B, C, H, W)` tensor with per-channel affine.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> CResult<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        bail!("group_norm: {c} channels not divisible into {groups} groups");
    }
    if gamma.dims() != [c] || beta.dims() != [c] {
        bail!("group_norm: affine parameters must have shape [{c}]");
    }
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, GroupNormOp { groups, eps })
}

struct Upsample2x;

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        fn run<T: WithDType>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
            let mut y = Vec::with_capacity(planes * 4 * h * w);
            for p in 0..planes {
                for r in 0..h {
                    let row = &x[(p * h + r) * w..(p * h + r + 1) * w];
                    for _ in 0..2 {
                        for &v in row {
                            y.push(v);
                            y.push(v);
                        }
                    }
                }
            }
            y
        }
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(run(contiguous_slice::<f32>(s, l)?, b * c, h, w)),
            CpuStorage::F64(_) => CpuStorage::F64(run(contiguous_slice::<f64>(s, l)?, b * c, h, w)),
            _ => bail!("upsample2x supports f32/f64 only"),
        };
        Ok((out, Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let (b, c, h, w) = arg.dims4()?;
        let g = values_f64(grad)?;
        let mut dx = vec![0.0; b * c * h * w];
        for p in 0..b * c {
            for r in 0..2 * h {
                let row = &g[(p * 2 * h + r) * 2 * w..(p * 2 * h + r + 1) * 2 * w];
                let dst = &mut dx[(p * h + r / 2) * w..(p * h + r / 2 + 1) * w];
                for (x, d) in dst.iter_mut().enumerate() {
                    *d += row[2 * x] + row[2 * x + 1];
                }
            }
        }
        Ok(Some(tensor_like(dx, arg.shape(), arg)?))
    }
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2x(x: &Tensor) -> CResult<Tensor> {
    x.dims4()?;
    x.contiguous()?.apply_op1(Upsample2x)
}

/// Space-to-depth: `(B, C, H, W)` → `(B, 4C, H/2, W/2)`. Followed by a 1×1
/// convolution this is a 2×2 stride-2 convolution.
pub fn space_to_depth(x: &Tensor) -> CResult<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        bail!("space_to_depth needs even spatial dims, got {h}x{w}");
    }
    x.reshape((b, c, h / 2, 2, w / 2, 2))?
        .permute((0, 1, 3, 5, 2, 4))?
        .reshape((b, c * 4, h / 2, w / 2))
}

/// Depthwise 3×3 convolution (zero padding 1) with a `(C, 3, 3)` kernel,
/// written as nine shifted per-channel products.
pub fn depthwise3x3(x: &Tensor, kernel: &Tensor) -> CResult<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let tap = kernel.narrow(1, dy, 1)?.narrow(2, dx, 1)?.reshape((1, c, 1, 1))?;
            let term = padded.narrow(2, dy, h)?.narrow(3, dx, w)?.broadcast_mul(&tap)?;
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(&term)?,
            });
        }
    }
    Ok(acc.expect("nine taps"))
}


#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn naive_conv(x: &[f64], xs: (usize, usize, usize, usize), w: &[f64], ws: (usize, usize, usize), pad: usize) -> Vec<f64> {
        let (b, ci, h, wd) = xs;
        let (co, _, k) = ws;
        let (oh, ow) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
        let mut out = vec![0.0; b * co * oh * ow];
        for bi in 0..b {
            for o in 0..co {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = 0.0;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as isize + ky as isize - pad as isize;
                                    let ix = xx as isize + kx as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x[((bi * ci + c) * h + iy as usize) * wd + ix as usize]
                                            * w[((o * ci + c) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((bi * co + o) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, pad) in &[(3usize, 1usize), (1, 0), (3, 0)] {
            let x = rand_tensor(&mut rng, &[2, 3, 5, 6]);
            let w = rand_tensor(&mut rng, &[4, 3, k, k]);
            let y = conv2d(&x, &w, pad).unwrap();
            let expect = naive_conv(
                &x.flatten_all().unwrap().to_vec1().unwrap(),
                (2, 3, 5, 6),
                &w.flatten_all().unwrap().to_vec1().unwrap(),
                (4, 3, k),
                pad,
            );
            let got: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(got.len(), expect.len());
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
            let reference = x.conv2d(&w, pad, 1, 1, 1).unwrap();
            let diff = (reference - &y).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Var::from_tensor(&rand_tensor(&mut rng, &[2, 2, 4, 5])).unwrap();
        let w = Var::from_tensor(&rand_tensor(&mut rng, &[3, 2, 3, 3])).unwrap();
        let probe = rand_tensor(&mut rng, &[2, 3, 4, 5]);
        let loss = |x: &Tensor, w: &Tensor| -> f64 {
            conv2d(x, w, 1).unwrap().mul(&probe).unwrap().sum_all().unwrap().to_scalar().unwrap()
        };
        let out = conv2d(x.as_tensor(), w.as_tensor(), 1).unwrap().mul(&probe).unwrap().sum_all().unwrap();
        let grads = out.backward().unwrap();
        for (var, shape) in [(&x, vec![2usize, 2, 4, 5]), (&w, vec![3, 2, 3, 3])] {
            let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let base: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
            for i in (0..base.len()).step_by(7) {
                let mut plus = base.clone();
                plus[i] += 1e-6;
                let mut minus = base.clone();
                minus[i] -= 1e-6;
                let tp = Tensor::from_vec(plus, shape.as_slice(), &Device::Cpu).unwrap();
                let tm = Tensor::from_vec(minus, shape.as_slice(), &Device::Cpu).unwrap();
                let (lp, lm) = if std::ptr::eq(var, &x) {
                    (loss(&tp, w.as_tensor()), loss(&tm, w.as_tensor()))
                } else {
                    (loss(x.as_tensor(), &tp), loss(x.as_tensor(), &tm))
                };
                let fd = (lp - lm) / 2e-6;
                assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn atan2_and_sigmoid_gradients() {
        let ys = [0.5f64, 1e-3, 2.0, -0.4];
        let xs = [-0.7f64, 0.0, 0.3, 0.9];
        let x = Var::from_tensor(&Tensor::new(&xs, &Device::Cpu).unwrap()).unwrap();
        let y = Var::from_tensor(&Tensor::new(&ys, &Device::Cpu).unwrap()).unwrap();
        let a = atan2(y.as_tensor(), x.as_tensor()).unwrap();
        let av: Vec<f64> = a.to_vec1().unwrap();
        let grads = a.sum_all().unwrap().backward().unwrap();
        let gy: Vec<f64> = grads.get(y.as_tensor()).unwrap().to_vec1().unwrap();
        let gx: Vec<f64> = grads.get(x.as_tensor()).unwrap().to_vec1().unwrap();
        for i in 0..4 {
            let r2 = xs[i] * xs[i] + ys[i] * ys[i];
            assert_eq!(av[i], ys[i].atan2(xs[i]));
            assert!((gy[i] - xs[i] / r2).abs() < 1e-12);
            assert!((gx[i] + ys[i] / r2).abs() < 1e-12);
        }
        let s = sigmoid(x.as_tensor()).unwrap();
        let vals: Vec<f64> = s.to_vec1().unwrap();
        let g: Vec<f64> = s.sum_all().unwrap().backward().unwrap().get(x.as_tensor()).unwrap().to_vec1().unwrap();
        for (sv, gv) in vals.iter().zip(g) {
            assert!((gv - sv * (1.0 - sv)).abs() < 1e-12);
        }
    }

    #[test]
    fn space_to_depth_is_a_strided_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 6]);
        let w = rand_tensor(&mut rng, &[3, 2, 2, 2]);
        let reference = x.conv2d(&w, 0, 2, 1, 1).unwrap();
        // kernel laid out to match the (c, dy, dx) channel order of space_to_depth
        let w1 = w.reshape((3, 8, 1, 1)).unwrap();
        let ours = conv2d(&space_to_depth(&x).unwrap(), &w1, 0).unwrap();
        let diff = (reference - ours).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[1, 4, 5, 5]);
        let k = rand_tensor(&mut rng, &[4, 3, 3]);
        let reference = x.conv2d(&k.reshape((4, 1, 3, 3)).unwrap(), 1, 1, 1, 4).unwrap();
        let ours = depthwise3x3(&x, &k).unwrap();
        let diff = (reference - ours).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = (rand_tensor(&mut rng, &[3, 7]) * 30.0).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let lse: Vec<f64> = logsumexp_last(&x).unwrap().to_vec1().unwrap();
        let rows: Vec<Vec<f64>> = x.to_vec2().unwrap();
        for (r, l) in rows.iter().zip(lse) {
            let direct = r.iter().map(|v| v.exp()).sum::<f64>().ln();
            assert!((direct - l).abs() < 1e-9);
        }
    }

    /// Central-difference check of `f` against autograd for every input tensor.
    fn check_grads(inputs: &[Tensor], f: impl Fn(&[Tensor]) -> Tensor) {
        let vars: Vec<Var> = inputs.iter().map(|t| Var::from_tensor(t).unwrap()).collect();
        let handles: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
        let grads = f(&handles).backward().unwrap();
        for (vi, var) in vars.iter().enumerate() {
            let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let base: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
            for i in (0..base.len()).step_by(3) {
                let eval = |delta: f64| -> f64 {
                    let mut v = base.clone();
                    v[i] += delta;
                    let mut args = inputs.to_vec();
                    args[vi] = Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap();
                    f(&args).to_scalar().unwrap()
                };
                let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "input {vi}[{i}]: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn group_norm_matches_composite_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = (rand_tensor(&mut rng, &[2, 4, 3, 3]) * 3.0).unwrap();
        let gamma = rand_tensor(&mut rng, &[4]);
        let beta = rand_tensor(&mut rng, &[4]);
        let y = group_norm(&x, 2, &gamma, &beta, 1e-5).unwrap();
        let xg = x.reshape((2, 2, 18)).unwrap();
        let mean = xg.mean_keepdim(2).unwrap();
        let centered = xg.broadcast_sub(&mean).unwrap();
        let var = centered.sqr().unwrap().mean_keepdim(2).unwrap();
        let reference = centered
            .broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .reshape((2, 4, 3, 3))
            .unwrap()
            .broadcast_mul(&gamma.reshape((1, 4, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&beta.reshape((1, 4, 1, 1)).unwrap())
            .unwrap();
        let diff = (reference - y).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
        let probe = rand_tensor(&mut rng, &[2, 4, 3, 3]);
        check_grads(&[x, gamma, beta], |a| {
            group_norm(&a[0], 2, &a[1], &a[2], 1e-5).unwrap().mul(&probe).unwrap().sum_all().unwrap()
        });
    }

    #[test]
    fn silu_and_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = (rand_tensor(&mut rng, &[1, 2, 3, 4]) * 4.0).unwrap();
        let reference = x.silu().unwrap();
        let diff = (reference - silu(&x).unwrap()).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
        let probe = rand_tensor(&mut rng, &[1, 2, 3, 4]);
        check_grads(std::slice::from_ref(&x), |a| silu(&a[0]).unwrap().mul(&probe).unwrap().sum_all().unwrap());

        let up = upsample2x(&x).unwrap();
        assert_eq!(up.dims(), &[1, 2, 6, 8]);
        let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let uv: Vec<f64> = up.flatten_all().unwrap().to_vec1().unwrap();
        for c in 0..2 {
            for r in 0..6 {
                for col in 0..8 {
                    assert_eq!(uv[(c * 6 + r) * 8 + col], xv[(c * 3 + r / 2) * 4 + col / 2]);
                }
            }
        }
        let probe = rand_tensor(&mut rng, &[1, 2, 6, 8]);
        check_grads(&[x], |a| upsample2x(&a[0]).unwrap().mul(&probe).unwrap().sum_all().unwrap());
    }
}
