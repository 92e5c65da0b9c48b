//! Pure forward kernels and the backward helpers the tape builds on.
//!
//! Image tensors are `[N, C, H, W]`. Convolution is cross-correlation with
//! zero padding; pooling has no padding.

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, MatRef};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    /// `(k - 1) / 2` zeros on each side; odd kernels only.
    Same,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> Result<usize> {
        match self {
            Padding::Valid => Ok(0),
            Padding::Same if kernel % 2 == 1 => Ok((kernel - 1) / 2),
            Padding::Same => Err(Error::invalid(
                "conv2d",
                format!("same padding needs an odd kernel, got {kernel}"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Silu,
    Exp,
    Log,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::invalid(op, format!("expected [N, C, H, W], got {shape:?}"))),
    }
}

pub fn unary<T: Real>(kind: Unary, a: &Tensor<T>) -> Result<Tensor<T>> {
    if kind == Unary::Log {
        if let Some(bad) = a.data().iter().find(|v| **v <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive element {bad}"),
            });
        }
    }
    let f = |x: T| match kind {
        Unary::Relu => x.max(T::zero()),
        Unary::Sigmoid => sigmoid(x),
        Unary::Silu => x * sigmoid(x),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Square => x * x,
    };
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

pub fn binary<T: Real>(kind: Binary, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(binary_name(kind), a.shape(), b.shape()));
    }
    if kind == Binary::Div && b.data().contains(&T::zero()) {
        return Err(Error::Domain {
            op: "div",
            detail: "division by zero".into(),
        });
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| apply_binary(kind, x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn binary_scalar<T: Real>(kind: Binary, a: &Tensor<T>, b: T) -> Result<Tensor<T>> {
    if kind == Binary::Div && b == T::zero() {
        return Err(Error::Domain {
            op: "div",
            detail: "division by zero".into(),
        });
    }
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().map(|&x| apply_binary(kind, x, b)).collect(),
    )
}

fn apply_binary<T: Real>(kind: Binary, x: T, y: T) -> T {
    match kind {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
        Binary::Div => x / y,
    }
}

pub(crate) fn binary_name(kind: Binary) -> &'static str {
    match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
        Binary::Div => "div",
    }
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => {
            let mut out = vec![T::zero(); m * n];
            gemm(
                m,
                k,
                n,
                T::one(),
                MatRef::row_major(a.data(), k),
                MatRef::row_major(b.data(), n),
                T::zero(),
                &mut out,
            );
            Tensor::new(vec![m, n], out)
        }
        _ => Err(Error::shape("matmul", a.shape(), b.shape())),
    }
}

/// Shapes of a batched product with optional operand transposes:
/// returns `(batch, m, k, n)`.
pub(crate) fn bmm_dims(
    a: &[usize],
    b: &[usize],
    trans_a: bool,
    trans_b: bool,
) -> Result<(usize, usize, usize, usize)> {
    let (&[ba, a0, a1], &[bb, b0, b1]) = (a, b) else {
        return Err(Error::shape("batched_matmul", a, b));
    };
    let (m, k) = if trans_a { (a1, a0) } else { (a0, a1) };
    let (k2, n) = if trans_b { (b1, b0) } else { (b0, b1) };
    if ba != bb || k != k2 {
        return Err(Error::shape("batched_matmul", a, b));
    }
    Ok((ba, m, k, n))
}

pub(crate) fn view<T>(data: &[T], rows: usize, cols: usize, transposed: bool) -> MatRef<'_, T> {
    // `rows x cols` is the stored layout.
    let _ = rows;
    if transposed {
        MatRef::transposed(data, cols)
    } else {
        MatRef::row_major(data, cols)
    }
}

/// `[B, m, k] x [B, k, n] -> [B, m, n]`, each operand optionally stored transposed.
pub fn batched_matmul<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_a: bool,
    trans_b: bool,
) -> Result<Tensor<T>> {
    let (batch, m, k, n) = bmm_dims(a.shape(), b.shape(), trans_a, trans_b)?;
    let (a0, a1) = (a.shape()[1], a.shape()[2]);
    let (b0, b1) = (b.shape()[1], b.shape()[2]);
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        let ad = &a.data()[i * m * k..(i + 1) * m * k];
        let bd = &b.data()[i * k * n..(i + 1) * k * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            view(ad, a0, a1, trans_a),
            view(bd, b0, b1, trans_b),
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    Tensor::new(vec![batch, m, n], out)
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: Padding,
        depthwise: bool,
    ) -> Result<Self> {
        let op = if depthwise { "depthwise_conv2d" } else { "conv2d" };
        let [n, c, h, w] = dims4(op, input)?;
        let [f, kc, kh, kw] = dims4(op, kernel)?;
        if stride == 0 {
            return Err(Error::invalid(op, "stride must be positive"));
        }
        let expected_kc = if depthwise { 1 } else { c };
        if kc != expected_kc || (depthwise && f != c) {
            return Err(Error::shape(op, input, kernel));
        }
        let pad = padding.amount(kh.max(kw))?;
        if kh != kw && padding == Padding::Same {
            return Err(Error::invalid(op, "same padding needs a square kernel"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::invalid(
                op,
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy as usize >= g.h {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *o = if ix < 0 || ix as usize >= g.w {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `[N, C, H, W]` with `[F, C, kh, kw]`, plus optional bias `[F]`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, padding, false)?;
    if let Some(b) = bias {
        if b.shape() != [g.f] {
            return Err(Error::shape("conv2d", kernel.shape(), b.shape()));
        }
    }
    let (rows, plane) = (g.col_rows(), g.out_plane());
    let in_size = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.f * plane];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane]
    };
    for n in 0..g.n {
        let xn = &input.data()[n * in_size..(n + 1) * in_size];
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, &g, &mut col);
            &col
        };
        let yn = &mut out[n * g.f * plane..(n + 1) * g.f * plane];
        gemm(
            g.f,
            rows,
            plane,
            T::one(),
            MatRef::row_major(kernel.data(), rows),
            MatRef::row_major(cols, plane),
            T::zero(),
            yn,
        );
        if let Some(b) = bias {
            for (f, chunk) in yn.chunks_mut(plane).enumerate() {
                let bf = b.data()[f];
                chunk.iter_mut().for_each(|v| *v += bf);
            }
        }
    }
    Tensor::new(vec![g.n, g.f, g.ho, g.wo], out)
}

/// Input, kernel and bias gradients, each only when requested.
pub type ConvGrads<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub(crate) fn conv2d_backward<T: Real>(
    input: &[T],
    kernel: &[T],
    dy: &[T],
    g: &ConvGeom,
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> ConvGrads<T> {
    let (rows, plane) = (g.col_rows(), g.out_plane());
    let in_size = g.c * g.h * g.w;
    let mut dx = want_input.then(|| vec![T::zero(); g.n * in_size]);
    let mut dk = want_kernel.then(|| vec![T::zero(); g.f * rows]);
    let db = want_bias.then(|| {
        let mut db = vec![T::zero(); g.f];
        for n in 0..g.n {
            for f in 0..g.f {
                let s: T = dy[(n * g.f + f) * plane..(n * g.f + f + 1) * plane]
                    .iter()
                    .copied()
                    .sum();
                db[f] += s;
            }
        }
        db
    });
    let pointwise = g.is_pointwise();
    let mut col = vec![T::zero(); if pointwise { 0 } else { rows * plane }];
    let mut dcol = vec![T::zero(); if pointwise || !want_input { 0 } else { rows * plane }];
    for n in 0..g.n {
        let dyn_ = &dy[n * g.f * plane..(n + 1) * g.f * plane];
        if let Some(dk) = dk.as_mut() {
            let xn = &input[n * in_size..(n + 1) * in_size];
            let cols: &[T] = if pointwise {
                xn
            } else {
                im2col(xn, g, &mut col);
                &col
            };
            gemm(
                g.f,
                plane,
                rows,
                T::one(),
                MatRef::row_major(dyn_, plane),
                MatRef::transposed(cols, plane),
                T::one(),
                dk,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_size..(n + 1) * in_size];
            if pointwise {
                gemm(
                    rows,
                    g.f,
                    plane,
                    T::one(),
                    MatRef::transposed(kernel, rows),
                    MatRef::row_major(dyn_, plane),
                    T::zero(),
                    dxn,
                );
            } else {
                gemm(
                    rows,
                    g.f,
                    plane,
                    T::one(),
                    MatRef::transposed(kernel, rows),
                    MatRef::row_major(dyn_, plane),
                    T::zero(),
                    &mut dcol,
                );
                col2im(&dcol, g, dxn);
            }
        }
    }
    (dx, dk, db)
}

/// Per-channel convolution: `[N, C, H, W]` with kernel `[C, 1, kh, kw]`.
pub fn depthwise_conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, padding, true)?;
    let mut out = vec![T::zero(); g.n * g.c * g.ho * g.wo];
    let x = input.data();
    let k = kernel.data();
    for n in 0..g.n {
        for c in 0..g.c {
            let xc = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
            let kc = &k[c * g.kh * g.kw..][..g.kh * g.kw];
            let yc = &mut out[(n * g.c + c) * g.ho * g.wo..][..g.ho * g.wo];
            for oy in 0..g.ho {
                for i in 0..g.kh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let row = &xc[iy as usize * g.w..][..g.w];
                    for j in 0..g.kw {
                        let kv = kc[i * g.kw + j];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                yc[oy * g.wo + ox] += kv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.c, g.ho, g.wo], out)
}

pub(crate) fn depthwise_backward<T: Real>(
    x: &[T],
    k: &[T],
    dy: &[T],
    g: &ConvGeom,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut dx = want_input.then(|| vec![T::zero(); x.len()]);
    let mut dk = want_kernel.then(|| vec![T::zero(); k.len()]);
    for n in 0..g.n {
        for c in 0..g.c {
            let base_in = (n * g.c + c) * g.h * g.w;
            let base_out = (n * g.c + c) * g.ho * g.wo;
            for oy in 0..g.ho {
                for i in 0..g.kh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for j in 0..g.kw {
                        let kidx = c * g.kh * g.kw + i * g.kw + j;
                        let mut acc = T::zero();
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix < 0 || ix as usize >= g.w {
                                continue;
                            }
                            let xi = base_in + iy as usize * g.w + ix as usize;
                            let d = dy[base_out + oy * g.wo + ox];
                            acc += d * x[xi];
                            if let Some(dx) = dx.as_mut() {
                                dx[xi] += d * k[kidx];
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            dk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// Pooling without padding. For max pooling the second element holds, per
/// output, the flat input index that won (first in row-major order on ties).
pub fn pool2d<T: Real>(
    input: &Tensor<T>,
    kind: PoolKind,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = dims4("pool2d", input.shape())?;
    if window == 0 || stride == 0 {
        return Err(Error::invalid("pool2d", "window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::invalid(
            "pool2d",
            format!("window {window} exceeds input {h}x{w}"),
        ));
    }
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::new();
    let scale = T::one() / T::from_usize(window * window).unwrap();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                match kind {
                    PoolKind::Max => {
                        let mut best = base + oy * stride * w + ox * stride;
                        for i in 0..window {
                            for j in 0..window {
                                let idx = base + (oy * stride + i) * w + ox * stride + j;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                        argmax.push(best);
                        out.push(x[best]);
                    }
                    PoolKind::Avg => {
                        let mut s = T::zero();
                        for i in 0..window {
                            for j in 0..window {
                                s += x[base + (oy * stride + i) * w + ox * stride + j];
                            }
                        }
                        out.push(s * scale);
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, argmax))
}

pub(crate) fn avg_pool_backward<T: Real>(
    in_shape: [usize; 4],
    window: usize,
    stride: usize,
    dy: &[T],
) -> Vec<T> {
    let [n, c, h, w] = in_shape;
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let scale = T::one() / T::from_usize(window * window).unwrap();
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let d = dy[(plane * ho + oy) * wo + ox] * scale;
                for i in 0..window {
                    for j in 0..window {
                        dx[plane * h * w + (oy * stride + i) * w + ox * stride + j] += d;
                    }
                }
            }
        }
    }
    dx
}

/// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4("global_avg_pool", input.shape())?;
    let plane = h * w;
    let scale = T::one() / T::from_usize(plane).unwrap();
    let data = input
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() * scale)
        .collect();
    Tensor::new(vec![n, c], data)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample2d<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4("upsample2d", input.shape())?;
    if factor < 1 {
        return Err(Error::invalid("upsample2d", "factor must be at least 1"));
    }
    let (ho, wo) = (h * factor, w * factor);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        for oy in 0..ho {
            let row = &x[plane * h * w + (oy / factor) * w..][..w];
            for ox in 0..wo {
                out.push(row[ox / factor]);
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub(crate) fn upsample_backward<T: Real>(in_shape: [usize; 4], factor: usize, dy: &[T]) -> Vec<T> {
    let [n, c, h, w] = in_shape;
    let (ho, wo) = (h * factor, w * factor);
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                dx[plane * h * w + (oy / factor) * w + ox / factor] += dy[(plane * ho + oy) * wo + ox];
            }
        }
    }
    dx
}

/// Softmax along the last axis, stabilised by max subtraction.
pub fn softmax_last<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let k = *input.shape().last().expect("tensor has rank >= 1");
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// General axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Real>(input: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let shape = input.shape();
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid("permute", format!("bad permutation {perm:?} for rank {rank}")));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let x = input.data();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..x.len() {
        out.push(x[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `(outer, axis, inner)` extents for an axis of `shape`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn relu_sigmoid_add() {
        let r = unary(Unary::Relu, &t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        let s = unary(Unary::Sigmoid, &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let a = binary(Binary::Add, &t(&[2], &[1.0, 2.0]), &t(&[2], &[3.0, 4.0])).unwrap();
        assert_eq!(a.data(), &[4.0, 6.0]);
    }

    #[test]
    fn binary_shape_and_domain_errors() {
        let e = binary(Binary::Add, &t(&[2], &[1.0, 2.0]), &t(&[3], &[1.0, 2.0, 3.0])).unwrap_err();
        assert!(matches!(e, Error::Shape { lhs, rhs, .. } if lhs == [2] && rhs == [3]));
        assert!(matches!(
            unary(Unary::Log, &t(&[2], &[1.0, 0.0])),
            Err(Error::Domain { .. })
        ));
        assert!(matches!(
            binary(Binary::Div, &t(&[1], &[1.0]), &t(&[1], &[0.0])),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn matmul_examples() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&id, &m).unwrap(), m);
        let r = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        assert!(matmul(&m, &t(&[3, 1], &[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn conv2d_examples() {
        let ones = Tensor::<f64>::ones(vec![1, 1, 3, 3]);
        let k = Tensor::<f64>::ones(vec![1, 1, 2, 2]);
        let out = conv2d(&ones, &k, None, 1, Padding::Valid).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 4.0));

        let x = t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let id = Tensor::<f64>::ones(vec![1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &id, None, 1, Padding::Valid).unwrap(), x);

        let k = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, -1.0]);
        let out = conv2d(&x, &k, None, 1, Padding::Valid).unwrap();
        assert_eq!(out.data(), &[-4.0, -4.0, -4.0, -4.0]);
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let x = Tensor::<f64>::ones(vec![1, 1, 2, 2]);
        let k = Tensor::<f64>::ones(vec![1, 1, 3, 3]);
        assert!(conv2d(&x, &k, None, 1, Padding::Valid).is_err());
        assert!(conv2d(&x, &k, None, 1, Padding::Same).is_ok());
    }

    #[test]
    fn same_padding_preserves_spatial_dims() {
        for k in [1, 3, 5, 7] {
            let x = Tensor::<f32>::ones(vec![1, 2, 9, 7]);
            let kern = Tensor::<f32>::ones(vec![3, 2, k, k]);
            let out = conv2d(&x, &kern, None, 1, Padding::Same).unwrap();
            assert_eq!(out.shape(), &[1, 3, 9, 7], "kernel {k}");
        }
    }

    #[test]
    fn pooling_examples() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pool2d(&x, PoolKind::Max, 2, 2).unwrap().0.data(), &[4.0]);
        assert_eq!(pool2d(&x, PoolKind::Avg, 2, 2).unwrap().0.data(), &[2.5]);
        let tied = t(&[1, 1, 2, 2], &[5.0, 5.0, 0.0, 0.0]);
        assert_eq!(pool2d(&tied, PoolKind::Max, 2, 2).unwrap().1, vec![0]);
        assert!(pool2d(&x, PoolKind::Max, 3, 1).is_err());
        // global average pooling is avg pooling with the whole plane as window
        let g = global_avg_pool(&x).unwrap();
        assert_eq!(g.data(), pool2d(&x, PoolKind::Avg, 2, 1).unwrap().0.data());
    }

    #[test]
    fn upsample_examples() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let up = upsample2d(&x, 2).unwrap();
        assert_eq!(
            up.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        assert_eq!(upsample2d(&x, 1).unwrap(), x);
        assert!(upsample2d(&x, 0).is_err());
        let dx = upsample_backward([1, 1, 2, 2], 2, &[1.0f64; 16]);
        assert_eq!(dx, vec![4.0; 4]);
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::<f64>::from_fn(vec![2, 3, 4], |i| i as f64);
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[a][b][c] = x[b][c][a]
        assert_eq!(p.data()[(2 + 1) * 3 + 2], x.data()[(3 + 2) * 4 + 1]);
        let back = permute(&p, &inverse_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, -1000.0, 0.0, 1000.0]);
        let s = softmax_last(&x).unwrap();
        for row in s.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
