use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use super::gemm::{gemm, MatRef};
use super::ops::{self, Binary, ConvGeom, Padding, PoolKind, Unary};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of recorded operations, used for gradient-check reports and fault
/// injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar,
    Relu,
    Sigmoid,
    Silu,
    Exp,
    Log,
    Square,
    Matmul,
    BatchedMatmul,
    Conv2d,
    DepthwiseConv2d,
    MaxPool2d,
    AvgPool2d,
    GlobalAvgPool,
    Upsample2d,
    Concat,
    Narrow,
    Reshape,
    Permute,
    BiasAdd,
    ScaleChannels,
    ChannelAffine,
    Softmax,
    BatchNorm,
    GroupNorm,
    Dropout,
    SoftmaxCrossEntropy,
    Mse,
    Sum,
    Mean,
}

impl OpKind {
    pub const ALL: [OpKind; 35] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::AddScalar,
        OpKind::MulScalar,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Silu,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Square,
        OpKind::Matmul,
        OpKind::BatchedMatmul,
        OpKind::Conv2d,
        OpKind::DepthwiseConv2d,
        OpKind::MaxPool2d,
        OpKind::AvgPool2d,
        OpKind::GlobalAvgPool,
        OpKind::Upsample2d,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::BiasAdd,
        OpKind::ScaleChannels,
        OpKind::ChannelAffine,
        OpKind::Softmax,
        OpKind::BatchNorm,
        OpKind::GroupNorm,
        OpKind::Dropout,
        OpKind::SoftmaxCrossEntropy,
        OpKind::Mse,
        OpKind::Sum,
        OpKind::Mean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::AddScalar => "add_scalar",
            OpKind::MulScalar => "mul_scalar",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Silu => "silu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Square => "square",
            OpKind::Matmul => "matmul",
            OpKind::BatchedMatmul => "batched_matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::DepthwiseConv2d => "depthwise_conv2d",
            OpKind::MaxPool2d => "max_pool2d",
            OpKind::AvgPool2d => "avg_pool2d",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Upsample2d => "upsample2d",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::BiasAdd => "bias_add",
            OpKind::ScaleChannels => "scale_channels",
            OpKind::ChannelAffine => "channel_affine",
            OpKind::Softmax => "softmax",
            OpKind::BatchNorm => "batch_norm",
            OpKind::GroupNorm => "group_norm",
            OpKind::Dropout => "dropout",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::Mse => "mse",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug)]
struct NormLayout {
    n: usize,
    c: usize,
    plane: usize,
    /// `None` for batch statistics per channel, `Some(g)` for `g` groups per sample.
    groups: Option<usize>,
}

impl NormLayout {
    fn stat_group(&self, n: usize, c: usize) -> usize {
        match self.groups {
            None => c,
            Some(g) => n * g + c / (self.c / g),
        }
    }

    fn stat_groups(&self) -> usize {
        match self.groups {
            None => self.c,
            Some(g) => self.n * g,
        }
    }
}

enum Op<T> {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scalar(Binary, Var, T),
    Matmul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Conv {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        window: usize,
        stride: usize,
    },
    GlobalAvg(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    BiasAdd {
        x: Var,
        bias: Var,
    },
    ScaleChannels {
        x: Var,
        gate: Var,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<T>,
    },
    Softmax(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        layout: NormLayout,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        dlogits: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Var,
        dpred: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Unary(u, _) => match u {
                Unary::Relu => OpKind::Relu,
                Unary::Sigmoid => OpKind::Sigmoid,
                Unary::Silu => OpKind::Silu,
                Unary::Exp => OpKind::Exp,
                Unary::Log => OpKind::Log,
                Unary::Square => OpKind::Square,
            },
            Op::Binary(b, ..) => match b {
                Binary::Add => OpKind::Add,
                Binary::Sub => OpKind::Sub,
                Binary::Mul => OpKind::Mul,
                Binary::Div => OpKind::Div,
            },
            Op::Scalar(b, ..) => match b {
                Binary::Add | Binary::Sub => OpKind::AddScalar,
                Binary::Mul | Binary::Div => OpKind::MulScalar,
            },
            Op::Matmul(..) => OpKind::Matmul,
            Op::Bmm { .. } => OpKind::BatchedMatmul,
            Op::Conv { .. } => OpKind::Conv2d,
            Op::Depthwise { .. } => OpKind::DepthwiseConv2d,
            Op::MaxPool { .. } => OpKind::MaxPool2d,
            Op::AvgPool { .. } => OpKind::AvgPool2d,
            Op::GlobalAvg(_) => OpKind::GlobalAvgPool,
            Op::Upsample { .. } => OpKind::Upsample2d,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::BiasAdd { .. } => OpKind::BiasAdd,
            Op::ScaleChannels { .. } => OpKind::ScaleChannels,
            Op::ChannelAffine { .. } => OpKind::ChannelAffine,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Norm { layout, .. } => {
                if layout.groups.is_some() {
                    OpKind::GroupNorm
                } else {
                    OpKind::BatchNorm
                }
            }
            Op::Dropout { .. } => OpKind::Dropout,
            Op::CrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Mse { .. } => OpKind::Mse,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A linear record of operations. Leaves are pushed with [`Tape::leaf`];
/// every derived value is produced by one of the op methods, which computes
/// the forward result eagerly and stores what the backward rule needs.
pub struct Tape<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
    sign_flip: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            sign_flip: None,
        }
    }

    /// Unique id, used by parameter stores to detect stale bindings.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Negates the backward rule of every `kind` record. Exists to prove the
    /// gradient checker catches broken rules.
    #[doc(hidden)]
    pub fn inject_sign_flip(&mut self, kind: OpKind) {
        self.sign_flip = Some(kind);
    }

    /// Records a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.zero_grad();
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Which branch every piecewise op took: the sign of each relu input and
    /// each max-pool argmax, in recording order. Two evaluations with equal
    /// patterns lie in the same smooth region.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Unary(Unary::Relu, a) => {
                    out.extend(self.nodes[a.0].value.data().iter().map(|&v| (v > T::zero()) as usize));
                }
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, op, rg)
    }

    // ----- elementwise -----

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let out = ops::unary(kind, self.value(a))?;
        Ok(self.record(out, Op::Unary(kind, a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Silu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let out = ops::binary(kind, self.value(a), self.value(b))?;
        Ok(self.record(out, Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// `a <kind> s` with a scalar right-hand side.
    pub fn scalar(&mut self, kind: Binary, a: Var, s: T) -> Result<Var> {
        let out = ops::binary_scalar(kind, self.value(a), s)?;
        Ok(self.record(out, Op::Scalar(kind, a, s), &[a]))
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.scalar(Binary::Mul, a, s)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.scalar(Binary::Add, a, s)
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.record(out, Op::Matmul(a, b), &[a, b]))
    }

    pub fn batched_matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let out = ops::batched_matmul(self.value(a), self.value(b), trans_a, trans_b)?;
        Ok(self.record(
            out,
            Op::Bmm {
                a,
                b,
                trans_a,
                trans_b,
            },
            &[a, b],
        ))
    }

    /// `x [N, K] . w [K, M] + b [M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.bias_add(y, b),
            None => Ok(y),
        }
    }

    // ----- spatial -----

    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), stride, padding, false)?;
        let out = ops::conv2d(
            self.value(x),
            self.value(k),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut inputs = vec![x, k];
        inputs.extend(bias);
        Ok(self.record(out, Op::Conv { x, k, bias, geom }, &inputs))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), stride, padding, true)?;
        let out = ops::depthwise_conv2d(self.value(x), self.value(k), stride, padding)?;
        Ok(self.record(out, Op::Depthwise { x, k, geom }, &[x, k]))
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = ops::pool2d(self.value(x), kind, window, stride)?;
        let op = match kind {
            PoolKind::Max => Op::MaxPool { x, argmax },
            PoolKind::Avg => Op::AvgPool { x, window, stride },
        };
        Ok(self.record(out, op, &[x]))
    }

    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        self.pool2d(x, PoolKind::Max, window, stride)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        Ok(self.record(out, Op::GlobalAvg(x), &[x]))
    }

    pub fn upsample2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = ops::upsample2d(self.value(x), factor)?;
        Ok(self.record(out, Op::Upsample { x, factor }, &[x]))
    }

    // ----- shape -----

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "nothing to concatenate"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let outer = numel(&base[..axis]);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let (_, ax, inner) = ops::axis_split(self.shape(p), axis);
                let chunk = ax * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(out_shape, data)?;
        Ok(self.record(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, ax, inner) = ops::axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * ax + start) * inner..(o * ax + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.record(out, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        Ok(self.record(out, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = ops::permute(self.value(x), perm)?;
        Ok(self.record(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    // ----- broadcasts -----

    /// Adds `bias [C]` along axis 1 of `x [N, C, ...]`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias);
        if xs.len() < 2 || bs != [xs[1]] {
            return Err(Error::shape("bias_add", &xs, bs));
        }
        let (outer, c, inner) = ops::axis_split(&xs, 1);
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for (ci, &bv) in b.iter().enumerate() {
                data[(o * c + ci) * inner..(o * c + ci + 1) * inner]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
        let out = Tensor::new(xs, data)?;
        Ok(self.record(out, Op::BiasAdd { x, bias }, &[x, bias]))
    }

    /// `x [N, C, ...] * gate [N, C]`, broadcasting over trailing axes.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(gate);
        if xs.len() < 2 || gs != [xs[0], xs[1]] {
            return Err(Error::shape("scale_channels", &xs, gs));
        }
        let inner = numel(&xs[2..]);
        let g = self.value(gate).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, &gv) in g.iter().enumerate() {
            data[i * inner..(i + 1) * inner].iter_mut().for_each(|v| *v *= gv);
        }
        let out = Tensor::new(xs, data)?;
        Ok(self.record(out, Op::ScaleChannels { x, gate }, &[x, gate]))
    }

    /// `x * scale[c] + shift[c]` with constant per-channel coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[T], shift: &[T]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || scale.len() != xs[1] || shift.len() != xs[1] {
            return Err(Error::shape("channel_affine", &xs, &[scale.len(), shift.len()]));
        }
        let (outer, c, inner) = ops::axis_split(&xs, 1);
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for ci in 0..c {
                data[(o * c + ci) * inner..(o * c + ci + 1) * inner]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale[ci] + shift[ci]);
            }
        }
        let out = Tensor::new(xs, data)?;
        Ok(self.record(
            out,
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
            },
            &[x],
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_last(self.value(x))?;
        Ok(self.record(out, Op::Softmax(x), &[x]))
    }

    // ----- normalization -----

    fn norm_impl(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: Option<usize>,
        fixed: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xs = self.shape(x).to_vec();
        let op_name = if groups.is_some() { "group_norm" } else { "batch_norm" };
        if xs.len() < 2 {
            return Err(Error::invalid(op_name, format!("needs [N, C, ...], got {xs:?}")));
        }
        let (n, c, plane) = (xs[0], xs[1], numel(&xs[2..]));
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(op_name, &xs, self.shape(gamma)));
        }
        if let Some(g) = groups {
            if g == 0 || c % g != 0 {
                return Err(Error::invalid(op_name, format!("{c} channels not divisible into {g} groups")));
            }
        }
        let layout = NormLayout { n, c, plane, groups };
        let ng = layout.stat_groups();
        let xd = self.value(x).data();
        let (mean, var) = match fixed {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape(op_name, &[c], &[m.len()]));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let mut sum = vec![T::zero(); ng];
                let mut count = vec![0usize; ng];
                for ni in 0..n {
                    for ci in 0..c {
                        let s = layout.stat_group(ni, ci);
                        let p = &xd[(ni * c + ci) * plane..][..plane];
                        sum[s] += p.iter().copied().sum::<T>();
                        count[s] += plane;
                    }
                }
                let mean: Vec<T> = sum
                    .iter()
                    .zip(&count)
                    .map(|(&s, &k)| s / T::from_usize(k).unwrap())
                    .collect();
                let mut sq = vec![T::zero(); ng];
                for ni in 0..n {
                    for ci in 0..c {
                        let s = layout.stat_group(ni, ci);
                        let m = mean[s];
                        let p = &xd[(ni * c + ci) * plane..][..plane];
                        sq[s] += p.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                    }
                }
                let var = sq
                    .iter()
                    .zip(&count)
                    .map(|(&s, &k)| s / T::from_usize(k).unwrap())
                    .collect();
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let s = layout.stat_group(ni, ci);
                let base = (ni * c + ci) * plane;
                for i in base..base + plane {
                    let h = (xd[i] - mean[s]) * inv_std[s];
                    xhat[i] = h;
                    out[i] = gd[ci] * h + bd[ci];
                }
            }
        }
        let out = Tensor::new(xs, out)?;
        let v = self.record(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
                batch_stats: fixed.is_none(),
            },
            &[x, gamma, beta],
        );
        Ok((v, mean, var))
    }

    /// Batch normalization with batch statistics. Returns the output and the
    /// per-channel batch mean and (biased) variance.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        self.norm_impl(x, gamma, beta, None, None, eps)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        Ok(self.norm_impl(x, gamma, beta, None, Some((mean, var)), eps)?.0)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Result<Var> {
        Ok(self.norm_impl(x, gamma, beta, Some(groups), None, eps)?.0)
    }

    /// Multiplies by a precomputed dropout mask (zeros and `1 / (1 - p)`).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::shape("dropout", xv.shape(), &[mask.len()]));
        }
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.record(out, Op::Dropout { x, mask }, &[x]))
    }

    // ----- losses and reductions -----

    /// Mean over the batch of `-log softmax(logits)[label]`. With class
    /// weights the mean is weighted: `sum(w[y] * l) / sum(w[y])`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: Option<&[T]>,
    ) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let &[n, k] = ls.as_slice() else {
            return Err(Error::invalid("softmax_cross_entropy", format!("logits must be [N, K], got {ls:?}")));
        };
        if labels.len() != n {
            return Err(Error::shape("softmax_cross_entropy", &ls, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        if let Some(w) = class_weights {
            if w.len() != k {
                return Err(Error::shape("softmax_cross_entropy", &[k], &[w.len()]));
            }
        }
        let probs = ops::softmax_last(self.value(logits))?;
        let x = self.value(logits).data();
        let weight = |l: usize| class_weights.map_or(T::one(), |w| w[l]);
        let total_w: T = labels.iter().map(|&l| weight(l)).sum();
        if total_w <= T::zero() {
            return Err(Error::invalid("softmax_cross_entropy", "class weights sum to zero"));
        }
        let mut loss = T::zero();
        let mut dlogits = probs.into_data();
        for (i, &l) in labels.iter().enumerate() {
            let row = &x[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            let w = weight(l);
            loss += w * (lse - row[l]);
            let drow = &mut dlogits[i * k..(i + 1) * k];
            drow[l] -= T::one();
            drow.iter_mut().for_each(|d| *d = *d * w / total_w);
        }
        let out = Tensor::scalar(loss / total_w);
        Ok(self.record(out, Op::CrossEntropy { logits, dlogits }, &[logits]))
    }

    /// Mean squared error, optionally restricted to elements where `mask` is true.
    pub fn mse(&mut self, pred: Var, target: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape("mse", p.shape(), t.shape()));
        }
        if let Some(m) = mask {
            if m.len() != p.len() {
                return Err(Error::shape("mse", p.shape(), &[m.len()]));
            }
        }
        let selected = |i: usize| mask.is_none_or(|m| m[i]);
        let count = (0..p.len()).filter(|&i| selected(i)).count();
        if count == 0 {
            return Err(Error::invalid("mse", "no elements selected by the mask"));
        }
        let inv = T::one() / T::from_usize(count).unwrap();
        let two = T::from_f64_lossy(2.0);
        let mut sum = T::zero();
        let mut dpred = vec![T::zero(); p.len()];
        for (i, (&a, &b)) in p.data().iter().zip(t.data()).enumerate() {
            if selected(i) {
                let d = a - b;
                sum += d * d;
                dpred[i] = two * d * inv;
            }
        }
        let out = Tensor::scalar(sum * inv);
        Ok(self.record(out, Op::Mse { pred, target, dpred }, &[pred, target]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        Ok(self.record(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap();
        Ok(self.record(Tensor::scalar(s), Op::Mean(x), &[x]))
    }

    // ----- backward -----

    /// Accumulates d`loss`/d`leaf` into every gradient-tracking leaf. Leaves
    /// that do not influence the loss receive zeros. Calling this twice
    /// without resetting accumulates twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {shape:?}"),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            let flip = self.sign_flip.is_some() && self.nodes[i].op.kind() == self.sign_flip;
            for (v, mut contrib) in self.vjp(i, &g) {
                if flip {
                    contrib.iter_mut().for_each(|c| *c = -*c);
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.value.grad().is_none() {
                let zeros = vec![T::zero(); node.value.len()];
                node.value.accumulate_grad(&zeros);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Vector-Jacobian products of record `i` for each input needing a gradient.
    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        let mut emit = |v: Var, f: &dyn Fn() -> Vec<T>| {
            if self.needs(v) {
                out.push((v, f()));
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Unary(kind, a) => emit(a, &|| {
                let x = self.data(a);
                let y = node.value.data();
                match kind {
                    Unary::Relu => map3(g, x, y, |g, x, _| if x > T::zero() { g } else { T::zero() }),
                    Unary::Sigmoid => map3(g, x, y, |g, _, y| g * y * (T::one() - y)),
                    Unary::Silu => map3(g, x, y, |g, x, _| {
                        let s = ops::sigmoid(x);
                        g * (s + x * s * (T::one() - s))
                    }),
                    Unary::Exp => map3(g, x, y, |g, _, y| g * y),
                    Unary::Log => map3(g, x, y, |g, x, _| g / x),
                    Unary::Square => map3(g, x, y, |g, x, _| g * (x + x)),
                }
            }),
            &Op::Binary(kind, a, b) => {
                let (x, y) = (self.data(a), self.data(b));
                emit(a, &|| match kind {
                    Binary::Add | Binary::Sub => g.to_vec(),
                    Binary::Mul => map3(g, y, y, |g, y, _| g * y),
                    Binary::Div => map3(g, y, y, |g, y, _| g / y),
                });
                emit(b, &|| match kind {
                    Binary::Add => g.to_vec(),
                    Binary::Sub => g.iter().map(|&g| -g).collect(),
                    Binary::Mul => map3(g, x, x, |g, x, _| g * x),
                    Binary::Div => map3(g, x, y, |g, x, y| -g * x / (y * y)),
                });
            }
            &Op::Scalar(kind, a, s) => emit(a, &|| match kind {
                Binary::Add | Binary::Sub => g.to_vec(),
                Binary::Mul => g.iter().map(|&g| g * s).collect(),
                Binary::Div => g.iter().map(|&g| g / s).collect(),
            }),
            &Op::Matmul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                emit(a, &|| {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        MatRef::row_major(g, n),
                        MatRef::transposed(self.data(b), n),
                        T::zero(),
                        &mut da,
                    );
                    da
                });
                emit(b, &|| {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        MatRef::transposed(self.data(a), k),
                        MatRef::row_major(g, n),
                        T::zero(),
                        &mut db,
                    );
                    db
                });
            }
            &Op::Bmm {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let (batch, m, k, n) =
                    ops::bmm_dims(&sa, &sb, trans_a, trans_b).expect("checked in forward");
                let opa = |i: usize| ops::view(&self.data(a)[i * m * k..(i + 1) * m * k], sa[1], sa[2], trans_a);
                let opb = |i: usize| ops::view(&self.data(b)[i * k * n..(i + 1) * k * n], sb[1], sb[2], trans_b);
                let gi = |i: usize| MatRef::row_major(&g[i * m * n..(i + 1) * m * n], n);
                emit(a, &|| {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let dst = &mut da[i * m * k..(i + 1) * m * k];
                        if trans_a {
                            // stored [k, m]: op(B) . G^T
                            gemm(k, n, m, T::one(), opb(i), gi(i).t(), T::zero(), dst);
                        } else {
                            gemm(m, n, k, T::one(), gi(i), opb(i).t(), T::zero(), dst);
                        }
                    }
                    da
                });
                emit(b, &|| {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // stored [n, k]: G^T . op(A)
                            gemm(n, m, k, T::one(), gi(i).t(), opa(i), T::zero(), dst);
                        } else {
                            gemm(k, m, n, T::one(), opa(i).t(), gi(i), T::zero(), dst);
                        }
                    }
                    db
                });
            }
            &Op::Conv { x, k, bias, geom } => {
                let (dx, dk, db) = ops::conv2d_backward(
                    self.data(x),
                    self.data(k),
                    g,
                    &geom,
                    self.needs(x),
                    self.needs(k),
                    bias.is_some_and(|b| self.needs(b)),
                );
                out.extend(dx.map(|d| (x, d)));
                out.extend(dk.map(|d| (k, d)));
                if let (Some(b), Some(d)) = (bias, db) {
                    out.push((b, d));
                }
            }
            &Op::Depthwise { x, k, geom } => {
                let (dx, dk) = ops::depthwise_backward(
                    self.data(x),
                    self.data(k),
                    g,
                    &geom,
                    self.needs(x),
                    self.needs(k),
                );
                out.extend(dx.map(|d| (x, d)));
                out.extend(dk.map(|d| (k, d)));
            }
            Op::MaxPool { x, argmax } => emit(*x, &|| {
                let mut dx = vec![T::zero(); self.data(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                dx
            }),
            &Op::AvgPool { x, window, stride } => emit(x, &|| {
                let s = ops::dims4("avg_pool2d", self.shape(x)).expect("checked in forward");
                ops::avg_pool_backward(s, window, stride, g)
            }),
            &Op::GlobalAvg(x) => emit(x, &|| {
                let s = self.shape(x);
                let plane = s[2] * s[3];
                let scale = T::one() / T::from_usize(plane).unwrap();
                g.iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * scale, plane))
                    .collect()
            }),
            &Op::Upsample { x, factor } => emit(x, &|| {
                let s = ops::dims4("upsample2d", self.shape(x)).expect("checked in forward");
                ops::upsample_backward(s, factor, g)
            }),
            Op::Concat { parts, axis } => {
                let outer = numel(&self.shape(parts[0])[..*axis]);
                let out_chunk = g.len() / outer;
                let mut offset = 0;
                for &p in parts {
                    let (_, ax, inner) = ops::axis_split(self.shape(p), *axis);
                    let chunk = ax * inner;
                    let start = offset;
                    emit(p, &|| {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * out_chunk + start..o * out_chunk + start + chunk]);
                        }
                        d
                    });
                    offset += chunk;
                }
            }
            &Op::Narrow { x, axis, start } => emit(x, &|| {
                let (outer, ax, inner) = ops::axis_split(self.shape(x), axis);
                let len = node.value.shape()[axis];
                let mut dx = vec![T::zero(); outer * ax * inner];
                for o in 0..outer {
                    dx[(o * ax + start) * inner..(o * ax + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                dx
            }),
            &Op::Reshape(x) => emit(x, &|| g.to_vec()),
            Op::Permute { x, perm } => emit(*x, &|| {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad shape");
                ops::permute(&gt, &ops::inverse_permutation(perm))
                    .expect("valid permutation")
                    .into_data()
            }),
            &Op::BiasAdd { x, bias } => {
                emit(x, &|| g.to_vec());
                emit(bias, &|| {
                    let (outer, c, inner) = ops::axis_split(self.shape(x), 1);
                    let mut db = vec![T::zero(); c];
                    for o in 0..outer {
                        for (ci, d) in db.iter_mut().enumerate() {
                            *d += g[(o * c + ci) * inner..(o * c + ci + 1) * inner]
                                .iter()
                                .copied()
                                .sum::<T>();
                        }
                    }
                    db
                });
            }
            &Op::ScaleChannels { x, gate } => {
                let inner = numel(&self.shape(x)[2..]);
                emit(x, &|| {
                    let gd = self.data(gate);
                    g.iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * gd[i / inner])
                        .collect()
                });
                emit(gate, &|| {
                    let xd = self.data(x);
                    (0..self.data(gate).len())
                        .map(|j| {
                            (j * inner..(j + 1) * inner)
                                .map(|i| g[i] * xd[i])
                                .sum::<T>()
                        })
                        .collect()
                });
            }
            Op::ChannelAffine { x, scale } => emit(*x, &|| {
                let (_, c, inner) = ops::axis_split(self.shape(*x), 1);
                g.iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * scale[(i / inner) % c])
                    .collect()
            }),
            &Op::Softmax(x) => emit(x, &|| {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                dx
            }),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
                batch_stats,
            } => {
                let NormLayout { n, c, plane, .. } = *layout;
                emit(*gamma, &|| {
                    let mut dg = vec![T::zero(); c];
                    for ni in 0..n {
                        for (ci, d) in dg.iter_mut().enumerate() {
                            let base = (ni * c + ci) * plane;
                            *d += (base..base + plane).map(|i| g[i] * xhat[i]).sum::<T>();
                        }
                    }
                    dg
                });
                emit(*beta, &|| {
                    let mut db = vec![T::zero(); c];
                    for ni in 0..n {
                        for (ci, d) in db.iter_mut().enumerate() {
                            let base = (ni * c + ci) * plane;
                            *d += g[base..base + plane].iter().copied().sum::<T>();
                        }
                    }
                    db
                });
                emit(*x, &|| {
                    let gd = self.data(*gamma);
                    let ng = layout.stat_groups();
                    let mut dx = vec![T::zero(); g.len()];
                    if !batch_stats {
                        for ni in 0..n {
                            for ci in 0..c {
                                let s = layout.stat_group(ni, ci);
                                let base = (ni * c + ci) * plane;
                                for i in base..base + plane {
                                    dx[i] = g[i] * gd[ci] * inv_std[s];
                                }
                            }
                        }
                        return dx;
                    }
                    let mut sum1 = vec![T::zero(); ng];
                    let mut sum2 = vec![T::zero(); ng];
                    let mut count = vec![0usize; ng];
                    for ni in 0..n {
                        for ci in 0..c {
                            let s = layout.stat_group(ni, ci);
                            let base = (ni * c + ci) * plane;
                            for i in base..base + plane {
                                let dh = g[i] * gd[ci];
                                sum1[s] += dh;
                                sum2[s] += dh * xhat[i];
                            }
                            count[s] += plane;
                        }
                    }
                    for ni in 0..n {
                        for ci in 0..c {
                            let s = layout.stat_group(ni, ci);
                            let m = T::from_usize(count[s]).unwrap();
                            let (mean1, mean2) = (sum1[s] / m, sum2[s] / m);
                            let base = (ni * c + ci) * plane;
                            for i in base..base + plane {
                                let dh = g[i] * gd[ci];
                                dx[i] = inv_std[s] * (dh - mean1 - xhat[i] * mean2);
                            }
                        }
                    }
                    dx
                });
            }
            Op::Dropout { x, mask } => emit(*x, &|| g.iter().zip(mask).map(|(&a, &m)| a * m).collect()),
            Op::CrossEntropy { logits, dlogits } => {
                emit(*logits, &|| dlogits.iter().map(|&d| d * g[0]).collect())
            }
            Op::Mse { pred, target, dpred } => {
                emit(*pred, &|| dpred.iter().map(|&d| d * g[0]).collect());
                emit(*target, &|| dpred.iter().map(|&d| -d * g[0]).collect());
            }
            &Op::Sum(x) => emit(x, &|| vec![g[0]; self.data(x).len()]),
            &Op::Mean(x) => emit(x, &|| {
                let len = self.data(x).len();
                vec![g[0] / T::from_usize(len).unwrap(); len]
            }),
        }
        out
    }
}

fn map3<T: Real>(g: &[T], a: &[T], b: &[T], f: impl Fn(T, T, T) -> T) -> Vec<T> {
    g.iter()
        .zip(a)
        .zip(b)
        .map(|((&g, &a), &b)| f(g, a, b))
        .collect()
}
