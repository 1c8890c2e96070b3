use super::conv::ConvSaved;
use super::{gemm, numel, Element, MatRef, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Exp,
    Log,
    Neg,
    Scale(f64),
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Tanh,
    /// `ln(1 + e^x)`, evaluated without overflow.
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

pub(crate) enum Op<T: Element> {
    Unary {
        kind: UnaryOp,
        x: Tensor<T>,
    },
    Binary {
        kind: BinaryOp,
        a: Tensor<T>,
        b: Tensor<T>,
    },
    MatMul {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    Transpose {
        x: Tensor<T>,
    },
    Conv2d(ConvSaved<T>),
    Reduce {
        kind: ReduceOp,
        x: Tensor<T>,
        // output slot of every input element
        slots: Vec<usize>,
        count: usize,
        argmax: Option<Vec<usize>>,
    },
    Softmax {
        x: Tensor<T>,
        axis: usize,
    },
    LogSoftmax {
        x: Tensor<T>,
        axis: usize,
    },
    Reshape {
        x: Tensor<T>,
    },
    Concat {
        parts: Vec<Tensor<T>>,
        axis: usize,
    },
    Slice {
        x: Tensor<T>,
        axis: usize,
        start: usize,
    },
    Upsample {
        x: Tensor<T>,
        factor: usize,
    },
}

impl<T: Element> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Unary { kind, .. } => match kind {
                UnaryOp::Exp => "exp",
                UnaryOp::Log => "log",
                UnaryOp::Neg => "neg",
                UnaryOp::Scale(_) => "scale",
                UnaryOp::Sigmoid => "sigmoid",
                UnaryOp::Relu => "relu",
                UnaryOp::LeakyRelu(_) => "leaky_relu",
                UnaryOp::Tanh => "tanh",
                UnaryOp::Softplus => "softplus",
            },
            Op::Binary { kind, .. } => match kind {
                BinaryOp::Add => "add",
                BinaryOp::Sub => "sub",
                BinaryOp::Mul => "mul",
                BinaryOp::Div => "div",
            },
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Conv2d(_) => "conv2d",
            Op::Reduce { kind, .. } => match kind {
                ReduceOp::Sum => "sum",
                ReduceOp::Mean => "mean",
                ReduceOp::Max => "max",
            },
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Upsample { .. } => "upsample_bilinear",
        }
    }

    pub fn inputs(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Unary { x, .. }
            | Op::Transpose { x }
            | Op::Reduce { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Reshape { x }
            | Op::Slice { x, .. }
            | Op::Upsample { x, .. } => vec![x],
            Op::Binary { a, b, .. } | Op::MatMul { a, b } => vec![a, b],
            Op::Conv2d(saved) => saved.inputs(),
            Op::Concat { parts, .. } => parts.iter().collect(),
        }
    }

    /// Gradients for every input that requires one.
    pub fn backward(&self, out: &Tensor<T>, g: &[T]) -> Vec<(Tensor<T>, Vec<T>)> {
        let mut grads = Vec::new();
        match self {
            Op::Unary { kind, x } => {
                if x.requires_grad() {
                    grads.push((x.clone(), unary_grad(*kind, x.data(), out.data(), g)));
                }
            }
            Op::Binary { kind, a, b } => binary_grad(*kind, a, b, out.shape(), g, &mut grads),
            Op::MatMul { a, b } => matmul_grad(a, b, g, &mut grads),
            Op::Transpose { x } => {
                if x.requires_grad() {
                    let (batch, rows, cols) = last_two(x.shape());
                    // out is (cols x rows); transposing back restores x's layout.
                    grads.push((x.clone(), transpose_buf(g, batch, cols, rows)));
                }
            }
            Op::Conv2d(saved) => saved.backward(g, &mut grads),
            Op::Reduce {
                kind,
                x,
                slots,
                count,
                argmax,
            } => {
                if x.requires_grad() {
                    let gx = match kind {
                        ReduceOp::Sum => slots.iter().map(|&s| g[s]).collect(),
                        ReduceOp::Mean => {
                            let inv = T::one() / T::from_usize(*count).expect("count");
                            slots.iter().map(|&s| g[s] * inv).collect()
                        }
                        ReduceOp::Max => {
                            let mut gx = vec![T::zero(); x.numel()];
                            for (o, &i) in argmax.as_ref().expect("argmax").iter().enumerate() {
                                gx[i] = gx[i] + g[o];
                            }
                            gx
                        }
                    };
                    grads.push((x.clone(), gx));
                }
            }
            Op::Softmax { x, axis } => {
                if x.requires_grad() {
                    let (outer, len, inner) = split_axis(x.shape(), *axis);
                    let y = out.data();
                    let mut gx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = T::zero();
                            for k in 0..len {
                                let idx = base + k * inner;
                                dot = dot + g[idx] * y[idx];
                            }
                            for k in 0..len {
                                let idx = base + k * inner;
                                gx[idx] = y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    grads.push((x.clone(), gx));
                }
            }
            Op::LogSoftmax { x, axis } => {
                if x.requires_grad() {
                    let (outer, len, inner) = split_axis(x.shape(), *axis);
                    let y = out.data();
                    let mut gx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut total = T::zero();
                            for k in 0..len {
                                total = total + g[base + k * inner];
                            }
                            for k in 0..len {
                                let idx = base + k * inner;
                                gx[idx] = g[idx] - y[idx].exp() * total;
                            }
                        }
                    }
                    grads.push((x.clone(), gx));
                }
            }
            Op::Reshape { x } => {
                if x.requires_grad() {
                    grads.push((x.clone(), g.to_vec()));
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = out.shape();
                let outer = numel(&out_shape[..*axis]);
                let inner = numel(&out_shape[*axis + 1..]);
                let total = out_shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let len = p.shape()[*axis];
                    if p.requires_grad() {
                        let mut gp = Vec::with_capacity(p.numel());
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[start..start + len * inner]);
                        }
                        grads.push((p.clone(), gp));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if x.requires_grad() {
                    let shape = x.shape();
                    let outer = numel(&shape[..*axis]);
                    let inner = numel(&shape[*axis + 1..]);
                    let total = shape[*axis];
                    let len = out.shape()[*axis];
                    let mut gx = vec![T::zero(); x.numel()];
                    for o in 0..outer {
                        let dst = (o * total + start) * inner;
                        let src = o * len * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    grads.push((x.clone(), gx));
                }
            }
            Op::Upsample { x, factor } => {
                if x.requires_grad() {
                    grads.push((x.clone(), upsample_backward(x.shape(), *factor, g)));
                }
            }
        }
        grads
    }
}

fn c<T: Element>(v: f64) -> T {
    T::from_f64_lossy(v)
}

fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Element>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

fn unary_forward<T: Element>(kind: UnaryOp, x: &[T]) -> Vec<T> {
    match kind {
        UnaryOp::Exp => x.iter().map(|v| v.exp()).collect(),
        UnaryOp::Log => x.iter().map(|v| v.ln()).collect(),
        UnaryOp::Neg => x.iter().map(|&v| -v).collect(),
        UnaryOp::Scale(s) => {
            let s: T = c(s);
            x.iter().map(|&v| v * s).collect()
        }
        UnaryOp::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
        UnaryOp::Relu => x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
        UnaryOp::LeakyRelu(slope) => {
            let s: T = c(slope);
            x.iter().map(|&v| if v > T::zero() { v } else { v * s }).collect()
        }
        UnaryOp::Tanh => x.iter().map(|v| v.tanh()).collect(),
        UnaryOp::Softplus => x.iter().map(|&v| softplus(v)).collect(),
    }
}

fn unary_grad<T: Element>(kind: UnaryOp, x: &[T], y: &[T], g: &[T]) -> Vec<T> {
    let one = T::one();
    match kind {
        UnaryOp::Exp => g.iter().zip(y).map(|(&g, &y)| g * y).collect(),
        UnaryOp::Log => g.iter().zip(x).map(|(&g, &x)| g / x).collect(),
        UnaryOp::Neg => g.iter().map(|&g| -g).collect(),
        UnaryOp::Scale(s) => {
            let s: T = c(s);
            g.iter().map(|&g| g * s).collect()
        }
        UnaryOp::Sigmoid => g.iter().zip(y).map(|(&g, &y)| g * y * (one - y)).collect(),
        UnaryOp::Relu => g
            .iter()
            .zip(x)
            .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
            .collect(),
        UnaryOp::LeakyRelu(slope) => {
            let s: T = c(slope);
            g.iter()
                .zip(x)
                .map(|(&g, &x)| if x > T::zero() { g } else { g * s })
                .collect()
        }
        UnaryOp::Tanh => g.iter().zip(y).map(|(&g, &y)| g * (one - y * y)).collect(),
        UnaryOp::Softplus => g.iter().zip(x).map(|(&g, &x)| g * sigmoid(x)).collect(),
    }
}

/// Numpy-style broadcast of two shapes (ranks are left-padded with ones).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            (x, y) if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::shape(op, a, b)),
        })
        .collect()
}

/// Offset into `src` for every flat index of `out`, where `src` broadcasts to `out`.
pub(crate) fn broadcast_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut padded = vec![1; rank - src.len()];
    padded.extend_from_slice(src);
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    let total = numel(out);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn reduce_to<T: Element>(g: &[T], offsets: Option<&[usize]>, len: usize) -> Vec<T> {
    match offsets {
        None => g.to_vec(),
        Some(offs) => {
            let mut out = vec![T::zero(); len];
            for (&o, &v) in offs.iter().zip(g) {
                out[o] = out[o] + v;
            }
            out
        }
    }
}

fn binary_grad<T: Element>(
    kind: BinaryOp,
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    g: &[T],
    grads: &mut Vec<(Tensor<T>, Vec<T>)>,
) {
    let oa = (a.shape() != out_shape).then(|| broadcast_offsets(a.shape(), out_shape));
    let ob = (b.shape() != out_shape).then(|| broadcast_offsets(b.shape(), out_shape));
    let at = |i: usize| a.data()[oa.as_ref().map_or(i, |o| o[i])];
    let bt = |i: usize| b.data()[ob.as_ref().map_or(i, |o| o[i])];
    if a.requires_grad() {
        let ga: Vec<T> = match kind {
            BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
            BinaryOp::Mul => g.iter().enumerate().map(|(i, &g)| g * bt(i)).collect(),
            BinaryOp::Div => g.iter().enumerate().map(|(i, &g)| g / bt(i)).collect(),
        };
        grads.push((a.clone(), reduce_to(&ga, oa.as_deref(), a.numel())));
    }
    if b.requires_grad() {
        let gb: Vec<T> = match kind {
            BinaryOp::Add => g.to_vec(),
            BinaryOp::Sub => g.iter().map(|&g| -g).collect(),
            BinaryOp::Mul => g.iter().enumerate().map(|(i, &g)| g * at(i)).collect(),
            BinaryOp::Div => g
                .iter()
                .enumerate()
                .map(|(i, &g)| {
                    let bv = bt(i);
                    -g * at(i) / (bv * bv)
                })
                .collect(),
        };
        grads.push((b.clone(), reduce_to(&gb, ob.as_deref(), b.numel())));
    }
}

/// (batch, rows, cols) of a rank-2 or rank-3 tensor.
fn last_two(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    (numel(&shape[..r - 2]), shape[r - 2], shape[r - 1])
}

fn transpose_buf<T: Element>(x: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..batch {
        let base = bi * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[base + c * rows + r] = x[base + r * cols + c];
            }
        }
    }
    out
}

fn matmul_grad<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &[T],
    grads: &mut Vec<(Tensor<T>, Vec<T>)>,
) {
    let (batch, m, k) = last_two(a.shape());
    let n = b.shape()[b.rank() - 1];
    if a.requires_grad() {
        // dA = dC * B^T
        let mut ga = vec![T::zero(); a.numel()];
        for bi in 0..batch {
            gemm(
                m,
                n,
                k,
                MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], n),
                MatRef::transposed(&b.data()[bi * k * n..(bi + 1) * k * n], n),
                T::zero(),
                &mut ga[bi * m * k..(bi + 1) * m * k],
            );
        }
        grads.push((a.clone(), ga));
    }
    if b.requires_grad() {
        // dB = A^T * dC
        let mut gb = vec![T::zero(); b.numel()];
        for bi in 0..batch {
            gemm(
                k,
                m,
                n,
                MatRef::transposed(&a.data()[bi * m * k..(bi + 1) * m * k], k),
                MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], n),
                T::zero(),
                &mut gb[bi * k * n..(bi + 1) * k * n],
            );
        }
        grads.push((b.clone(), gb));
    }
}

/// (outer, len, inner) decomposition around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// Source rows and weights for one output coordinate (align_corners = false).
fn bilinear_taps(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = src - i0 as f64;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

fn upsample_forward<T: Element>(x: &[T], shape: &[usize], factor: usize) -> Vec<T> {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(oh, h, factor);
    let tx = bilinear_taps(ow, w, factor);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1): (T, T) = (c(wy0), c(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1): (T, T) = (c(wx0), c(wx1));
                dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    out
}

fn upsample_backward<T: Element>(shape: &[usize], factor: usize, g: &[T]) -> Vec<T> {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(oh, h, factor);
    let tx = bilinear_taps(ow, w, factor);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1): (T, T) = (c(wy0), c(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1): (T, T) = (c(wx0), c(wx1));
                let gv = src[oy * ow + ox];
                dst[y0 * w + x0] = dst[y0 * w + x0] + gv * wy0 * wx0;
                dst[y0 * w + x1] = dst[y0 * w + x1] + gv * wy0 * wx1;
                dst[y1 * w + x0] = dst[y1 * w + x0] + gv * wy1 * wx0;
                dst[y1 * w + x1] = dst[y1 * w + x1] + gv * wy1 * wx1;
            }
        }
    }
    gx
}

impl<T: Element> Tensor<T> {
    /// Dispatches any elementwise op; `b` is required exactly for binary kinds.
    pub fn elementwise(kind: Elementwise, a: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        match (kind, b) {
            (Elementwise::Unary(k), None) => Ok(a.unary(k)),
            (Elementwise::Binary(k), Some(b)) => a.binary(k, b),
            (Elementwise::Unary(_), Some(_)) => Err(Error::InvalidShape(
                "unary op given a second operand".into(),
            )),
            (Elementwise::Binary(_), None) => Err(Error::InvalidShape(
                "binary op missing its second operand".into(),
            )),
        }
    }

    pub fn unary(&self, kind: UnaryOp) -> Tensor<T> {
        let data = unary_forward(kind, self.data());
        Tensor::from_op(self.shape().to_vec(), data, Op::Unary { kind, x: self.clone() })
    }

    pub fn binary(&self, kind: BinaryOp, other: &Tensor<T>) -> Result<Tensor<T>> {
        let op_name = match kind {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let out_shape = broadcast_shape(op_name, self.shape(), other.shape())?;
        let f = |x: T, y: T| match kind {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let data: Vec<T> = if self.shape() == other.shape() {
            self.data().iter().zip(other.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = (self.shape() != out_shape.as_slice())
                .then(|| broadcast_offsets(self.shape(), &out_shape));
            let ob = (other.shape() != out_shape.as_slice())
                .then(|| broadcast_offsets(other.shape(), &out_shape));
            (0..numel(&out_shape))
                .map(|i| {
                    let x = self.data()[oa.as_ref().map_or(i, |o| o[i])];
                    let y = other.data()[ob.as_ref().map_or(i, |o| o[i])];
                    f(x, y)
                })
                .collect()
        };
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::Binary {
                kind,
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Div, other)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(UnaryOp::Exp)
    }

    pub fn log(&self) -> Tensor<T> {
        self.unary(UnaryOp::Log)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(UnaryOp::Neg)
    }

    pub fn scale(&self, s: f64) -> Tensor<T> {
        self.unary(UnaryOp::Scale(s))
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(UnaryOp::Relu)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<T> {
        self.unary(UnaryOp::LeakyRelu(slope))
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn softplus(&self) -> Tensor<T> {
        self.unary(UnaryOp::Softplus)
    }

    /// Matrix product of rank-2 operands, or batched product of rank-3
    /// operands with equal leading extent.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let ok = match (sa.len(), sb.len()) {
            (2, 2) => sa[1] == sb[0],
            (3, 3) => sa[0] == sb[0] && sa[2] == sb[1],
            _ => false,
        };
        if !ok {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (batch, m, k) = last_two(sa);
        let n = sb[sb.len() - 1];
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                MatRef::row_major(&self.data()[bi * m * k..(bi + 1) * m * k], k),
                MatRef::row_major(&other.data()[bi * k * n..(bi + 1) * k * n], n),
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        Ok(Tensor::from_op(
            shape,
            out,
            Op::MatMul {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        if self.rank() < 2 {
            return Err(Error::InvalidShape(format!(
                "transpose needs rank >= 2, got {:?}",
                self.shape()
            )));
        }
        let (batch, rows, cols) = last_two(self.shape());
        let data = transpose_buf(self.data(), batch, rows, cols);
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        Ok(Tensor::from_op(shape, data, Op::Transpose { x: self.clone() }))
    }

    /// Reduces over `axes`, dropping them from the shape.
    pub fn reduce(&self, kind: ReduceOp, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&a| a >= rank) {
            return Err(Error::InvalidAxis { axis: bad, rank });
        }
        let keep: Vec<usize> = self
            .shape()
            .iter()
            .enumerate()
            .map(|(d, &n)| if axes.contains(&d) { 1 } else { n })
            .collect();
        let out_shape: Vec<usize> = self
            .shape()
            .iter()
            .enumerate()
            .filter(|(d, _)| !axes.contains(d))
            .map(|(_, &n)| n)
            .collect();
        let out_len = numel(&keep);
        let count = self.numel() / out_len;
        let slots = broadcast_offsets(&keep, self.shape());
        let (data, argmax) = match kind {
            ReduceOp::Sum | ReduceOp::Mean => {
                let mut out = vec![T::zero(); out_len];
                for (&s, &v) in slots.iter().zip(self.data()) {
                    out[s] = out[s] + v;
                }
                if kind == ReduceOp::Mean {
                    let inv = T::one() / T::from_usize(count).expect("count");
                    out.iter_mut().for_each(|v| *v = *v * inv);
                }
                (out, None)
            }
            ReduceOp::Max => {
                let mut out = vec![T::neg_infinity(); out_len];
                let mut arg = vec![0usize; out_len];
                for (i, (&s, &v)) in slots.iter().zip(self.data()).enumerate() {
                    if v > out[s] {
                        out[s] = v;
                        arg[s] = i;
                    }
                }
                (out, Some(arg))
            }
        };
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::Reduce {
                kind,
                x: self.clone(),
                slots,
                count,
                argmax,
            },
        ))
    }

    pub fn sum(&self, axes: &[usize]) -> Result<Tensor<T>> {
        self.reduce(ReduceOp::Sum, axes)
    }

    pub fn mean(&self, axes: &[usize]) -> Result<Tensor<T>> {
        self.reduce(ReduceOp::Mean, axes)
    }

    pub fn max(&self, axes: &[usize]) -> Result<Tensor<T>> {
        self.reduce(ReduceOp::Max, axes)
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce(ReduceOp::Sum, &axes).expect("all axes valid")
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce(ReduceOp::Mean, &axes).expect("all axes valid")
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis {
                axis,
                rank: self.rank(),
            });
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = T::neg_infinity();
                for k in 0..len {
                    m = m.max(x[base + k * inner]);
                }
                let mut total = T::zero();
                for k in 0..len {
                    let e = (x[base + k * inner] - m).exp();
                    y[base + k * inner] = e;
                    total = total + e;
                }
                for k in 0..len {
                    y[base + k * inner] = y[base + k * inner] / total;
                }
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            y,
            Op::Softmax {
                x: self.clone(),
                axis,
            },
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis {
                axis,
                rank: self.rank(),
            });
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = T::neg_infinity();
                for k in 0..len {
                    m = m.max(x[base + k * inner]);
                }
                let mut total = T::zero();
                for k in 0..len {
                    total = total + (x[base + k * inner] - m).exp();
                }
                let lse = m + total.ln();
                for k in 0..len {
                    y[base + k * inner] = x[base + k * inner] - lse;
                }
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            y,
            Op::LogSoftmax {
                x: self.clone(),
                axis,
            },
        ))
    }

    /// Reinterprets the row-major buffer with a new shape (no copy).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        let track = self.requires_grad();
        Ok(Tensor::build(
            shape.to_vec(),
            std::sync::Arc::clone(&self.node.data),
            track,
            track.then(|| Op::Reshape { x: self.clone() }),
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidShape("concat of zero tensors".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        for p in &parts[1..] {
            let compatible = p.rank() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor::from_op(
            shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis {
                axis,
                rank: self.rank(),
            });
        }
        let total = self.shape()[axis];
        if len == 0 || start + len > total {
            return Err(Error::InvalidShape(format!(
                "slice [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                self.shape()
            )));
        }
        let (outer, _, inner) = split_axis(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * total + start) * inner;
            data.extend_from_slice(&self.data()[s..s + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            shape,
            data,
            Op::Slice {
                x: self.clone(),
                axis,
                start,
            },
        ))
    }

    /// Bilinear upsampling of an N x C x H x W tensor by an integer factor
    /// (half-pixel centres, edge clamped).
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Tensor<T>> {
        if self.rank() != 4 || factor == 0 {
            return Err(Error::InvalidShape(format!(
                "upsample needs rank 4 and factor >= 1, got {:?} x{factor}",
                self.shape()
            )));
        }
        let s = self.shape();
        let data = upsample_forward(self.data(), s, factor);
        Ok(Tensor::from_op(
            vec![s[0], s[1], s[2] * factor, s[3] * factor],
            data,
            Op::Upsample {
                x: self.clone(),
                factor,
            },
        ))
    }
}

/// Kind selector for [`Tensor::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Unary(UnaryOp),
    Binary(BinaryOp),
}
