//! Dense row-major tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable value. Every op that has at least one input
//! with `requires_grad` records itself on the output, so the outputs form a
//! DAG back to the leaves. [`Tensor::backward`] walks that DAG in reverse
//! creation order and accumulates gradients into every node that asked for
//! one.
//!
//! Two element types are supported through [`Element`]: `f32` for training
//! and `f64` for finite-difference checks.

mod conv;
mod gradcheck;
mod ops;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckReport};
pub use conv::conv_out_len;
pub use ops::{BinaryOp, Elementwise, ReduceOp, UnaryOp};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Storage type code, also written into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

/// Floating-point element of a tensor.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// Every index reachable through the given extents and strides must lie
    /// inside the corresponding buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn to_le_bytes_vec(data: &[Self], out: &mut Vec<u8>);
    fn from_le_chunk(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_le_bytes_vec(data: &[f32], out: &mut Vec<u8>) {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn from_le_chunk(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_le_bytes_vec(data: &[f64], out: &mut Vec<u8>) {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn from_le_chunk(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
}

/// Strided view of a matrix operand for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs
        }
    }
}

/// `c (m x n, row-major) = a (m x k) * b (k x n) + beta * c`.
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: &mut [T],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v = *v * beta;
        }
        return;
    }
    assert!(a.max_index(m, k) < a.data.len(), "gemm lhs out of bounds");
    assert!(b.max_index(k, n) < b.data.len(), "gemm rhs out of bounds");
    // SAFETY: bounds of all three operands were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

pub(crate) struct Node<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    op: Option<ops::Op<T>>,
}

/// Immutable n-dimensional array that may participate in a gradient graph.
///
/// Cloning is cheap: clones share storage and graph identity.
pub struct Tensor<T: Element> {
    node: Arc<Node<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Arc::clone(&self.node),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.node.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("op", &self.op_name())
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn build(shape: Vec<usize>, data: Arc<Vec<T>>, requires_grad: bool, op: Option<ops::Op<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                op,
            }),
        }
    }

    /// Output of an op. Records the op only when some input needs a gradient.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: ops::Op<T>) -> Self {
        let track = op.inputs().iter().any(|t| t.requires_grad());
        if track {
            Self::build(shape, Arc::new(data), true, Some(op))
        } else {
            Self::build(shape, Arc::new(data), false, None)
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!("zero extent in {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::build(shape.to_vec(), Arc::new(data), false, None))
    }

    pub fn from_f64s(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    /// Leaf tensor that collects gradients.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Ok(Self::from_vec(shape, data)?.requires_grad_leaf())
    }

    pub fn scalar(v: T) -> Self {
        Self::build(Vec::new(), Arc::new(vec![v]), false, None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::build(shape.to_vec(), Arc::new(vec![v; numel(shape)]), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Fresh leaf with the same values that records gradients.
    pub fn requires_grad_leaf(&self) -> Self {
        Self::build(self.node.shape.clone(), Arc::clone(&self.node.data), true, None)
    }

    /// Fresh constant leaf with the same values, cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.node.shape.clone(), Arc::clone(&self.node.data), false, None)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    pub fn op_name(&self) -> &'static str {
        self.node.op.as_ref().map_or("leaf", |op| op.name())
    }

    /// Parents recorded by the op that produced this tensor.
    pub fn inputs(&self) -> Vec<Tensor<T>> {
        self.node
            .op
            .as_ref()
            .map(|op| op.inputs().into_iter().cloned().collect())
            .unwrap_or_default()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    pub fn is_finite(&self) -> bool {
        self.node.data.iter().all(|v| v.is_finite())
    }

    fn accumulate_grad(&self, g: Vec<T>) {
        let mut slot = self.node.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode pass from a one-element tensor.
    ///
    /// Gradients are accumulated (not overwritten) into every reachable
    /// tensor with `requires_grad`, intermediate nodes included.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let graph = Graph::build(self);
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for node in graph.order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            if let Some(op) = &node.node.op {
                for (parent, pg) in op.backward(node, &g) {
                    debug_assert_eq!(pg.len(), parent.numel(), "grad size from {}", op.name());
                    match pending.get_mut(&parent.id()) {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(pg) {
                                *a = *a + b;
                            }
                        }
                        None => {
                            pending.insert(parent.id(), pg);
                        }
                    }
                }
            }
            node.accumulate_grad(g);
        }
        Ok(())
    }
}

/// Topologically ordered record of the ops reachable from a root.
pub struct Graph<T: Element> {
    order: Vec<Tensor<T>>,
}

impl<T: Element> Graph<T> {
    /// Collects every node reachable from `root` through gradient-tracking
    /// edges. Node ids grow with creation time and inputs always exist before
    /// outputs, so ascending id order is a topological order.
    pub fn build(root: &Tensor<T>) -> Self {
        let mut seen: HashMap<u64, Tensor<T>> = HashMap::new();
        let mut stack = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if seen.contains_key(&t.id()) {
                continue;
            }
            if let Some(op) = &t.node.op {
                for p in op.inputs() {
                    if p.requires_grad() && !seen.contains_key(&p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            seen.insert(t.id(), t);
        }
        let mut order: Vec<Tensor<T>> = seen.into_values().collect();
        order.sort_by_key(|t| t.id());
        Graph { order }
    }

    /// Nodes in forward (topological) order.
    pub fn nodes(&self) -> &[Tensor<T>] {
        &self.order
    }

    /// First node holding a non-finite value whose inputs are all finite.
    pub fn first_non_finite(&self) -> Option<&Tensor<T>> {
        self.order
            .iter()
            .find(|t| !t.is_finite() && t.inputs().iter().all(|p| p.is_finite()))
    }
}

/// Same as [`Graph::first_non_finite`] but also follows edges into constant
/// inputs, which a gradient graph skips.
pub fn locate_non_finite<T: Element>(root: &Tensor<T>) -> Option<Tensor<T>> {
    let mut seen: HashMap<u64, Tensor<T>> = HashMap::new();
    let mut stack = vec![root.clone()];
    while let Some(t) = stack.pop() {
        if seen.contains_key(&t.id()) {
            continue;
        }
        for p in t.inputs() {
            stack.push(p);
        }
        seen.insert(t.id(), t);
    }
    let mut order: Vec<Tensor<T>> = seen.into_values().collect();
    order.sort_by_key(|t| t.id());
    order
        .into_iter()
        .find(|t| !t.is_finite() && t.inputs().iter().all(|p| p.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(&[0, 2], vec![]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 4]).unwrap();
        assert_eq!(t.numel(), 4);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.mul(&x).unwrap();
        assert!(matches!(y.backward(), Err(Error::NonScalar(_))));
    }

    #[test]
    fn diamond_accumulates() {
        // d/dx (x*x + x*x) = 4x
        let x = Tensor::<f64>::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let sq = x.mul(&x).unwrap();
        let y = sq.add(&sq).unwrap().sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, -8.0, 2.0]);
    }

    #[test]
    fn graph_visits_each_node_once() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let a = x.exp();
        let b = a.mul(&a).unwrap();
        let c = b.add(&a).unwrap().sum_all();
        let g = Graph::build(&c);
        let ids: Vec<u64> = g.nodes().iter().map(|t| t.id()).collect();
        let mut dedup = ids.clone();
        dedup.dedup();
        assert_eq!(ids, dedup);
        assert_eq!(ids.len(), 5);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn constants_do_not_track() {
        let a = Tensor::<f32>::ones(&[2]);
        let b = a.add(&a).unwrap();
        assert!(b.is_leaf());
        assert!(!b.requires_grad());
    }

    #[test]
    fn locates_first_nan() {
        let x = Tensor::<f64>::param(&[2], vec![-1.0, 1.0]).unwrap();
        let l = x.log();
        let y = l.exp().sum_all();
        let bad = locate_non_finite(&y).unwrap();
        assert_eq!(bad.op_name(), "log");
    }
}
