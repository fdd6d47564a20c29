//! Minimal dense f64 tensor with reverse-mode gradients.
//!
//! Tensors are immutable values (rank 0 scalars, vectors, row-major
//! matrices) linked into a computation graph when any operand requires
//! gradients. `backward` on a scalar loss accumulates gradients into every
//! reachable parameter by reverse traversal of the recorded graph.
//!
//! All operations use fixed summation order, so identical inputs produce
//! bit-identical outputs. A recorded graph is confined to one thread
//! (handles are reference-counted, not atomically).

mod fd;

pub use fd::finite_difference_check;

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward requires a scalar, got {numel} elements")]
    NotScalar { numel: usize },
    #[error("cycle detected in computation graph")]
    GraphCycle,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

const LAYER_NORM_EPS: f64 = 1e-12;

enum Rule {
    Add,
    AddBias,
    Mul,
    ScalarMul(f64),
    ScaleCols,
    Matmul,
    Transpose,
    Relu,
    RowSoftmax,
    LayerNorm { inv_std: Vec<f64> },
    MaskedFill { masked: Vec<bool> },
    ConcatCols { widths: Vec<usize> },
    Sum,
    GatherRows { indices: Vec<usize> },
    SoftmaxCrossEntropy { targets: Vec<usize>, probs: Vec<f64> },
}

struct Op {
    parents: Vec<Tensor>,
    rule: Rule,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Option<Op>,
}

/// Handle to a node of the computation graph.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    /// Constant tensor; no gradient will ever flow into it.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor, TensorError> {
        if numel_of(shape) != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Tensor::make(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf; `backward` accumulates into its gradient buffer.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor, TensorError> {
        if numel_of(shape) != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Tensor::make(shape.to_vec(), data, true, None))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::make(Vec::new(), vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::make(shape.to_vec(), vec![0.0; numel_of(shape)], false, None)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Value of a scalar tensor.
    pub fn value(&self) -> f64 {
        assert_eq!(self.numel(), 1, "value() needs a single-element tensor");
        self.inner.data.borrow()[0]
    }

    /// Rank-2 contents as rows; used for traces and reports.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        assert_eq!(self.inner.shape.len(), 2, "to_rows() needs a matrix");
        let cols = self.inner.shape[1];
        self.inner
            .data
            .borrow()
            .chunks(cols)
            .map(|r| r.to_vec())
            .collect()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn get_elem(&self, idx: usize) -> f64 {
        self.inner.data.borrow()[idx]
    }

    /// In-place update of one element. Intended for leaf parameters between
    /// passes (optimizer steps, finite-difference probes); mutating a node
    /// of a live graph invalidates gradients recorded from its old value.
    pub fn set_elem(&self, idx: usize, v: f64) {
        self.inner.data.borrow_mut()[idx] = v;
    }

    /// In-place update of the whole buffer, same caveat as `set_elem`.
    pub fn set_data(&self, data: Vec<f64>) {
        assert_eq!(data.len(), self.numel(), "set_data length mismatch");
        *self.inner.data.borrow_mut() = data;
    }

    fn rows(&self) -> usize {
        self.inner.shape[0]
    }

    fn cols(&self) -> usize {
        self.inner.shape[1]
    }

    fn is_matrix(&self) -> bool {
        self.inner.shape.len() == 2
    }

    fn record(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        rule: Rule,
    ) -> Tensor {
        let requires = parents.iter().any(|p| p.requires_grad());
        let op = if requires {
            Some(Op { parents, rule })
        } else {
            None
        };
        Tensor::make(shape, data, requires, op)
    }

    fn expect_matrix(&self, what: &str) -> Result<(), TensorError> {
        if self.is_matrix() {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch(format!(
                "{} needs a rank-2 tensor, got shape {:?}",
                what, self.inner.shape
            )))
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::record(
            self.inner.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            Rule::Add,
        ))
    }

    /// Broadcast add of a length-d bias to every row of an n x d matrix.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor, TensorError> {
        self.expect_matrix("add_bias")?;
        if bias.shape() != [self.cols()] {
            return Err(TensorError::ShapeMismatch(format!(
                "add_bias: matrix {:?} vs bias {:?}",
                self.shape(),
                bias.shape()
            )));
        }
        let cols = self.cols();
        let b = bias.data();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(idx, v)| v + b[idx % cols])
            .collect();
        drop(b);
        Ok(Tensor::record(
            self.inner.shape.clone(),
            data,
            vec![self.clone(), bias.clone()],
            Rule::AddBias,
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::record(
            self.inner.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            Rule::Mul,
        ))
    }

    pub fn scalar_mul(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::record(
            self.inner.shape.clone(),
            data,
            vec![self.clone()],
            Rule::ScalarMul(c),
        )
    }

    /// Multiply column j of an n x d matrix by gain[j].
    pub fn scale_cols(&self, gain: &Tensor) -> Result<Tensor, TensorError> {
        self.expect_matrix("scale_cols")?;
        if gain.shape() != [self.cols()] {
            return Err(TensorError::ShapeMismatch(format!(
                "scale_cols: matrix {:?} vs gain {:?}",
                self.shape(),
                gain.shape()
            )));
        }
        let cols = self.cols();
        let g = gain.data();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(idx, v)| v * g[idx % cols])
            .collect();
        drop(g);
        Ok(Tensor::record(
            self.inner.shape.clone(),
            data,
            vec![self.clone(), gain.clone()],
            Rule::ScaleCols,
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.expect_matrix("matmul")?;
        other.expect_matrix("matmul")?;
        if self.cols() != other.rows() {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (n, k, m) = (self.rows(), self.cols(), other.cols());
        let mut data = vec![0.0; n * m];
        matmul_raw(&self.data(), &other.data(), n, k, m, &mut data);
        Ok(Tensor::record(
            vec![n, m],
            data,
            vec![self.clone(), other.clone()],
            Rule::Matmul,
        ))
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        self.expect_matrix("transpose")?;
        let (n, m) = (self.rows(), self.cols());
        let src = self.data();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = src[i * m + j];
            }
        }
        drop(src);
        Ok(Tensor::record(
            vec![m, n],
            data,
            vec![self.clone()],
            Rule::Transpose,
        ))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.max(0.0)).collect();
        Tensor::record(
            self.inner.shape.clone(),
            data,
            vec![self.clone()],
            Rule::Relu,
        )
    }

    /// Softmax over each row, computed with per-row max subtraction.
    /// Entries equal to -inf get weight exactly 0; rows must keep at least
    /// one finite entry.
    pub fn row_softmax(&self) -> Result<Tensor, TensorError> {
        self.expect_matrix("row_softmax")?;
        let (n, m) = (self.rows(), self.cols());
        let src = self.data();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            debug_assert!(max.is_finite(), "row_softmax on a fully masked row");
            let out = &mut data[i * m..(i + 1) * m];
            let mut sum = 0.0;
            for j in 0..m {
                let e = (row[j] - max).exp();
                out[j] = e;
                sum += e;
            }
            for v in out.iter_mut() {
                *v /= sum;
            }
        }
        drop(src);
        Ok(Tensor::record(
            vec![n, m],
            data,
            vec![self.clone()],
            Rule::RowSoftmax,
        ))
    }

    /// Normalize each row to mean 0 and variance 1 (population variance,
    /// stabilized with a 1e-12 epsilon). Affine gain/bias are separate ops.
    pub fn layer_norm(&self) -> Result<Tensor, TensorError> {
        self.expect_matrix("layer_norm")?;
        let (n, m) = (self.rows(), self.cols());
        let src = self.data();
        let mut data = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..m {
                data[i * m + j] = (row[j] - mean) * is;
            }
        }
        drop(src);
        Ok(Tensor::record(
            vec![n, m],
            data,
            vec![self.clone()],
            Rule::LayerNorm { inv_std },
        ))
    }

    /// Replace entries where `masked` is true by `fill`; gradients flow
    /// only through untouched entries.
    pub fn masked_fill(&self, masked: &[bool], fill: f64) -> Result<Tensor, TensorError> {
        if masked.len() != self.numel() {
            return Err(TensorError::ShapeMismatch(format!(
                "masked_fill: {} mask entries for {} elements",
                masked.len(),
                self.numel()
            )));
        }
        let data = self
            .data()
            .iter()
            .zip(masked)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        Ok(Tensor::record(
            self.inner.shape.clone(),
            data,
            vec![self.clone()],
            Rule::MaskedFill {
                masked: masked.to_vec(),
            },
        ))
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch(
                "concat_cols of zero parts".to_string(),
            ));
        }
        let n = parts[0].rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            p.expect_matrix("concat_cols")?;
            if p.rows() != n {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat_cols: row counts {} vs {}",
                    n,
                    p.rows()
                )));
            }
            widths.push(p.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut offset = 0;
        for p in parts {
            let w = p.cols();
            let src = p.data();
            for i in 0..n {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(Tensor::record(
            vec![n, total],
            data,
            parts.to_vec(),
            Rule::ConcatCols { widths },
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum::<f64>();
        Tensor::record(Vec::new(), vec![total], vec![self.clone()], Rule::Sum)
    }

    /// Select rows of a table by index (embedding lookup); gradients
    /// accumulate back into the selected rows.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor, TensorError> {
        self.expect_matrix("gather_rows")?;
        let (v, d) = (self.rows(), self.cols());
        for &idx in indices {
            if idx >= v {
                return Err(TensorError::ShapeMismatch(format!(
                    "gather_rows: index {} out of {} rows",
                    idx, v
                )));
            }
        }
        let src = self.data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &idx in indices {
            data.extend_from_slice(&src[idx * d..(idx + 1) * d]);
        }
        drop(src);
        Ok(Tensor::record(
            vec![indices.len(), d],
            data,
            vec![self.clone()],
            Rule::GatherRows {
                indices: indices.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy of logit rows against target classes.
    pub fn softmax_cross_entropy(&self, targets: &[usize]) -> Result<Tensor, TensorError> {
        self.expect_matrix("softmax_cross_entropy")?;
        let (n, c) = (self.rows(), self.cols());
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch(format!(
                "softmax_cross_entropy: {} targets for {} rows",
                targets.len(),
                n
            )));
        }
        for &t in targets {
            if t >= c {
                return Err(TensorError::ShapeMismatch(format!(
                    "softmax_cross_entropy: target {} out of {} classes",
                    t, c
                )));
            }
        }
        let src = self.data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut probs[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                out[j] = e;
                sum += e;
            }
            for v in out.iter_mut() {
                *v /= sum;
            }
            loss -= out[targets[i]].ln();
        }
        loss /= n as f64;
        drop(src);
        Ok(Tensor::record(
            Vec::new(),
            vec![loss],
            vec![self.clone()],
            Rule::SoftmaxCrossEntropy {
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (g, d) in buf.iter_mut().zip(delta) {
                    *g += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Reverse-mode gradient accumulation from a scalar loss into every
    /// reachable tensor that requires gradients.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar {
                numel: self.numel(),
            });
        }
        let order = topo_order(self)?;
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            let Some(op) = node.inner.op.as_ref() else {
                continue;
            };
            let grad = node.inner.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            propagate(node, op, &grad);
        }
        Ok(())
    }
}

/// Deterministic i-k-j matrix multiply accumulating into `out`.
fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * m..(kk + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// a^T * g for matmul backward: a is n x k, g is n x m, out is k x m.
fn matmul_at_b(a: &[f64], g: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * m..(kk + 1) * m];
            for j in 0..m {
                orow[j] += av * grow[j];
            }
        }
    }
}

/// g * b^T for matmul backward: g is n x m, b is k x m, out is n x k.
fn matmul_a_bt(g: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * m..(kk + 1) * m];
            let mut acc = 0.0;
            for j in 0..m {
                acc += grow[j] * brow[j];
            }
            *o += acc;
        }
    }
}

fn topo_order(root: &Tensor) -> Result<Vec<Tensor>, TensorError> {
    const IN_PROGRESS: u8 = 1;
    const DONE: u8 = 2;
    let mut state: HashMap<u64, u8> = HashMap::new();
    let mut order = Vec::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    state.insert(root.id(), IN_PROGRESS);
    while let Some((node, next_child)) = stack.pop() {
        let parents: &[Tensor] = node
            .inner
            .op
            .as_ref()
            .map(|op| op.parents.as_slice())
            .unwrap_or(&[]);
        if next_child < parents.len() {
            let parent = parents[next_child].clone();
            stack.push((node, next_child + 1));
            match state.get(&parent.id()) {
                Some(&IN_PROGRESS) => return Err(TensorError::GraphCycle),
                Some(&DONE) => {}
                _ => {
                    state.insert(parent.id(), IN_PROGRESS);
                    stack.push((parent, 0));
                }
            }
        } else {
            state.insert(node.id(), DONE);
            order.push(node);
        }
    }
    Ok(order)
}

fn propagate(node: &Tensor, op: &Op, grad: &[f64]) {
    let parents = &op.parents;
    match &op.rule {
        Rule::Add => {
            for p in parents {
                if p.requires_grad() {
                    p.accumulate_grad(grad);
                }
            }
        }
        Rule::AddBias => {
            let (a, b) = (&parents[0], &parents[1]);
            if a.requires_grad() {
                a.accumulate_grad(grad);
            }
            if b.requires_grad() {
                let d = b.numel();
                let mut gb = vec![0.0; d];
                for (idx, g) in grad.iter().enumerate() {
                    gb[idx % d] += g;
                }
                b.accumulate_grad(&gb);
            }
        }
        Rule::Mul => {
            let (a, b) = (&parents[0], &parents[1]);
            if a.requires_grad() {
                let delta: Vec<f64> = grad.iter().zip(b.data().iter()).map(|(g, v)| g * v).collect();
                a.accumulate_grad(&delta);
            }
            if b.requires_grad() {
                let delta: Vec<f64> = grad.iter().zip(a.data().iter()).map(|(g, v)| g * v).collect();
                b.accumulate_grad(&delta);
            }
        }
        Rule::ScalarMul(c) => {
            let a = &parents[0];
            if a.requires_grad() {
                let delta: Vec<f64> = grad.iter().map(|g| g * c).collect();
                a.accumulate_grad(&delta);
            }
        }
        Rule::ScaleCols => {
            let (a, gain) = (&parents[0], &parents[1]);
            let d = gain.numel();
            if a.requires_grad() {
                let gv = gain.data();
                let delta: Vec<f64> = grad
                    .iter()
                    .enumerate()
                    .map(|(idx, g)| g * gv[idx % d])
                    .collect();
                a.accumulate_grad(&delta);
            }
            if gain.requires_grad() {
                let av = a.data();
                let mut gg = vec![0.0; d];
                for (idx, g) in grad.iter().enumerate() {
                    gg[idx % d] += g * av[idx];
                }
                gain.accumulate_grad(&gg);
            }
        }
        Rule::Matmul => {
            let (a, b) = (&parents[0], &parents[1]);
            let (n, k, m) = (a.rows(), a.cols(), b.cols());
            if a.requires_grad() {
                let mut ga = vec![0.0; n * k];
                matmul_a_bt(grad, &b.data(), n, k, m, &mut ga);
                a.accumulate_grad(&ga);
            }
            if b.requires_grad() {
                let mut gb = vec![0.0; k * m];
                matmul_at_b(&a.data(), grad, n, k, m, &mut gb);
                b.accumulate_grad(&gb);
            }
        }
        Rule::Transpose => {
            let a = &parents[0];
            if a.requires_grad() {
                let (n, m) = (a.rows(), a.cols());
                let mut ga = vec![0.0; n * m];
                for i in 0..m {
                    for j in 0..n {
                        ga[j * m + i] = grad[i * n + j];
                    }
                }
                a.accumulate_grad(&ga);
            }
        }
        Rule::Relu => {
            let a = &parents[0];
            if a.requires_grad() {
                let delta: Vec<f64> = grad
                    .iter()
                    .zip(a.data().iter())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                a.accumulate_grad(&delta);
            }
        }
        Rule::RowSoftmax => {
            let a = &parents[0];
            if a.requires_grad() {
                let (n, m) = (a.rows(), a.cols());
                let p = node.data();
                let mut delta = vec![0.0; n * m];
                for i in 0..n {
                    let prow = &p[i * m..(i + 1) * m];
                    let grow = &grad[i * m..(i + 1) * m];
                    let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                    for j in 0..m {
                        delta[i * m + j] = prow[j] * (grow[j] - dot);
                    }
                }
                drop(p);
                a.accumulate_grad(&delta);
            }
        }
        Rule::LayerNorm { inv_std } => {
            let a = &parents[0];
            if a.requires_grad() {
                let (n, m) = (a.rows(), a.cols());
                let y = node.data();
                let mut delta = vec![0.0; n * m];
                for i in 0..n {
                    let yrow = &y[i * m..(i + 1) * m];
                    let grow = &grad[i * m..(i + 1) * m];
                    let gmean = grow.iter().sum::<f64>() / m as f64;
                    let gymean = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / m as f64;
                    for j in 0..m {
                        delta[i * m + j] = inv_std[i] * (grow[j] - gmean - yrow[j] * gymean);
                    }
                }
                drop(y);
                a.accumulate_grad(&delta);
            }
        }
        Rule::MaskedFill { masked } => {
            let a = &parents[0];
            if a.requires_grad() {
                let delta: Vec<f64> = grad
                    .iter()
                    .zip(masked)
                    .map(|(g, &m)| if m { 0.0 } else { *g })
                    .collect();
                a.accumulate_grad(&delta);
            }
        }
        Rule::ConcatCols { widths } => {
            let n = parents[0].rows();
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            for (p, &w) in parents.iter().zip(widths) {
                if p.requires_grad() {
                    let mut gp = vec![0.0; n * w];
                    for i in 0..n {
                        gp[i * w..(i + 1) * w]
                            .copy_from_slice(&grad[i * total + offset..i * total + offset + w]);
                    }
                    p.accumulate_grad(&gp);
                }
                offset += w;
            }
        }
        Rule::Sum => {
            let a = &parents[0];
            if a.requires_grad() {
                let delta = vec![grad[0]; a.numel()];
                a.accumulate_grad(&delta);
            }
        }
        Rule::GatherRows { indices } => {
            let table = &parents[0];
            if table.requires_grad() {
                let d = table.cols();
                let mut gt = vec![0.0; table.numel()];
                for (i, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[idx * d + j] += grad[i * d + j];
                    }
                }
                table.accumulate_grad(&gt);
            }
        }
        Rule::SoftmaxCrossEntropy { targets, probs } => {
            let a = &parents[0];
            if a.requires_grad() {
                let (n, c) = (a.rows(), a.cols());
                let g = grad[0];
                let mut delta = vec![0.0; n * c];
                for i in 0..n {
                    for j in 0..c {
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        delta[i * c + j] = g * (probs[i * c + j] - onehot) / n as f64;
                    }
                }
                a.accumulate_grad(&delta);
            }
        }
    }
}
