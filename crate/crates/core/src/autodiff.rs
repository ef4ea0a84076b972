//! Minimal reverse-mode differentiation over dense row-major `f64` tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar output walks the record in reverse and
//! returns a [`Gradients`] map holding one gradient per leaf that was
//! registered with [`Graph::param`]. Graphs are single-use: build, backward,
//! drop. Nothing accumulates across calls.

use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major array. Shapes are one- or two-dimensional in practice.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    /// Panics when `product(shape) != data.len()` or any extent is zero.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(
            shape.iter().all(|&s| s > 0),
            "tensor extents must be positive: {shape:?}"
        );
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor::new(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1, 1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a matrix; vectors count as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Plain (untracked) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 || self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.data,
            (k as isize, 1),
            &other.data,
            (n as isize, 1),
            &mut out,
            0.0,
        );
        Ok(Tensor::new(vec![m, n], out))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![idx.len(), c], data)
    }
}

/// C = A·B + beta·C with arbitrary strides for A and B.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_stride: (isize, isize),
    b: &[f64],
    b_stride: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the callers pass slices covering m×k and k×n elements under the
    // given strides and an m×n output buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_stride.0,
            a_stride.1,
            b.as_ptr(),
            b_stride.0,
            b_stride.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    SegmentMean {
        x: Var,
        ids: Vec<usize>,
        counts: Vec<usize>,
    },
    CrossEntropy {
        pred: Var,
        target: Tensor,
        eps: f64,
    },
    ConcatCols(Vec<Var>),
    Mask(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Default lower clamp applied inside the logarithm of [`Graph::cross_entropy`].
pub const DEFAULT_LOG_EPS: f64 = 1e-12;

/// Record of a forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self
            .value(a)
            .matmul(self.value(b))
            .map_err(|_| self.shape_err("matmul", a, b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(value, Op::Transpose(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let data = zip_with(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `x[i, :] + bias` for every row of `x`; `bias` has one row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return Err(self.shape_err("add_row", x, bias));
        }
        let b = self.value(bias).data().to_vec();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(&b).map(|(v, w)| v + w))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let data = zip_with(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// Multiplication by a recorded 1×1 value.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(self.shape_err("mul_scalar", x, s));
        }
        let k = self.value(s).item();
        let value = self.value(x).map(|v| v * k);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::MulScalar(x, s), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient flows only where the input
    /// lies inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(value, Op::Clamp(x, lo, hi), rg)
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// Mean of the rows of `x` sharing a segment id.
    pub fn segment_mean(&mut self, x: Var, ids: &[usize], n_segments: usize) -> Result<Var> {
        let xv = self.value(x);
        if ids.len() != xv.rows() {
            return Err(Error::Shape {
                op: "segment_mean",
                left: xv.shape().to_vec(),
                right: vec![ids.len()],
            });
        }
        let mut counts = vec![0usize; n_segments];
        for &id in ids {
            if id >= n_segments {
                return Err(Error::SegmentOutOfRange { id, n_segments });
            }
            counts[id] += 1;
        }
        if let Some(s) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptySegment(s));
        }
        let c = xv.cols();
        let mut out = vec![0.0; n_segments * c];
        for (i, &id) in ids.iter().enumerate() {
            for (o, v) in out[id * c..(id + 1) * c].iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        for (s, &n) in counts.iter().enumerate() {
            let inv = 1.0 / n as f64;
            out[s * c..(s + 1) * c].iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(vec![n_segments, c], out);
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::SegmentMean {
                x,
                ids: ids.to_vec(),
                counts,
            },
            rg,
        ))
    }

    /// `Σᵢ −yᵢᵀ·log(max(ŷᵢ, eps))` over the rows of a two-column prediction.
    pub fn cross_entropy(&mut self, pred: Var, onehot: &Tensor, eps: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != onehot.shape() || p.cols() != 2 {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: p.shape().to_vec(),
                right: onehot.shape().to_vec(),
            });
        }
        for i in 0..onehot.rows() {
            let r = onehot.row(i);
            let ok = (r[0] == 1.0 && r[1] == 0.0) || (r[0] == 0.0 && r[1] == 1.0);
            if !ok {
                return Err(Error::InvalidOneHot(i));
            }
        }
        let loss: f64 = p
            .data()
            .iter()
            .zip(onehot.data())
            // `f64::max` would turn a NaN prediction into `eps`; keep it visible.
            .map(|(&pv, &y)| if y != 0.0 { -y * if pv.is_nan() { pv } else { pv.max(eps).ln() } } else { 0.0 })
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                pred,
                target: onehot.clone(),
                eps,
            },
            rg,
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.value(xs[0]).rows();
        if let Some(&bad) = xs.iter().find(|&&v| self.value(v).rows() != rows) {
            return Err(self.shape_err("concat_cols", xs[0], bad));
        }
        let total: usize = xs.iter().map(|&v| self.value(v).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &v in xs {
                data.extend_from_slice(self.value(v).row(i));
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(vec![rows, total], data),
            Op::ConcatCols(xs.to_vec()),
            rg,
        ))
    }

    /// Elementwise product with a fixed mask; the mask is not differentiated.
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "mask",
                left: self.shape(x).to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = zip_with(self.value(x).data(), &mask, |v, m| v * m);
        let value = Tensor::new(self.shape(x).to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mask(x, mask), rg))
    }

    /// Inverted dropout: each entry kept with probability `1 - rate` and
    /// rescaled by `1 / (1 - rate)`. Identity when `rate == 0`.
    pub fn dropout<R: rand::Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask = (0..self.value(x).len())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.mask(x, mask).expect("mask length matches by construction")
    }

    /// `out[i] = x[idx[i]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let len = self.value(x).rows();
        if let Some(&index) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::IndexOutOfRange { index, len });
        }
        let value = self.value(x).select_rows(idx);
        let rg = self.rg(x);
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// `out[idx[i]] += x[i]` into `n_rows` zero-initialised rows.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let xv = self.value(x);
        if idx.len() != xv.rows() {
            return Err(Error::Shape {
                op: "scatter_add_rows",
                left: xv.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        if let Some(&index) = idx.iter().find(|&&i| i >= n_rows) {
            return Err(Error::IndexOutOfRange { index, len: n_rows });
        }
        let c = xv.cols();
        let mut out = vec![0.0; n_rows * c];
        for (i, &t) in idx.iter().enumerate() {
            for (o, v) in out[t * c..(t + 1) * c].iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![n_rows, c], out),
            Op::ScatterAddRows(x, idx.to_vec()),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        // Nodes are appended in creation order, so index order is a valid
        // topological order and each node is visited once.
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if matches!(n.op, Op::Leaf) && n.requires_grad {
                    let g = grads
                        .get_mut(i)
                        .and_then(Option::take)
                        .unwrap_or_else(|| vec![0.0; n.value.len()]);
                    Some(Tensor::new(n.value.shape().to_vec(), g))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA = dC·Bᵀ
                acc(*a, &|da| {
                    gemm(m, n, k, g, (n as isize, 1), bv.data(), (1, n as isize), da, 1.0)
                });
                // dB = Aᵀ·dC
                acc(*b, &|db| {
                    gemm(k, m, n, av.data(), (1, k as isize), g, (n as isize, 1), db, 1.0)
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                acc(*x, &|dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|d| add_into(d, g));
                acc(*b, &|d| add_into(d, g));
            }
            Op::AddRow(x, bias) => {
                let c = self.value(*x).cols();
                acc(*x, &|d| add_into(d, g));
                acc(*bias, &|d| {
                    for row in g.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|d| {
                    for ((o, gi), bi) in d.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                });
                acc(*b, &|d| {
                    for ((o, gi), ai) in d.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Scale(x, k) => acc(*x, &|d| {
                for (o, gi) in d.iter_mut().zip(g) {
                    *o += gi * k;
                }
            }),
            Op::MulScalar(x, s) => {
                let k = self.value(*s).item();
                let xv = self.value(*x).data();
                acc(*x, &|d| {
                    for (o, gi) in d.iter_mut().zip(g) {
                        *o += gi * k;
                    }
                });
                acc(*s, &|d| d[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>());
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                acc(*x, &|d| {
                    for ((o, gi), xi) in d.iter_mut().zip(g).zip(xv) {
                        if (*lo..=*hi).contains(xi) {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|d| {
                    for ((o, gi), xi) in d.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                acc(*x, &|d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::SegmentMean { x, ids, counts } => {
                let c = self.value(*x).cols();
                acc(*x, &|d| {
                    for (i, &s) in ids.iter().enumerate() {
                        let inv = 1.0 / counts[s] as f64;
                        for (o, gi) in d[i * c..(i + 1) * c].iter_mut().zip(&g[s * c..(s + 1) * c]) {
                            *o += gi * inv;
                        }
                    }
                });
            }
            Op::CrossEntropy { pred, target, eps } => {
                let p = self.value(*pred).data();
                let g0 = g[0];
                acc(*pred, &|d| {
                    for ((o, &pv), &y) in d.iter_mut().zip(p).zip(target.data()) {
                        if y != 0.0 && pv > *eps {
                            *o -= g0 * y / pv;
                        }
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &v in xs {
                    let c = self.value(v).cols();
                    acc(v, &|d| {
                        for i in 0..rows {
                            add_into(
                                &mut d[i * c..(i + 1) * c],
                                &g[i * total + offset..i * total + offset + c],
                            );
                        }
                    });
                    offset += c;
                }
            }
            Op::Mask(x, mask) => acc(*x, &|d| {
                for ((o, gi), m) in d.iter_mut().zip(g).zip(mask) {
                    *o += gi * m;
                }
            }),
            Op::GatherRows(x, idx) => {
                let c = self.value(*x).cols();
                acc(*x, &|d| {
                    for (i, &src) in idx.iter().enumerate() {
                        add_into(&mut d[src * c..(src + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::ScatterAddRows(x, idx) => {
                let c = self.value(*x).cols();
                acc(*x, &|d| {
                    for (i, &t) in idx.iter().enumerate() {
                        add_into(&mut d[i * c..(i + 1) * c], &g[t * c..(t + 1) * c]);
                    }
                });
            }
        }
    }
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Untracked row softmax, shared by the recorded op and by inference code.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Gradients of every leaf created with [`Graph::param`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter leaf; zero-filled when the loss does not reach it.
    /// `None` for constants and interior nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central differences over every coordinate of every input.
    fn grad_check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let h = 1e-5;
        let eval = |inputs: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<_> = inputs.iter().map(|x| g.param(x.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|x| g.param(x.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).unwrap();
            for j in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "input {k} coord {j}: analytic {a} numeric {numeric}");
            }
        }
    }

    /// Reduces any output to a scalar through a fixed random weighting.
    fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = g.shape(x).to_vec();
        let w = g.constant(random(&shape, &mut rng));
        let weighted = g.mul(x, w).unwrap();
        let (rows, cols) = (g.value(x).rows(), g.value(x).cols());
        let r1 = g.constant(Tensor::filled(&[1, rows], 1.0));
        let c1 = g.constant(Tensor::filled(&[cols, 1], 1.0));
        let s = g.matmul(r1, weighted).unwrap();
        g.matmul(s, c1).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        let z = Tensor::zeros(&[2, 3]).matmul(&Tensor::filled(&[3, 4], 7.0)).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 4]));
        let b = t(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(a.matmul(&b).unwrap(), t(&[&[19.0, 22.0], &[43.0, 50.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&t(&[&[0.0, 0.0, 0.0], &[0.0, 2f64.ln(), f64::NEG_INFINITY]]));
        for v in y.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((y.get(1, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.get(1, 1) - 2.0 / 3.0).abs() < 1e-15);

        let x = t(&[&[0.3, -1.2, 4.0]]);
        let shifted = x.map(|v| v + 17.5);
        let (a, b) = (softmax_rows(&x), softmax_rows(&shifted));
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn segment_mean_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[1.0, 3.0], &[3.0, 5.0], &[7.0, 7.0]]));
        let m = g.segment_mean(x, &[0, 0, 1], 2).unwrap();
        assert_eq!(g.value(m), &t(&[&[2.0, 4.0], &[7.0, 7.0]]));
        let same = g.segment_mean(x, &[0, 1, 2], 3).unwrap();
        assert_eq!(g.value(same), g.value(x));
        assert!(matches!(
            g.segment_mean(x, &[0, 0, 2], 3),
            Err(Error::EmptySegment(1))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let p = g.constant(t(&[&[1.0, 0.0]]));
        let l = g.cross_entropy(p, &t(&[&[1.0, 0.0]]), DEFAULT_LOG_EPS).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let p = g.constant(t(&[&[0.5, 0.5]]));
        let l = g.cross_entropy(p, &t(&[&[0.0, 1.0]]), DEFAULT_LOG_EPS).unwrap();
        assert!((g.value(l).item() - 0.693147).abs() < 1e-6);

        let rows = t(&[&[0.2, 0.8], &[0.9, 0.1]]);
        let y = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let p = g.constant(rows);
        let both = g.cross_entropy(p, &y, DEFAULT_LOG_EPS).unwrap();
        let expected = -(0.2f64.ln()) - 0.1f64.ln();
        assert!((g.value(both).item() - expected).abs() < 1e-14);

        let bad = g.cross_entropy(p, &t(&[&[1.0, 0.0], &[1.0, 1.0]]), DEFAULT_LOG_EPS);
        assert!(matches!(bad, Err(Error::InvalidOneHot(1))));
    }

    #[test]
    fn cross_entropy_clamps_log_of_zero() {
        let mut g = Graph::new();
        let p = g.param(t(&[&[0.0, 1.0]]));
        let l = g.cross_entropy(p, &t(&[&[1.0, 0.0]]), DEFAULT_LOG_EPS).unwrap();
        assert!((g.value(l).item() + DEFAULT_LOG_EPS.ln()).abs() < 1e-12);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(p).unwrap().is_finite());
    }

    #[test]
    fn cross_entropy_propagates_nan() {
        let mut g = Graph::new();
        let p = g.param(t(&[&[f64::NAN, 0.5]]));
        let l = g.cross_entropy(p, &t(&[&[1.0, 0.0]]), DEFAULT_LOG_EPS).unwrap();
        assert!(g.value(l).item().is_nan());
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let p = g.param(Tensor::scalar(1.0));
        let sq = g.mul(x, x).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
        assert_eq!(grads.get(p).unwrap().item(), 0.0);

        let m = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(m), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn dropout_identity_at_zero_rate_and_inverted_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.param(Tensor::filled(&[50, 40], 1.0));
        assert_eq!(g.dropout(x, 0.0, &mut rng), x);
        let d = g.dropout(x, 0.25, &mut rng);
        let vals = g.value(d).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - 1.0).abs() < 0.1);
    }

    #[test]
    fn gradient_check_every_op() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&[3, 4], &mut rng);
            let b = random(&[4, 2], &mut rng);
            let c = random(&[3, 4], &mut rng);
            let row = random(&[1, 4], &mut rng);
            let s = random(&[1, 1], &mut rng);
            let ws = seed + 100;

            grad_check(vec![a.clone(), b.clone()], |g, v| {
                let y = g.matmul(v[0], v[1]).unwrap();
                weighted_sum(g, y, ws)
            });
            grad_check(vec![a.clone()], |g, v| {
                let y = g.transpose(v[0]);
                weighted_sum(g, y, ws)
            });
            grad_check(vec![a.clone(), c.clone()], |g, v| {
                let y = g.add(v[0], v[1]).unwrap();
                let y = g.mul(y, v[1]).unwrap();
                weighted_sum(g, y, ws)
            });
            grad_check(vec![a.clone(), row.clone()], |g, v| {
                let y = g.add_row(v[0], v[1]).unwrap();
                weighted_sum(g, y, ws)
            });
            grad_check(vec![a.clone(), s.clone()], |g, v| {
                let y = g.mul_scalar(v[0], v[1]).unwrap();
                let y = g.scale(y, -1.7);
                weighted_sum(g, y, ws)
            });
            grad_check(vec![a.clone()], |g, v| {
                let y = g.relu(v[0]);
                weighted_sum(g, y, ws)
            });
            grad_check(vec![a.clone()], |g, v| {
                let y = g.clamp(v[0], -0.4, 0.3);
                weighted_sum(g, y, ws)
            });
            grad_check(vec![a.clone()], |g, v| {
                let y = g.softmax_rows(v[0]);
                weighted_sum(g, y, ws)
            });
            grad_check(vec![a.clone()], |g, v| {
                let y = g.segment_mean(v[0], &[1, 0, 1], 2).unwrap();
                weighted_sum(g, y, ws)
            });
            grad_check(vec![a.clone(), c.clone()], |g, v| {
                let y = g.concat_cols(&[v[0], v[1]]).unwrap();
                weighted_sum(g, y, ws)
            });
            grad_check(vec![a.clone()], |g, v| {
                let mask = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.25 }).collect();
                let y = g.mask(v[0], mask).unwrap();
                weighted_sum(g, y, ws)
            });
            grad_check(vec![a.clone()], |g, v| {
                let y = g.gather_rows(v[0], &[2, 0, 2, 1]).unwrap();
                weighted_sum(g, y, ws)
            });
            grad_check(vec![a.clone()], |g, v| {
                let y = g.scatter_add_rows(v[0], &[1, 1, 0], 3).unwrap();
                weighted_sum(g, y, ws)
            });
            let logits = random(&[3, 2], &mut rng);
            let y = t(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
            grad_check(vec![logits], |g, v| {
                let p = g.softmax_rows(v[0]);
                g.cross_entropy(p, &y, DEFAULT_LOG_EPS).unwrap()
            });
        }
    }

    #[test]
    fn backward_is_deterministic_and_does_not_accumulate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[5, 6], &mut rng);
        let b = random(&[6, 3], &mut rng);
        let run = || {
            let mut g = Graph::new();
            let (va, vb) = (g.param(a.clone()), g.param(b.clone()));
            let y = g.matmul(va, vb).unwrap();
            let y = g.softmax_rows(y);
            let out = weighted_sum(&mut g, y, 3);
            let grads = g.backward(out).unwrap();
            (grads.get(va).unwrap().clone(), grads.get(vb).unwrap().clone())
        };
        let first = run();
        let second = run();
        assert_eq!(first, second);
    }

    #[test]
    fn softmax_rows_are_probability_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let x = random(&[4, 7], &mut rng).map(|v| v * 30.0);
            let y = softmax_rows(&x);
            for i in 0..4 {
                let s: f64 = y.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(y.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
