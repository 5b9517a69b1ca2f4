//! Reverse-mode gradient tape over whole-tensor primitives.
//!
//! Nodes are appended in forward order, so a single reverse sweep over the
//! arena visits them in reverse topological order exactly once. The tape is
//! single-writer; batch parallelism builds one tape per image instead of
//! sharing one.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::{self, Tensor};
use crate::numerics::Mode;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddRow(usize, usize),
    Relu(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Ln(usize),
    SumAll(usize),
    RowDot(usize, usize),
    PickCols(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize, usize),
    Reshape(usize),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor (parameter or constant) as a leaf node.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Matmul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = tensor::transpose(self.value(a))?;
        Ok(self.push(value, Op::Transpose(a.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = tensor::scale(self.value(a), c)?;
        Ok(self.push(value, Op::Scale(a.0, c)))
    }

    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = tensor::add_row_broadcast(self.value(a), self.value(bias))?;
        Ok(self.push(value, Op::AddRow(a.0, bias.0)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = tensor::relu(self.value(a))?;
        Ok(self.push(value, Op::Relu(a.0)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = tensor::softmax_rows(self.value(a))?;
        Ok(self.push(value, Op::SoftmaxRows(a.0)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = tensor::log_softmax_rows(self.value(a))?;
        Ok(self.push(value, Op::LogSoftmaxRows(a.0)))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let value = tensor::ln(self.value(a))?;
        Ok(self.push(value, Op::Ln(a.0)))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let value = tensor::sum_all(self.value(a))?;
        Ok(self.push(value, Op::SumAll(a.0)))
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::row_dot(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::RowDot(a.0, b.0)))
    }

    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = tensor::pick_cols(self.value(a), idx)?;
        Ok(self.push(value, Op::PickCols(a.0, idx.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|v| self.value(*v)).collect();
        let value = tensor::concat_cols(&tensors)?;
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|v| v.0).collect())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = tensor::slice_cols(self.value(a), start, len)?;
        Ok(self.push(value, Op::SliceCols(a.0, start, len)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a.0)))
    }

    /// Inverted dropout: zero each element with probability `p` at train time
    /// and scale survivors by `1/(1−p)`; identity in eval mode and at `p = 0`.
    pub fn dropout(&mut self, a: Var, p: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let shape = self.value(a).shape().to_vec();
        let numel = self.value(a).numel();
        let mask: Vec<T> = (0..numel)
            .map(|_| {
                if f64::sample_uniform(rng) < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mask = self.leaf(Tensor::from_vec_unchecked(shape, mask));
        self.mul(a, mask)
    }

    // -- convenience compositions ------------------------------------------

    /// `x·w (+ broadcast b)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        match b {
            Some(bias) => self.add_row_broadcast(xw, bias),
            None => Ok(xw),
        }
    }

    /// Mean of all elements.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    /// Sum of squared elements.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        self.sum_all(sq)
    }

    /// Reverse sweep from a scalar loss node.
    ///
    /// Returns one gradient per node; leaves not reached by the sweep keep a
    /// zero gradient of their own shape.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Vec<T>> = self
            .nodes
            .iter()
            .map(|n| vec![T::zero(); n.value.numel()])
            .collect();
        grads[loss.0][0] = T::one();

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = grads[i].clone();
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                    let n = self.nodes[*b].value.cols();
                    let ad = self.nodes[*a].value.data();
                    let bd = self.nodes[*b].value.data();
                    // dA += G · Bᵀ
                    {
                        let ga = &mut grads[*a];
                        for i2 in 0..m {
                            for p in 0..k {
                                let mut s = T::zero();
                                for j in 0..n {
                                    s += g[i2 * n + j] * bd[p * n + j];
                                }
                                ga[i2 * k + p] += s;
                            }
                        }
                    }
                    // dB += Aᵀ · G
                    {
                        let gb = &mut grads[*b];
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = T::zero();
                                for i2 in 0..m {
                                    s += ad[i2 * k + p] * g[i2 * n + j];
                                }
                                gb[p * n + j] += s;
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (node.value.rows(), node.value.cols());
                    let ga = &mut grads[*a];
                    for i2 in 0..m {
                        for j in 0..n {
                            ga[j * m + i2] += g[i2 * n + j];
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], &g);
                    accumulate(&mut grads[*b], &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[*a], &g);
                    for (dst, &gv) in grads[*b].iter_mut().zip(g.iter()) {
                        *dst -= gv;
                    }
                }
                Op::Mul(a, b) => {
                    let ad = self.nodes[*a].value.data();
                    let bd = self.nodes[*b].value.data();
                    for (j, &gv) in g.iter().enumerate() {
                        grads[*a][j] += gv * bd[j];
                    }
                    for (j, &gv) in g.iter().enumerate() {
                        grads[*b][j] += gv * ad[j];
                    }
                }
                Op::Scale(a, c) => {
                    for (dst, &gv) in grads[*a].iter_mut().zip(g.iter()) {
                        *dst += gv * *c;
                    }
                }
                Op::AddRow(a, bias) => {
                    accumulate(&mut grads[*a], &g);
                    let n = self.nodes[*bias].value.numel();
                    let gb = &mut grads[*bias];
                    for (j, &gv) in g.iter().enumerate() {
                        gb[j % n] += gv;
                    }
                }
                Op::Relu(a) => {
                    let ad = self.nodes[*a].value.data();
                    for (j, &gv) in g.iter().enumerate() {
                        if ad[j] > T::zero() {
                            grads[*a][j] += gv;
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let (m, n) = (node.value.rows(), node.value.cols());
                    let s = node.value.data();
                    let ga = &mut grads[*a];
                    for i2 in 0..m {
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += g[i2 * n + j] * s[i2 * n + j];
                        }
                        for j in 0..n {
                            ga[i2 * n + j] += s[i2 * n + j] * (g[i2 * n + j] - dot);
                        }
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    // d/dx log_softmax = g − softmax(x)·rowsum(g)
                    let (m, n) = (node.value.rows(), node.value.cols());
                    let logp = node.value.data();
                    let ga = &mut grads[*a];
                    for i2 in 0..m {
                        let mut gsum = T::zero();
                        for j in 0..n {
                            gsum += g[i2 * n + j];
                        }
                        for j in 0..n {
                            ga[i2 * n + j] += g[i2 * n + j] - logp[i2 * n + j].exp() * gsum;
                        }
                    }
                }
                Op::Ln(a) => {
                    let ad = self.nodes[*a].value.data();
                    for (j, &gv) in g.iter().enumerate() {
                        grads[*a][j] += gv / ad[j];
                    }
                }
                Op::SumAll(a) => {
                    let gv = g[0];
                    for dst in grads[*a].iter_mut() {
                        *dst += gv;
                    }
                }
                Op::RowDot(a, b) => {
                    let (m, n) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                    let ad = self.nodes[*a].value.data();
                    let bd = self.nodes[*b].value.data();
                    for i2 in 0..m {
                        for j in 0..n {
                            grads[*a][i2 * n + j] += g[i2] * bd[i2 * n + j];
                        }
                        for j in 0..n {
                            grads[*b][i2 * n + j] += g[i2] * ad[i2 * n + j];
                        }
                    }
                }
                Op::PickCols(a, idx) => {
                    let n = self.nodes[*a].value.cols();
                    let ga = &mut grads[*a];
                    for (i2, &j) in idx.iter().enumerate() {
                        ga[i2 * n + j] += g[i2];
                    }
                }
                Op::ConcatCols(parts) => {
                    let m = node.value.rows();
                    let n = node.value.cols();
                    let mut off = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.cols();
                        let gp = &mut grads[p];
                        for i2 in 0..m {
                            for j in 0..w {
                                gp[i2 * w + j] += g[i2 * n + off + j];
                            }
                        }
                        off += w;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let m = node.value.rows();
                    let n = self.nodes[*a].value.cols();
                    let ga = &mut grads[*a];
                    for i2 in 0..m {
                        for j in 0..*len {
                            ga[i2 * n + start + j] += g[i2 * len + j];
                        }
                    }
                }
                Op::Reshape(a) => {
                    accumulate(&mut grads[*a], &g);
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, buf)| Tensor::from_vec_unchecked(self.nodes[i].value.shape().to_vec(), buf))
            .collect();
        Ok(Grads { grads })
    }
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}

/// Gradients produced by one backward sweep, indexable by `Var`.
pub struct Grads<T: Scalar> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn of(&self, v: Var) -> &Tensor<T> {
        &self.grads[v.0]
    }
}
