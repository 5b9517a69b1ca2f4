//! Immutable dense tensors (row-major) and the plain forward kernels the
//! gradient tape records.
//!
//! Every constructor and kernel rejects NaN/Inf outputs and shape mismatches;
//! the only implicit broadcast anywhere is the documented row-wise bias add.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, enforcing the shape/length and finiteness invariants.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(
                "tensor",
                "positive dimension sizes",
                fmt_shape(&shape),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("{numel} elements for shape {}", fmt_shape(&shape)),
                format!("{} elements", data.len()),
            ));
        }
        let t = Tensor {
            shape,
            data: Arc::new(data),
        };
        t.check_finite("tensor construction")?;
        Ok(t)
    }

    pub(crate) fn from_vec_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![T::zero(); numel]),
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel])
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Tensor {
            shape: vec![n, n],
            data: Arc::new(data),
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_f64s(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::from_vec(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Number of rows when viewed as a matrix (rank-1 tensors are one row).
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[self.shape.len() - 1],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols() + col]
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {}",
                fmt_shape(&self.shape)
            )));
        }
        Ok(self.data[0])
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: context.to_string(),
            });
        }
        Ok(())
    }

    /// Mutates in place when uniquely owned, cloning the buffer otherwise.
    pub(crate) fn data_mut(&mut self) -> &mut Vec<T> {
        Arc::make_mut(&mut self.data)
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", self.numel()),
                fmt_shape(&shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    fn require_rank2(&self, context: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(
                context,
                "rank-2 tensor",
                fmt_shape(&self.shape),
            ));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

// ---------------------------------------------------------------------------
// Forward kernels. These are the single source of truth for each operation;
// the tape wraps them and adds the corresponding backward rule.
// ---------------------------------------------------------------------------

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.require_rank2("matmul lhs")?;
    let (kb, n) = b.require_rank2("matmul rhs")?;
    if k != kb {
        return Err(Error::shape(
            "matmul",
            format!("inner dims equal ({k})"),
            format!("{k} vs {kb}"),
        ));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    finite(Tensor::from_vec_unchecked(vec![m, n], out), "matmul")
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.require_rank2("transpose")?;
    let ad = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Ok(Tensor::from_vec_unchecked(vec![n, m], out))
}

fn zip_same_shape<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    context: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            context,
            fmt_shape(a.shape()),
            fmt_shape(b.shape()),
        ));
    }
    let out: Vec<T> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    finite(Tensor::from_vec_unchecked(a.shape().to_vec(), out), context)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same_shape(a, b, "add", |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same_shape(a, b, "sub", |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same_shape(a, b, "mul", |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Result<Tensor<T>> {
    let out: Vec<T> = a.data().iter().map(|&x| x * c).collect();
    finite(Tensor::from_vec_unchecked(a.shape().to_vec(), out), "scale")
}

/// `a[m×n] + b[n]` broadcast over rows — the one documented broadcast.
pub fn add_row_broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.require_rank2("add_row_broadcast lhs")?;
    if b.numel() != n || b.rank() > 2 || (b.rank() == 2 && b.shape()[0] != 1) {
        return Err(Error::shape(
            "add_row_broadcast",
            format!("bias of {n} elements"),
            fmt_shape(b.shape()),
        ));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = ad[i * n + j] + bd[j];
        }
    }
    finite(
        Tensor::from_vec_unchecked(vec![m, n], out),
        "add_row_broadcast",
    )
}

pub fn relu<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let out: Vec<T> = a
        .data()
        .iter()
        .map(|&x| if x > T::zero() { x } else { T::zero() })
        .collect();
    Ok(Tensor::from_vec_unchecked(a.shape().to_vec(), out))
}

/// Row-wise softmax, stabilized by row-max subtraction.
pub fn softmax_rows<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.require_rank2("softmax_rows")?;
    if n == 0 {
        return Err(Error::shape("softmax_rows", "nonempty rows", "0 columns"));
    }
    let ad = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &ad[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for j in 0..n {
            let e = (row[j] - max).exp();
            out[i * n + j] = e;
            denom += e;
        }
        for j in 0..n {
            out[i * n + j] = out[i * n + j] / denom;
        }
    }
    finite(Tensor::from_vec_unchecked(vec![m, n], out), "softmax_rows")
}

/// Row-wise log-softmax (stabilized); preferred over `softmax_rows().ln()`
/// inside cross-entropy style losses.
pub fn log_softmax_rows<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.require_rank2("log_softmax_rows")?;
    let ad = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &ad[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for &v in row {
            denom += (v - max).exp();
        }
        let lse = max + denom.ln();
        for j in 0..n {
            out[i * n + j] = row[j] - lse;
        }
    }
    finite(
        Tensor::from_vec_unchecked(vec![m, n], out),
        "log_softmax_rows",
    )
}

pub fn ln<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let out: Vec<T> = a.data().iter().map(|&x| x.ln()).collect();
    finite(Tensor::from_vec_unchecked(a.shape().to_vec(), out), "ln")
}

pub fn sum_all<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let s: T = a.data().iter().cloned().sum();
    finite(Tensor::from_vec_unchecked(vec![1], vec![s]), "sum_all")
}

/// Per-row dot product of two equally shaped matrices: `out[i] = a[i,:]·b[i,:]`.
pub fn row_dot<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.require_rank2("row_dot lhs")?;
    if b.shape() != a.shape() {
        return Err(Error::shape(
            "row_dot",
            fmt_shape(a.shape()),
            fmt_shape(b.shape()),
        ));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); m];
    for i in 0..m {
        let mut s = T::zero();
        for j in 0..n {
            s += ad[i * n + j] * bd[i * n + j];
        }
        out[i] = s;
    }
    finite(Tensor::from_vec_unchecked(vec![m], out), "row_dot")
}

/// Column pick per row: `out[i] = a[i, idx[i]]`.
pub fn pick_cols<T: Scalar>(a: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let (m, n) = a.require_rank2("pick_cols")?;
    if idx.len() != m {
        return Err(Error::shape(
            "pick_cols",
            format!("{m} indices"),
            format!("{}", idx.len()),
        ));
    }
    let mut out = vec![T::zero(); m];
    for (i, &j) in idx.iter().enumerate() {
        if j >= n {
            return Err(Error::Contract(format!(
                "pick_cols index {j} out of range for {n} columns"
            )));
        }
        out[i] = a.data()[i * n + j];
    }
    Ok(Tensor::from_vec_unchecked(vec![m], out))
}

/// Column range `[start, start+len)` of a matrix.
pub fn slice_cols<T: Scalar>(a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (m, n) = a.require_rank2("slice_cols")?;
    if len == 0 || start + len > n {
        return Err(Error::shape(
            "slice_cols",
            format!("range within {n} columns"),
            format!("{start}..{}", start + len),
        ));
    }
    let mut out = vec![T::zero(); m * len];
    for i in 0..m {
        out[i * len..(i + 1) * len].copy_from_slice(&a.row(i)[start..start + len]);
    }
    Ok(Tensor::from_vec_unchecked(vec![m, len], out))
}

/// Horizontal concatenation of matrices with equal row counts.
pub fn concat_cols<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::Contract("concat_cols of zero tensors".into()));
    }
    let (m, _) = parts[0].require_rank2("concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pm, pn) = p.require_rank2("concat_cols")?;
        if pm != m {
            return Err(Error::shape(
                "concat_cols",
                format!("{m} rows"),
                format!("{pm} rows"),
            ));
        }
        widths.push(pn);
    }
    let n: usize = widths.iter().sum();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let mut off = 0;
        for (p, &w) in parts.iter().zip(widths.iter()) {
            out[i * n + off..i * n + off + w].copy_from_slice(p.row(i));
            off += w;
        }
    }
    Ok(Tensor::from_vec_unchecked(vec![m, n], out))
}

fn finite<T: Scalar>(t: Tensor<T>, context: &'static str) -> Result<Tensor<T>> {
    t.check_finite(context)?;
    Ok(t)
}
