//! Dense row-major tensors, the recording tape, parameter storage and the
//! finite-difference gradient oracle.
//!
//! Matrix-shaped operations accept rank-1 and rank-2 tensors. A rank-1
//! tensor of length `n` behaves as an `n x 1` column for those operations,
//! so axis 0 is its only axis.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, grad_check_params, ParamCheck, DEFAULT_EPS};
pub use params::{glorot_uniform, ParamId, ParamStore};
pub use tape::{Activation, Gradients, Mode, Tape, Var};

use crate::error::{Error, Result};

/// A dense array of `f64` values with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a matrix from row slices. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "from_rows",
                lhs: vec![cols],
                rhs: vec![bad.len()],
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::DataLength {
                len: g.len(),
                shape: self.shape.clone(),
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarRoot(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` view for matrix operations.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((*n, 1)),
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Rank {
                op,
                rank: self.rank(),
            }),
        }
    }

    /// Entry `(r, c)` of a rank-2 tensor (or `r` of a column vector).
    pub fn at(&self, r: usize, c: usize) -> f64 {
        let cols = if self.shape.len() == 2 { self.shape[1] } else { 1 };
        self.data[r * cols + c]
    }

    /// Column `c` of a matrix as an owned vector.
    pub fn column(&self, c: usize) -> Vec<f64> {
        let (rows, cols) = self.dims2("column").expect("column of a matrix");
        (0..rows).map(|r| self.data[r * cols + c]).collect()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if self.rank() != 2 || other.rank() != 2 || k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| v.max(0.0))
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn tanh(&self) -> Self {
        self.map(f64::tanh)
    }

    /// Softmax along `axis`, stabilised by subtracting the maximum.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (rows, cols) = self.dims2("softmax")?;
        check_axis("softmax", axis, &self.shape)?;
        let mut out = self.data.clone();
        if axis == 1 {
            for r in 0..rows {
                softmax_strided(&mut out, r * cols, 1, cols);
            }
        } else {
            for c in 0..cols {
                softmax_strided(&mut out, c, cols, rows);
            }
        }
        Self::new(self.shape.clone(), out)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&self, other: &Tensor, axis: usize) -> Result<Self> {
        check_axis("concat", axis, &self.shape)?;
        if self.rank() != other.rank() {
            return Err(self.shape_err("concat", other));
        }
        let (r1, c1) = self.dims2("concat")?;
        let (r2, c2) = other.dims2("concat")?;
        if axis == 0 {
            if c1 != c2 {
                return Err(self.shape_err("concat", other));
            }
            let mut data = self.data.clone();
            data.extend_from_slice(&other.data);
            let mut shape = self.shape.clone();
            shape[0] = r1 + r2;
            Self::new(shape, data)
        } else {
            if r1 != r2 {
                return Err(self.shape_err("concat", other));
            }
            let mut data = Vec::with_capacity(r1 * (c1 + c2));
            for r in 0..r1 {
                data.extend_from_slice(&self.data[r * c1..(r + 1) * c1]);
                data.extend_from_slice(&other.data[r * c2..(r + 1) * c2]);
            }
            Self::new(vec![r1, c1 + c2], data)
        }
    }

    /// `len` consecutive indices along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        check_axis("slice", axis, &self.shape)?;
        let (rows, cols) = self.dims2("slice")?;
        let extent = if axis == 0 { rows } else { cols };
        if start + len > extent {
            return Err(Error::Shape {
                op: "slice",
                lhs: self.shape.clone(),
                rhs: vec![start, len],
            });
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let data = if axis == 0 {
            self.data[start * cols..(start + len) * cols].to_vec()
        } else {
            (0..rows)
                .flat_map(|r| self.data[r * cols + start..r * cols + start + len].iter().copied())
                .collect()
        };
        Self::new(shape, data)
    }

    /// Mean along `axis`, keeping that axis with extent 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        check_axis("mean_axis", axis, &self.shape)?;
        let (rows, cols) = self.dims2("mean_axis")?;
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        let data = if axis == 0 {
            (0..cols)
                .map(|c| (0..rows).map(|r| self.data[r * cols + c]).sum::<f64>() / rows as f64)
                .collect()
        } else {
            (0..rows)
                .map(|r| self.data[r * cols..(r + 1) * cols].iter().sum::<f64>() / cols as f64)
                .collect()
        };
        Self::new(shape, data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    fn shape_err(&self, op: &'static str, other: &Tensor) -> Error {
        Error::Shape {
            op,
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^v)` without overflow.
pub(crate) fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn check_axis(op: &'static str, axis: usize, shape: &[usize]) -> Result<()> {
    if axis >= shape.len().max(1) {
        return Err(Error::Axis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

fn softmax_strided(buf: &mut [f64], offset: usize, stride: usize, n: usize) {
    if n == 0 {
        return;
    }
    let max = (0..n)
        .map(|i| buf[offset + i * stride])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for i in 0..n {
        let e = (buf[offset + i * stride] - max).exp();
        buf[offset + i * stride] = e;
        total += e;
    }
    for i in 0..n {
        buf[offset + i * stride] /= total;
    }
}

/// `out += a (m x k) * b (k x n)`, all row-major.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}
