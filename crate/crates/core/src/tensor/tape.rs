//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! information to push an adjoint back to its inputs. Nodes are only ever
//! appended, so record order is a topological order and the backward pass
//! is a single reverse sweep.

use std::collections::HashMap;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::{sigmoid, softplus, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var, usize),
    Concat(Var, Var, usize),
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    MeanAxis(Var, usize),
    Mask(Var, Vec<f64>),
    Embed { table: Var, ids: Vec<usize> },
    BceLogits { logits: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations. Confined to the thread that
/// builds it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<(ParamId, Var)>,
    bound_lookup: HashMap<ParamId, Var>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        self.get(v)
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.to_vec()).expect("gradient shape"))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records an input. Its gradient is tracked if the tensor requires it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Binds a stored parameter, reusing the node if already bound.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound_lookup.get(&id) {
            return v;
        }
        let t = store.get(id).clone();
        let v = self.push(t, Op::Leaf, true);
        self.bound.push((id, v));
        self.bound_lookup.insert(id, v);
        v
    }

    /// Parameters bound so far, in binding order.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().copied()
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.bound_lookup.contains_key(&id)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.binary(a, b, v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    /// `x + b` with `b` (length = rows of `x`) broadcast across columns.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        let (rows, cols) = xv.dims2("add_bias")?;
        if bv.len() != rows {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = xv.data().to_vec();
        for r in 0..rows {
            let br = bv.data()[r];
            out[r * cols..(r + 1) * cols].iter_mut().for_each(|o| *o += br);
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.binary(x, b, v, Op::AddBias(x, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        self.unary(x, v, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).relu();
        self.unary(x, v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).sigmoid();
        self.unary(x, v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).tanh();
        self.unary(x, v, Op::Tanh(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x).softmax(axis)?;
        Ok(self.unary(x, v, Op::Softmax(x, axis)))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let v = self.value(a).concat(self.value(b), axis)?;
        Ok(self.binary(a, b, v, Op::Concat(a, b, axis)))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice(axis, start, len)?;
        Ok(self.unary(x, v, Op::Slice { x, axis, start }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        Ok(self.unary(x, v, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.unary(x, v, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.unary(x, v, Op::Sum(x))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x).mean_axis(axis)?;
        Ok(self.unary(x, v, Op::MeanAxis(x, axis)))
    }

    /// Activation by kind.
    pub fn activate(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Tanh => self.tanh(x),
        }
    }

    /// `W x + b`. `x` is a vector of length `d_in` or a `d_in x B` batch
    /// whose columns are transformed independently.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        if self.value(x).rank() == 1 {
            let n = self.value(x).len();
            let col = self.reshape(x, &[n, 1])?;
            let y = self.matmul(w, col)?;
            let y = self.add_bias(y, b)?;
            let rows = self.value(y).shape()[0];
            self.reshape(y, &[rows])
        } else {
            let y = self.matmul(w, x)?;
            self.add_bias(y, b)
        }
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// `1 / (1 - p)`. Identity in eval mode.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::DropoutProbability(p));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.unary(x, v, Op::Mask(x, mask)))
    }

    /// Gathers rows of `table` (vocab x width) as columns: width x ids.len().
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, width) = tv.dims2("embed")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside vocabulary of {vocab}"
            )));
        }
        let n = ids.len();
        let mut out = vec![0.0; width * n];
        for (c, &id) in ids.iter().enumerate() {
            for e in 0..width {
                out[e * n + c] = tv.data()[id * width + e];
            }
        }
        let v = Tensor::new(vec![width, n], out)?;
        Ok(self.unary(
            table,
            v,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`
    /// (targets may be fractional), computed from logits for stability.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() || targets.is_empty() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: z.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let n = targets.len() as f64;
        let loss = z
            .data()
            .iter()
            .zip(targets)
            .map(|(&zi, &y)| softplus(zi) - y * zi)
            .sum::<f64>()
            / n;
        let v = Tensor::scalar(loss);
        Ok(self.unary(
            logits,
            v,
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar root. Returns fresh adjoints; nothing is
    /// accumulated into parameters until [`ParamStore::accumulate`] is called.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2("matmul")?;
                let (_, n) = bv.dims2("matmul")?;
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.acc(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let arp = av.data()[r * k + p];
                            if arp == 0.0 {
                                continue;
                            }
                            db[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(d, gv)| *d += arp * gv);
                        }
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g.to_vec());
                let (rows, cols) = out.dims2("add_bias")?;
                let db = (0..rows)
                    .map(|r| g[r * cols..(r + 1) * cols].iter().sum())
                    .collect();
                self.acc(grads, *b, db);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                self.acc(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::Scale(x, c) => self.acc(grads, *x, g.iter().map(|v| v * c).collect()),
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| if *y > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Softmax(x, axis) => {
                let (rows, cols) = out.dims2("softmax")?;
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                let (outer, inner, stride_o, stride_i) = if *axis == 1 {
                    (rows, cols, cols, 1)
                } else {
                    (cols, rows, 1, cols)
                };
                for o in 0..outer {
                    let base = o * stride_o;
                    let dot: f64 = (0..inner)
                        .map(|j| g[base + j * stride_i] * y[base + j * stride_i])
                        .sum();
                    for j in 0..inner {
                        let idx = base + j * stride_i;
                        d[idx] = y[idx] * (g[idx] - dot);
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Concat(a, b, axis) => {
                let (r1, c1) = self.value(*a).dims2("concat")?;
                let (_, c2) = self.value(*b).dims2("concat")?;
                if *axis == 0 {
                    let split = r1 * c1;
                    self.acc(grads, *a, g[..split].to_vec());
                    self.acc(grads, *b, g[split..].to_vec());
                } else {
                    let w = c1 + c2;
                    let mut ga = Vec::with_capacity(r1 * c1);
                    let mut gb = Vec::with_capacity(r1 * c2);
                    for r in 0..r1 {
                        ga.extend_from_slice(&g[r * w..r * w + c1]);
                        gb.extend_from_slice(&g[r * w + c1..(r + 1) * w]);
                    }
                    self.acc(grads, *a, ga);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Slice { x, axis, start } => {
                let xv = self.value(*x);
                let (_, cols) = xv.dims2("slice")?;
                let (orows, ocols) = out.dims2("slice")?;
                let mut d = vec![0.0; xv.len()];
                if *axis == 0 {
                    d[start * cols..(start + orows) * cols].copy_from_slice(g);
                } else {
                    for r in 0..orows {
                        d[r * cols + start..r * cols + start + ocols]
                            .copy_from_slice(&g[r * ocols..(r + 1) * ocols]);
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Transpose(x) => {
                let (r, c) = out.dims2("transpose")?;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g[i * c + j];
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Reshape(x) => self.acc(grads, *x, g.to_vec()),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![g[0]; n]);
            }
            Op::MeanAxis(x, axis) => {
                let (rows, cols) = self.value(*x).dims2("mean_axis")?;
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        d[r * cols + c] = if *axis == 0 {
                            g[c] / rows as f64
                        } else {
                            g[r] / cols as f64
                        };
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Mask(x, mask) => {
                self.acc(grads, *x, g.iter().zip(mask).map(|(a, m)| a * m).collect());
            }
            Op::Embed { table, ids } => {
                let tv = self.value(*table);
                let (_, width) = tv.dims2("embed")?;
                let n = ids.len();
                let mut d = vec![0.0; tv.len()];
                for (c, &id) in ids.iter().enumerate() {
                    for e in 0..width {
                        d[id * width + e] += g[e * n + c];
                    }
                }
                self.acc(grads, *table, d);
            }
            Op::BceLogits { logits, targets } => {
                let z = self.value(*logits).data();
                let n = targets.len() as f64;
                let d = z
                    .iter()
                    .zip(targets)
                    .map(|(&zi, &y)| g[0] * (sigmoid(zi) - y) / n)
                    .collect();
                self.acc(grads, *logits, d);
            }
        }
        Ok(())
    }
}

/// Elementwise non-linearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}
