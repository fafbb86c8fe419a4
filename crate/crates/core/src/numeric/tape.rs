//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every op appends one node holding its forward value. Nodes are appended
//! after their parents, so a single reverse sweep over the node list is a
//! valid topological traversal.

use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Relu,
    Elu,
    Abs,
    Square,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    Affine(usize, f64),
    MatMul(usize, usize),
    AddBias(usize, usize),
    MulCol(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols { src: usize, start: usize },
    SliceRows { src: usize, start: usize },
    StackRows(Vec<usize>),
    GatherRows { src: usize, index: Vec<usize> },
    ScatterAddRows { src: usize, index: Vec<usize> },
    ReplaceRows { base: usize, src: usize, index: Vec<usize> },
    SumAll(usize),
    SumCols(usize),
    Softmax { src: usize, axis: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Unary(u, _) => match u {
                Unary::Tanh => "tanh",
                Unary::Sigmoid => "sigmoid",
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Relu => "relu",
                Unary::Elu => "elu",
                Unary::Abs => "abs",
                Unary::Square => "square",
            },
            Op::Affine(..) => "affine",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::MulCol(..) => "mul_col",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::StackRows(_) => "stack_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::SumAll(_) => "sum_all",
            Op::SumCols(_) => "sum_cols",
            Op::Softmax { .. } => "softmax",
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    tracked: bool,
}

/// Operation record for one forward pass. Build a fresh tape (or
/// [`clear`](Tape::clear) it) per batch.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient buffer of `v`, or `None` when `v` is untracked or the loss
    /// does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.get(v)
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.to_vec()).expect("grad shape"))
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers an input that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// First node (in recording order) holding a NaN or infinity, with the
    /// name of the op that produced it.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str, Vec<usize>)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name(), n.value.shape().to_vec()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, parents: &[usize]) -> bool {
        parents.iter().any(|&p| self.nodes[p].tracked)
    }

    // ---------------------------------------------------------------------
    // elementwise

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if vb.numel() == 1 {
            let y = vb.data()[0];
            let data = va.data().iter().map(|&x| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if va.numel() == 1 {
            let x = va.data()[0];
            let data = vb.data().iter().map(|&y| f(x, y)).collect();
            Tensor::new(vb.shape().to_vec(), data)?
        } else {
            let name = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(Error::shape(name, va.shape(), vb.shape()));
        };
        let tracked = self.tracked(&[a.0, b.0]);
        Ok(self.push(out, Op::Binary(kind, a.0, b.0), tracked))
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

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let v = self.value(x);
        if kind == Unary::Log {
            if let Some(bad) = v.data().iter().find(|&&x| !(x > T::zero())) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let one = T::one();
        let f = |x: T| match kind {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => {
                if x >= T::zero() {
                    one / (one + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (one + e)
                }
            }
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Relu => x.max(T::zero()),
            Unary::Elu => {
                if x > T::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
        };
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())?;
        let tracked = self.tracked(&[x.0]);
        Ok(self.push(out, Op::Unary(kind, x.0), tracked))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Elu, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, b) = (T::lit(scale), T::lit(shift));
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| s * x + b).collect())
            .expect("same shape");
        let tracked = self.tracked(&[x.0]);
        self.push(out, Op::Affine(x.0, scale), tracked)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    // ---------------------------------------------------------------------
    // matrix ops (operands viewed as rows x last-axis)

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, T::zero());
        let tracked = self.tracked(&[a.0, b.0]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a.0, b.0), tracked))
    }

    /// Adds a `[C]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.numel() != vx.cols() || vb.shape().len() != 1 {
            return Err(Error::shape("add_bias", vx.shape(), vb.shape()));
        }
        let c = vx.cols();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % c])
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let tracked = self.tracked(&[x.0, bias.0]);
        Ok(self.push(out, Op::AddBias(x.0, bias.0), tracked))
    }

    /// Scales row `r` of `x` by `w[r]`, where `w` has one column.
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vw.cols() != 1 || vw.rows() != vx.rows() {
            return Err(Error::shape("mul_col", vx.shape(), vw.shape()));
        }
        let c = vx.cols();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * vw.data()[i / c])
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let tracked = self.tracked(&[x.0, w.0]);
        Ok(self.push(out, Op::MulCol(x.0, w.0), tracked))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let tracked = self.tracked(&ids);
        Ok(self.push(Tensor::new([rows, total], data)?, Op::ConcatCols(ids), tracked))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let c = v.cols();
        if start + len > c {
            return Err(Error::shape("slice_cols", v.shape(), &[start, len]));
        }
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let tracked = self.tracked(&[x.0]);
        Ok(self.push(
            Tensor::new([rows, len], data)?,
            Op::SliceCols { src: x.0, start },
            tracked,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if start + len > v.rows() {
            return Err(Error::shape("slice_rows", v.shape(), &[start, len]));
        }
        let c = v.cols();
        let data = v.data()[start * c..(start + len) * c].to_vec();
        let tracked = self.tracked(&[x.0]);
        Ok(self.push(
            Tensor::new([len, c], data)?,
            Op::SliceRows { src: x.0, start },
            tracked,
        ))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(Error::shape(
                    "stack_rows",
                    self.value(parts[0]).shape(),
                    v.shape(),
                ));
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / c.max(1);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let tracked = self.tracked(&ids);
        Ok(self.push(Tensor::new([rows, c], data)?, Op::StackRows(ids), tracked))
    }

    /// `out[i] = x[index[i]]` row-wise.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let (rows, c) = (v.rows(), v.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", v.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(v.row(i));
        }
        let tracked = self.tracked(&[x.0]);
        Ok(self.push(
            Tensor::new([index.len(), c], data)?,
            Op::GatherRows {
                src: x.0,
                index: index.to_vec(),
            },
            tracked,
        ))
    }

    /// `out[index[i]] += x[i]` into a zero `[n_rows, C]` buffer.
    pub fn scatter_add_rows(&mut self, x: Var, index: &[usize], n_rows: usize) -> Result<Var> {
        let v = self.value(x);
        if index.len() != v.rows() || index.iter().any(|&i| i >= n_rows) {
            return Err(Error::shape("scatter_add_rows", v.shape(), &[index.len(), n_rows]));
        }
        let c = v.cols();
        let mut data = vec![T::zero(); n_rows * c];
        for (r, &i) in index.iter().enumerate() {
            for (o, &s) in data[i * c..(i + 1) * c].iter_mut().zip(v.row(r)) {
                *o = *o + s;
            }
        }
        let tracked = self.tracked(&[x.0]);
        Ok(self.push(
            Tensor::new([n_rows, c], data)?,
            Op::ScatterAddRows {
                src: x.0,
                index: index.to_vec(),
            },
            tracked,
        ))
    }

    /// Copy of `base` with rows `index[i]` replaced by `src[i]`. Indices must
    /// be distinct.
    pub fn replace_rows(&mut self, base: Var, index: &[usize], src: Var) -> Result<Var> {
        let (vb, vs) = (self.value(base), self.value(src));
        if vb.cols() != vs.cols() || vs.rows() != index.len() || index.iter().any(|&i| i >= vb.rows())
        {
            return Err(Error::shape("replace_rows", vb.shape(), vs.shape()));
        }
        let c = vb.cols();
        let mut data = vb.data().to_vec();
        for (r, &i) in index.iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(vs.row(r));
        }
        let out = Tensor::new(vb.shape().to_vec(), data)?;
        let tracked = self.tracked(&[base.0, src.0]);
        Ok(self.push(
            out,
            Op::ReplaceRows {
                base: base.0,
                src: src.0,
                index: index.to_vec(),
            },
            tracked,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let tracked = self.tracked(&[x.0]);
        self.push(Tensor::scalar(s), Op::SumAll(x.0), tracked)
    }

    /// Sum along the last axis, keeping it as a single column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let rows = v.rows();
        let data = (0..rows).map(|r| v.row(r).iter().copied().sum()).collect();
        let tracked = self.tracked(&[x.0]);
        self.push(
            Tensor::new([rows, 1], data).expect("rows"),
            Op::SumCols(x.0),
            tracked,
        )
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut data = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut m = T::neg_infinity();
                for k in 0..len {
                    m = m.max(data[idx(k)]);
                }
                let mut z = T::zero();
                for k in 0..len {
                    let e = (data[idx(k)] - m).exp();
                    data[idx(k)] = e;
                    z = z + e;
                }
                for k in 0..len {
                    data[idx(k)] = data[idx(k)] / z;
                }
            }
        }
        let tracked = self.tracked(&[x.0]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax { src: x.0, axis }, tracked))
    }

    // ---------------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients of shared
    /// subexpressions accumulate.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes[..n].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |p: usize| &self.nodes[p].value;
        let mut acc = |p: usize, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[p].tracked {
                return;
            }
            let buf = grads[p].get_or_insert_with(|| vec![T::zero(); self.nodes[p].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (val(a), val(b));
                let out_len = g.len();
                // d out / d a, d out / d b at element k
                let da = |k: usize| match kind {
                    Binary::Add | Binary::Sub => T::one(),
                    Binary::Mul => vb.data()[if vb.numel() == 1 { 0 } else { k }],
                };
                let db = |k: usize| match kind {
                    Binary::Add => T::one(),
                    Binary::Sub => -T::one(),
                    Binary::Mul => va.data()[if va.numel() == 1 { 0 } else { k }],
                };
                acc(a, &mut |buf| {
                    if buf.len() == out_len {
                        for k in 0..out_len {
                            buf[k] = buf[k] + g[k] * da(k);
                        }
                    } else {
                        let s: T = (0..out_len).map(|k| g[k] * da(k)).sum();
                        buf[0] = buf[0] + s;
                    }
                });
                acc(b, &mut |buf| {
                    if buf.len() == out_len {
                        for k in 0..out_len {
                            buf[k] = buf[k] + g[k] * db(k);
                        }
                    } else {
                        let s: T = (0..out_len).map(|k| g[k] * db(k)).sum();
                        buf[0] = buf[0] + s;
                    }
                });
            }
            Op::Unary(kind, x) => {
                let x = *x;
                let (vx, vy) = (val(x).data(), node.value.data());
                let one = T::one();
                acc(x, &mut |buf| {
                    for k in 0..g.len() {
                        let d = match kind {
                            Unary::Tanh => one - vy[k] * vy[k],
                            Unary::Sigmoid => vy[k] * (one - vy[k]),
                            Unary::Exp => vy[k],
                            Unary::Log => one / vx[k],
                            Unary::Relu => {
                                if vx[k] > T::zero() {
                                    one
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Elu => {
                                if vx[k] > T::zero() {
                                    one
                                } else {
                                    vy[k] + one
                                }
                            }
                            Unary::Abs => vx[k].signum() * (if vx[k] == T::zero() { T::zero() } else { one }),
                            Unary::Square => vx[k] + vx[k],
                        };
                        buf[k] = buf[k] + g[k] * d;
                    }
                });
            }
            Op::Affine(x, s) => {
                let s = T::lit(*s);
                acc(*x, &mut |buf| {
                    for k in 0..g.len() {
                        buf[k] = buf[k] + g[k] * s;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                acc(*a, &mut |buf| {
                    T::gemm(m, n, k, g, false, vb.data(), true, buf, T::one());
                });
                acc(*b, &mut |buf| {
                    T::gemm(k, m, n, va.data(), true, g, false, buf, T::one());
                });
            }
            Op::AddBias(x, bias) => {
                let c = node.value.cols();
                acc(*x, &mut |buf| {
                    for k in 0..g.len() {
                        buf[k] = buf[k] + g[k];
                    }
                });
                acc(*bias, &mut |buf| {
                    for k in 0..g.len() {
                        buf[k % c] = buf[k % c] + g[k];
                    }
                });
            }
            Op::MulCol(x, w) => {
                let c = node.value.cols();
                let (vx, vw) = (val(*x).data(), val(*w).data());
                acc(*x, &mut |buf| {
                    for k in 0..g.len() {
                        buf[k] = buf[k] + g[k] * vw[k / c];
                    }
                });
                acc(*w, &mut |buf| {
                    for k in 0..g.len() {
                        buf[k / c] = buf[k / c] + g[k] * vx[k];
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    acc(p, &mut |buf| {
                        for r in 0..rows {
                            for j in 0..c {
                                buf[r * c + j] = buf[r * c + j] + g[r * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceCols { src, start } => {
                let (len, c) = (node.value.cols(), val(*src).cols());
                let rows = node.value.rows();
                acc(*src, &mut |buf| {
                    for r in 0..rows {
                        for j in 0..len {
                            buf[r * c + start + j] = buf[r * c + start + j] + g[r * len + j];
                        }
                    }
                });
            }
            Op::SliceRows { src, start } => {
                let off = start * node.value.cols();
                acc(*src, &mut |buf| {
                    for k in 0..g.len() {
                        buf[off + k] = buf[off + k] + g[k];
                    }
                });
            }
            Op::StackRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    acc(p, &mut |buf| {
                        for k in 0..len {
                            buf[k] = buf[k] + g[off + k];
                        }
                    });
                    off += len;
                }
            }
            Op::GatherRows { src, index } => {
                let c = node.value.cols();
                acc(*src, &mut |buf| {
                    for (r, &i) in index.iter().enumerate() {
                        for j in 0..c {
                            buf[i * c + j] = buf[i * c + j] + g[r * c + j];
                        }
                    }
                });
            }
            Op::ScatterAddRows { src, index } => {
                let c = node.value.cols();
                acc(*src, &mut |buf| {
                    for (r, &i) in index.iter().enumerate() {
                        for j in 0..c {
                            buf[r * c + j] = buf[r * c + j] + g[i * c + j];
                        }
                    }
                });
            }
            Op::ReplaceRows { base, src, index } => {
                let c = node.value.cols();
                let rows = node.value.rows();
                let mut replaced = vec![false; rows];
                for &i in index {
                    replaced[i] = true;
                }
                acc(*base, &mut |buf| {
                    for r in (0..rows).filter(|&r| !replaced[r]) {
                        for j in 0..c {
                            buf[r * c + j] = buf[r * c + j] + g[r * c + j];
                        }
                    }
                });
                acc(*src, &mut |buf| {
                    for (r, &i) in index.iter().enumerate() {
                        for j in 0..c {
                            buf[r * c + j] = buf[r * c + j] + g[i * c + j];
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let g0 = g[0];
                acc(*x, &mut |buf| {
                    for b in buf.iter_mut() {
                        *b = *b + g0;
                    }
                });
            }
            Op::SumCols(x) => {
                let c = val(*x).cols();
                acc(*x, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] = buf[k] + g[k / c];
                    }
                });
            }
            Op::Softmax { src, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                acc(*src, &mut |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let dot: T = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..len {
                                buf[idx(k)] = buf[idx(k)] + y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let v = tape.constant(t(&[2, 1], &[3., 4.]));
        let out = tape.matmul(i, v).unwrap();
        assert_eq!(tape.value(out).data(), &[3., 4.]);

        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let out = tape.matmul(a, v).unwrap();
        assert_eq!(tape.value(out).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn unary_values() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let th = tape.tanh(z).unwrap();
        let sg = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(th).item(), 0.0);
        assert_eq!(tape.value(sg).item(), 0.5);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64([2], &[1.0, 0.0]).unwrap());
        assert!(matches!(tape.log(x), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn softmax_is_stable() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64([2], &[1000.0, 1000.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let x = tape.constant(Tensor::zeros([2]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn backward_identity_square_and_sharing() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let g = tape.backward(x).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0]);

        let v = tape.leaf(t(&[3], &[1., -2., 0.5]));
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum_all(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(v).unwrap(), &[2., -4., 1.]);

        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.leaf(Tensor::scalar(5.0));
        let y = tape.mul(c, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn scalar_broadcast_only() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let s = tape.constant(Tensor::scalar(1.0));
        let out = tape.add(a, s).unwrap();
        assert_eq!(tape.shape(out), &[2, 3]);
        let b = tape.constant(Tensor::zeros([3]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn first_non_finite_reports_op() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64([1], &[50.0]).unwrap());
        let _ = tape.exp(x).unwrap();
        let y = tape.exp(x).unwrap();
        let _ = tape.mul(y, y).unwrap();
        let (_, name, _) = tape.first_non_finite().unwrap();
        assert_eq!(name, "mul");
    }
}
