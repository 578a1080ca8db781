//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Every primitive appends one node to the [`Tape`]; [`Tape::backward`] walks
//! the nodes in exact reverse order. Reductions use a fixed left-to-right
//! order, so forward and backward passes are bit-reproducible.
//!
//! Binary elementwise ops broadcast their right operand when it is a scalar
//! or when its shape equals the trailing dimensions of the left operand
//! (a bias row against a matrix, a positional table against a batch).

pub mod gradcheck;
mod params;

pub use params::{Adam, AdamConfig, Checkpoint, ParamStore};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Self {
            shape: vec![v.len()],
            data: v,
        }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape.as_slice() {
            [r, c] => Matrix::from_vec(*r, *c, self.data.clone()),
            [n] => Matrix::from_vec(1, *n, self.data.clone()),
            s => Err(Error::Shape {
                op: "to_matrix",
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Abs(Var),
    Softplus(Var),
    Sigmoid(Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Slice { src: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Gather { src: Var, indices: Vec<usize> },
    SoftmaxRows(Var),
    LayerNormRows { src: Var, rstd: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`; zeros when `v` has no path to the loss.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }
}

/// Split a shape at `axis` into `(outer, dim, inner)` extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcastable(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.iter().product::<usize>() == 1 || (rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_scalar(x: f64) -> f64 {
    softplus(x)
}

/// Inverse of softplus for positive targets.
pub fn inverse_softplus(y: f64) -> f64 {
    assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// `[m,k] x [k,n]` into `out` (overwritten).
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = &self.nodes[a.0].value;
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !broadcastable(&x.shape, &y.shape) {
            return Err(Error::Shape {
                op: name,
                lhs: x.shape.clone(),
                rhs: y.shape.clone(),
            });
        }
        let nb = y.data.len();
        let data = x.data.iter().enumerate().map(|(k, &v)| f(v, y.data[k % nb])).collect();
        let value = Tensor {
            shape: x.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |v| v * s)
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Shift(a), |v| v + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |v| v * v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let s = x.data.iter().sum::<f64>() / x.data.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let err = || Error::Shape {
            op: "matmul",
            lhs: x.shape.clone(),
            rhs: y.shape.clone(),
        };
        let (batch, m, k, n) = match (x.shape.as_slice(), y.shape.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => (*b, *m, *k, *n),
            _ => return Err(err()),
        };
        let mut data = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm(
                &x.data[bi * m * k..(bi + 1) * m * k],
                &y.data[bi * k * n..(bi + 1) * k * n],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if x.shape.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::MatMul(a, b), rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let nd = x.shape.len();
        if nd < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: x.shape.clone(),
                rhs: vec![],
            });
        }
        let (r, c) = (x.shape[nd - 2], x.shape[nd - 1]);
        let batch = x.data.len() / (r * c);
        let mut data = vec![0.0; x.data.len()];
        for bi in 0..batch {
            let off = bi * r * c;
            for i in 0..r {
                for j in 0..c {
                    data[off + j * r + i] = x.data[off + i * c + j];
                }
            }
        }
        let mut shape = x.shape.clone();
        shape.swap(nd - 2, nd - 1);
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != x.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: x.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: x.data.clone(),
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if axis >= x.shape.len() || len == 0 || start + len > x.shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: x.shape.clone(),
                rhs: vec![axis, start, len],
            });
        }
        let (outer, dim, inner) = axis_extents(&x.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&x.data[base..base + len * inner]);
        }
        let mut shape = x.shape.clone();
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Slice { src: a, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .map(|p| self.nodes[p.0].value.shape.clone())
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].value.shape;
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let x = &self.nodes[p.0].value;
                let chunk = x.shape[axis] * inner;
                data.extend_from_slice(&x.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Flat-index gather into a 1-D tensor.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if indices.is_empty() || indices.iter().any(|&i| i >= x.data.len()) {
            return Err(Error::Shape {
                op: "gather",
                lhs: x.shape.clone(),
                rhs: vec![indices.len()],
            });
        }
        let data: Vec<f64> = indices.iter().map(|&i| x.data[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(data), Op::Gather { src: a, indices }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax_rowwise(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let c = *x.shape.last().unwrap();
        let mut data = x.data.clone();
        for row in data.chunks_mut(c) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let shape = x.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::SoftmaxRows(a), rg)
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn layernorm_rowwise(&mut self, a: Var, eps: f64) -> Var {
        let x = &self.nodes[a.0].value;
        let c = *x.shape.last().unwrap();
        let mut data = x.data.clone();
        let mut rstd = Vec::with_capacity(data.len() / c);
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let shape = x.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::LayerNormRows { src: a, rstd }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.data.len() != 1 {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                lhs: lv.shape.clone(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        // Only nodes that can carry gradient keep one.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.data.len()]);
            f(slot);
        };
        let y = &node.value.data;

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi));
                let nb = val(*b).data.len();
                acc(*b, &mut |gb| {
                    for (k, gi) in g.iter().enumerate() {
                        gb[k % nb] += sign * gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (&val(*a).data, &val(*b).data);
                let nb = xb.len();
                acc(*a, &mut |ga| {
                    for (k, gi) in g.iter().enumerate() {
                        ga[k] += gi * xb[k % nb];
                    }
                });
                acc(*b, &mut |gb| {
                    for (k, gi) in g.iter().enumerate() {
                        gb[k % nb] += gi * xa[k];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += s * gi)),
            Op::Shift(a) | Op::Reshape(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi)),
            Op::Relu(a) => {
                let x = &val(*a).data;
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        if x[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let x = &val(*a).data;
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        if x[k] > 0.0 {
                            ga[k] += g[k];
                        } else if x[k] < 0.0 {
                            ga[k] -= g[k];
                        }
                    }
                });
            }
            Op::Softplus(a) => {
                let x = &val(*a).data;
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] * sigmoid(x[k]);
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] * y[k];
                }
            }),
            Op::Sqrt(a) => acc(*a, &mut |ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] / (2.0 * y[k]);
                }
            }),
            Op::Square(a) => {
                let x = &val(*a).data;
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += 2.0 * x[k] * g[k];
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = val(*a).data.len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::MatMul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let nd = xa.shape.len();
                let (m, k) = (xa.shape[nd - 2], xa.shape[nd - 1]);
                let n = xb.shape[nd - 1];
                let batch = xa.data.len() / (m * k);
                acc(*a, &mut |ga| {
                    // dA = dC · Bᵀ
                    for bi in 0..batch {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &xb.data[bi * k * n..(bi + 1) * k * n];
                        let da = &mut ga[bi * m * k..(bi + 1) * m * k];
                        for i in 0..m {
                            let grow = &gc[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bb[p * n..(p + 1) * n];
                                da[i * k + p] += grow.iter().zip(brow).map(|(u, v)| u * v).sum::<f64>();
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    // dB = Aᵀ · dC
                    for bi in 0..batch {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let aa = &xa.data[bi * m * k..(bi + 1) * m * k];
                        let db = &mut gb[bi * k * n..(bi + 1) * k * n];
                        for i in 0..m {
                            let grow = &gc[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = aa[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let s = &val(*a).shape;
                let nd = s.len();
                let (r, c) = (s[nd - 2], s[nd - 1]);
                acc(*a, &mut |ga| {
                    let batch = ga.len() / (r * c);
                    for bi in 0..batch {
                        let off = bi * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                ga[off + i * c + j] += g[off + j * r + i];
                            }
                        }
                    }
                });
            }
            Op::Slice { src, axis, start } => {
                let (outer, dim, inner) = axis_extents(&val(*src).shape, *axis);
                let len = node.value.shape[*axis];
                acc(*src, &mut |ga| {
                    for o in 0..outer {
                        let base = o * dim * inner + start * inner;
                        let gsrc = &g[o * len * inner..(o + 1) * len * inner];
                        ga[base..base + len * inner]
                            .iter_mut()
                            .zip(gsrc)
                            .for_each(|(x, gi)| *x += gi);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_extents(&node.value.shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).shape[*axis];
                    acc(*p, &mut |gp| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            gp[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(&g[src..src + len * inner])
                                .for_each(|(x, gi)| *x += gi);
                        }
                    });
                    offset += len;
                }
            }
            Op::Gather { src, indices } => acc(*src, &mut |ga| {
                for (gi, &i) in g.iter().zip(indices) {
                    ga[i] += gi;
                }
            }),
            Op::SoftmaxRows(a) => {
                let c = *node.value.shape.last().unwrap();
                acc(*a, &mut |ga| {
                    for ((gar, yr), gr) in ga.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(u, v)| u * v).sum();
                        for k in 0..c {
                            gar[k] += yr[k] * (gr[k] - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows { src, rstd } => {
                let c = *node.value.shape.last().unwrap();
                let cf = c as f64;
                acc(*src, &mut |ga| {
                    for (r, ((gar, yr), gr)) in ga.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)).enumerate() {
                        let mg = gr.iter().sum::<f64>() / cf;
                        let mgy = gr.iter().zip(yr).map(|(u, v)| u * v).sum::<f64>() / cf;
                        for k in 0..c {
                            gar[k] += rstd[r] * (gr[k] - mg - yr[k] * mgy);
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests;
