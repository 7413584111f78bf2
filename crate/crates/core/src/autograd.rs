//! A small tape-based reverse-mode differentiation engine.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`] handle.
//! Shapes are explicit: there is no broadcasting, and the only way to combine a
//! scalar with a vector is the dedicated [`Tape::scale`] op. Calling
//! [`Tape::backward`] on a scalar node walks the tape in exact reverse order and
//! returns the adjoint of every node that depends on a leaf.
//!
//! ```
//! use diffmask::autograd::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

use crate::error::{Error, Result};

/// Dense row-major `f64` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations recorded on the tape.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[m,k] x [k,n]`, with 1-D operands treated as a row (lhs) or column (rhs).
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Concat(Vec<Var>),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Exp(Var),
    MinConst(Var, f64),
    MaxConst(Var, f64),
    Sum(Var),
    Mean(Var),
    Embedding { table: Var, index: usize },
    Softmax(Var),
    LogSoftmax(Var),
    Reshape(Var),
    Affine { x: Var, scale: f64 },
    Scale { x: Var, s: Var },
    Slice { x: Var, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Ordered record of operations. Inputs of every node precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adjoint of `v`, zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that gradients are not propagated to.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[x.0].value;
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v)).collect(),
        };
        let tracked = self.tracked(x);
        self.push(value, op, tracked)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Matrix product. A 1-D lhs acts as a row vector and a 1-D rhs as a
    /// column vector; the corresponding axis is dropped from the result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, a_vec) = match sa.as_slice() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            _ => return Err(Error::Shape { op: "matmul", lhs: sa, rhs: sb }),
        };
        let (k2, n, b_vec) = match sb.as_slice() {
            [k2] => (*k2, 1, true),
            [k2, n] => (*k2, *n, false),
            _ => return Err(Error::Shape { op: "matmul", lhs: sa, rhs: sb }),
        };
        if k != k2 {
            return Err(Error::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ad[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &x) in row.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &w) in dst.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let shape = match (a_vec, b_vec) {
            (true, true) => vec![],
            (true, false) => vec![n],
            (false, true) => vec![m],
            (false, false) => vec![m, n],
        };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MatMul { a, b, m, k, n },
            tracked,
        ))
    }

    /// Concatenation of 1-D tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            data.extend_from_slice(self.data(p));
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        let value = Tensor::vector(data);
        Ok(self.push(value, Op::Concat(parts.to_vec()), tracked))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// `min(x, c)` elementwise. Gradient passes where `x <= c`.
    pub fn min_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::MinConst(x, c), |v| v.min(c))
    }

    /// `max(x, c)` elementwise. Gradient passes where `x >= c`.
    pub fn max_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::MaxConst(x, c), |v| v.max(c))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, Op::Affine { x, scale }, |v| scale * v + shift)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Mean(x), tracked)
    }

    /// Row `index` of a 2-D table.
    pub fn embedding(&mut self, table: Var, index: usize) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || index >= shape[0] {
            return Err(Error::Shape {
                op: "embedding",
                lhs: shape,
                rhs: vec![index],
            });
        }
        let value = Tensor::vector(self.value(table).row(index).to_vec());
        let tracked = self.tracked(table);
        Ok(self.push(value, Op::Embedding { table, index }, tracked))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.require_vector("softmax", x)?;
        let lse = log_sum_exp(self.data(x));
        Ok(self.unary(x, Op::Softmax(x), |v| (v - lse).exp()))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.require_vector("log_softmax", x)?;
        let lse = log_sum_exp(self.data(x));
        Ok(self.unary(x, Op::LogSoftmax(x), |v| v - lse))
    }

    fn require_vector(&self, op: &'static str, x: Var) -> Result<()> {
        if self.shape(x).len() != 1 {
            return Err(Error::Shape {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: vec![],
            });
        }
        Ok(())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: self.data(x).to_vec(),
        };
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Shape {
                op: "scale",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let k = self.data(s)[0];
        let value = Tensor {
            shape: self.shape(x).to_vec(),
            data: self.data(x).iter().map(|v| v * k).collect(),
        };
        let tracked = self.tracked(x) || self.tracked(s);
        Ok(self.push(value, Op::Scale { x, s }, tracked))
    }

    /// Contiguous range `[start, start+len)` of a 1-D tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 1 || start + len > shape[0] {
            return Err(Error::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![start, len],
            });
        }
        let value = Tensor::vector(self.data(x)[start..start + len].to_vec());
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Slice { x, start }, tracked))
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.numel() != 1 {
            return Err(Error::NonScalar(out.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let y = &node.value.data;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |d| add_into(d, &g));
                    self.acc(&mut grads, *b, |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, |d| add_into(d, &g));
                    self.acc(&mut grads, *b, |d| {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d -= g)
                    });
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.data(*a), self.data(*b));
                    self.acc(&mut grads, *a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(bd) {
                            *d += g * y;
                        }
                    });
                    self.acc(&mut grads, *b, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(ad) {
                            *d += g * x;
                        }
                    });
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let (ad, bd) = (self.data(*a), self.data(*b));
                    self.acc(&mut grads, *a, |d| {
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                d[i * k + p] += dot(gi, brow);
                            }
                        }
                    });
                    self.acc(&mut grads, *b, |d| {
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let x = ad[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                let drow = &mut d[p * n..(p + 1) * n];
                                for (dv, gv) in drow.iter_mut().zip(gi) {
                                    *dv += x * gv;
                                }
                            }
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        let part = &g[offset..offset + len];
                        self.acc(&mut grads, p, |d| add_into(d, part));
                        offset += len;
                    }
                }
                Op::Sigmoid(x) => self.acc(&mut grads, *x, |d| {
                    for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                }),
                Op::Tanh(x) => self.acc(&mut grads, *x, |d| {
                    for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                        *d += g * (1.0 - y * y);
                    }
                }),
                Op::Log(x) => {
                    let xd = self.data(*x);
                    self.acc(&mut grads, *x, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(xd) {
                            *d += g / x;
                        }
                    })
                }
                Op::Exp(x) => self.acc(&mut grads, *x, |d| {
                    for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                        *d += g * y;
                    }
                }),
                Op::MinConst(x, c) => {
                    let xd = self.data(*x);
                    self.acc(&mut grads, *x, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(xd) {
                            if *x <= *c {
                                *d += g;
                            }
                        }
                    })
                }
                Op::MaxConst(x, c) => {
                    let xd = self.data(*x);
                    self.acc(&mut grads, *x, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(xd) {
                            if *x >= *c {
                                *d += g;
                            }
                        }
                    })
                }
                Op::Affine { x, scale } => self.acc(&mut grads, *x, |d| {
                    for (d, g) in d.iter_mut().zip(&g) {
                        *d += g * scale;
                    }
                }),
                Op::Sum(x) => self.acc(&mut grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
                Op::Mean(x) => {
                    let share = g[0] / self.value(*x).numel() as f64;
                    self.acc(&mut grads, *x, |d| d.iter_mut().for_each(|d| *d += share))
                }
                Op::Embedding { table, index } => {
                    let cols = self.shape(*table)[1];
                    let start = index * cols;
                    self.acc(&mut grads, *table, |d| {
                        add_into(&mut d[start..start + cols], &g)
                    })
                }
                Op::Softmax(x) => {
                    let gy = dot(&g, y);
                    self.acc(&mut grads, *x, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += y * (g - gy);
                        }
                    })
                }
                Op::LogSoftmax(x) => {
                    let total: f64 = g.iter().sum();
                    self.acc(&mut grads, *x, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += g - y.exp() * total;
                        }
                    })
                }
                Op::Reshape(x) => self.acc(&mut grads, *x, |d| add_into(d, &g)),
                Op::Scale { x, s } => {
                    let k = self.data(*s)[0];
                    let xd = self.data(*x);
                    self.acc(&mut grads, *x, |d| {
                        for (d, g) in d.iter_mut().zip(&g) {
                            *d += g * k;
                        }
                    });
                    let gs = dot(&g, xd);
                    self.acc(&mut grads, *s, |d| d[0] += gs);
                }
                Op::Slice { x, start } => {
                    let start = *start;
                    self.acc(&mut grads, *x, |d| {
                        add_into(&mut d[start..start + g.len()], &g)
                    })
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.tracked(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}

/// `log(sum(exp(xs)))` without overflow.
pub fn logsumexp(xs: &[f64]) -> f64 {
    log_sum_exp(xs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.25]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn matmul_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let b = tape.constant(Tensor::matrix(3, 1, vec![1.0; 3]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 3.0]);

        let v = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let w = tape.constant(Tensor::matrix(2, 3, vec![1.0, 0.0, 2.0, 0.0, 1.0, 1.0]).unwrap());
        let r = tape.matmul(v, w).unwrap();
        assert_eq!(tape.shape(r), &[3]);
        assert_eq!(tape.value(r).data(), &[1.0, 2.0, 4.0]);
    }

    #[test]
    fn concat_lengths_add() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0, 5.0]));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[5]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");

        let m = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let err = tape.matmul(m, m).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.tanh(a);
        assert!(matches!(tape.backward(b), Err(Error::NonScalar(_))));
    }

    #[test]
    fn rectifier_boundary_passes_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 1.0]));
        let y = tape.max_const(x, 0.0);
        let y = tape.min_const(y, 1.0);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5, 2.0]));
        let y = tape.min_const(x, 1.0);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let y = tape.mul(c, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn log_softmax_is_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1000.0, 0.0]));
        let y = tape.log_softmax(x).unwrap();
        assert!(tape.value(y).is_finite());
        assert!(tape.value(y).data()[0].abs() < 1e-12);
    }
}
