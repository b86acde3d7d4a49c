//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so the tape index is already a
//! topological order and backward is a single reverse sweep.

use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::{log_softmax, softmax, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Mix { a: Var, b: Var, lambdas: Vec<f64> },
    Tanh(Var),
    Gather { table: Var, indices: Vec<usize> },
    LogSoftmax(Var),
    CausalSoftmax(Var),
    Pick { a: Var, at: Vec<(usize, usize)> },
    Sum(Var),
    Softplus(Var),
    Log1mExp(Var),
    ClampMax(Var, f64),
    #[cfg(test)]
    BrokenTanh(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradient of a scalar with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Binds a named parameter. Binding the same name twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        let v = self.push(t, Op::Param);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul inner dimensions");
        let out = va.matmul(vb);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.cols(), "matmul_t inner dimensions");
        let out = va.matmul_t(vb);
        self.push(out, Op::MatMulT(a, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shapes");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.rows(), va.cols(), data).expect("shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.cols()), vr.shape(), "add_row bias shape");
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    /// Row-wise convex combination `(1 - l_r) * a_r + l_r * b_r`.
    pub fn mix(&mut self, a: Var, b: Var, lambdas: Vec<f64>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mix shapes");
        assert_eq!(va.rows(), lambdas.len(), "one lambda per row");
        let mut out = Tensor::zeros(va.rows(), va.cols());
        for (r, &l) in lambdas.iter().enumerate() {
            for ((o, &x), &y) in out.row_mut(r).iter_mut().zip(va.row(r)).zip(vb.row(r)) {
                *o = (1.0 - l) * x + l * y;
            }
        }
        self.push(out, Op::Mix { a, b, lambdas })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Selects rows of `table`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Tensor::zeros(indices.len(), t.cols());
        for (r, &i) in indices.iter().enumerate() {
            if i >= t.rows() {
                return Err(Error::UnknownToken { token: i, size: t.rows() });
            }
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        Ok(self.push(out, Op::Gather { table, indices: indices.to_vec() }))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Tensor::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&log_softmax(va.row(r)));
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Softmax of each row `r` over columns `0..=r`; later columns are zero.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), va.cols(), "causal_softmax needs a square matrix");
        let mut out = Tensor::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let s = softmax(&va.row(r)[..=r]);
            out.row_mut(r)[..=r].copy_from_slice(&s);
        }
        self.push(out, Op::CausalSoftmax(a))
    }

    /// Column vector of the selected `(row, col)` entries.
    pub fn pick(&mut self, a: Var, at: Vec<(usize, usize)>) -> Var {
        let va = self.value(a);
        let out = Tensor::column(at.iter().map(|&(r, c)| va.get(r, c)).collect());
        self.push(out, Op::Pick { a, at })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    /// `ln(1 - e^x)` for `x < 0`.
    pub fn log1m_exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(log1m_exp);
        self.push(out, Op::Log1mExp(a))
    }

    /// `min(x, c)`; the gradient is zero where the clamp is active.
    pub fn clamp_max(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x.min(c));
        self.push(out, Op::ClampMax(a, c))
    }

    #[cfg(test)]
    pub(crate) fn broken_tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::BrokenTanh(a))
    }

    /// Gradient of the scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::BackwardRequiresScalar { rows: lv.rows(), cols: lv.cols() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `d loss / d p` into `store` for every bound parameter.
    /// Gradients add to whatever the store already holds.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (name, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul_t(vb));
                acc(*b, va.t_matmul(g));
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul(vb));
                acc(*b, g.t_matmul(va));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, elementwise(g, vb, |x, y| x * y));
                acc(*b, elementwise(g, va, |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                let mut gr = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*a, g.clone());
                acc(*row, gr);
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::Mix { a, b, lambdas } => {
                let mut ga = g.clone();
                let mut gb = g.clone();
                for (r, &l) in lambdas.iter().enumerate() {
                    ga.row_mut(r).iter_mut().for_each(|x| *x *= 1.0 - l);
                    gb.row_mut(r).iter_mut().for_each(|x| *x *= l);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Tanh(a) => acc(*a, elementwise(g, &node.value, |x, y| x * (1.0 - y * y))),
            #[cfg(test)]
            Op::BrokenTanh(a) => acc(*a, elementwise(g, &node.value, |x, y| x * (1.0 - y))),
            Op::Gather { table, indices } => {
                let t = self.value(*table);
                let mut gt = Tensor::zeros(t.rows(), t.cols());
                for (r, &idx) in indices.iter().enumerate() {
                    for (o, x) in gt.row_mut(idx).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*table, gt);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = g.get(r, c) - y.get(r, c).exp() * gsum;
                    }
                }
                acc(*a, ga);
            }
            Op::CausalSoftmax(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = (0..=r).map(|c| g.get(r, c) * y.get(r, c)).sum();
                    for c in 0..=r {
                        ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                acc(*a, ga);
            }
            Op::Pick { a, at } => {
                let va = self.value(*a);
                let mut ga = Tensor::zeros(va.rows(), va.cols());
                for (k, &(r, c)) in at.iter().enumerate() {
                    ga.set(r, c, ga.get(r, c) + g.get(k, 0));
                }
                acc(*a, ga);
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                let s = g.item();
                acc(*a, Tensor::from_vec(va.rows(), va.cols(), vec![s; va.len()]).expect("shape"));
            }
            Op::Softplus(a) => {
                acc(*a, elementwise(g, self.value(*a), |x, y| x * sigmoid(y)));
            }
            Op::Log1mExp(a) => {
                // d/dx ln(1 - e^x) = -1 / expm1(-x)
                acc(*a, elementwise(g, self.value(*a), |x, y| -x / (-y).exp_m1()));
            }
            Op::ClampMax(a, c) => {
                acc(*a, elementwise(g, self.value(*a), |x, y| if y < *c { x } else { 0.0 }));
            }
        }
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("shape")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn log1m_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}
