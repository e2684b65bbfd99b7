//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and the backward pass is a single reverse sweep.
//! Parameter leaves borrow their values from a [`ParamSet`] instead of copying.

use std::collections::HashMap;

use super::kernels::{self, dot, gemm, gemm_nt, gemm_tn, softmax_in_place, LN_EPS};
use super::{Gradients, ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Gather(Var, Vec<usize>),
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Softmax(Var, f64),
    Nll {
        probs: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 3] {
        use Op::*;
        match *self {
            Leaf | Param(_) => [None; 3],
            MatMul(a, b) | AddBias(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | ConcatRows(a, b) => {
                [Some(a), Some(b), None]
            }
            Scale(x, _) | Shift(x) | Relu(x) | Sigmoid(x) | Sum(x) | Mean(x) | MeanRows(x) | Gather(x, _)
            | SliceRows(x, _) | Reshape(x) | Softmax(x, _) => [Some(x), None, None],
            LayerNorm { x, gain, bias, .. } => [Some(x), Some(gain), Some(bias)],
            Attention { q, k, v, .. } => [Some(q), Some(k), Some(v)],
            Nll { probs, .. } => [Some(probs), None, None],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    // `None` for parameter leaves, which read from the parameter set.
    value: Option<Tensor>,
    // Whether any parameter is upstream; gradients stop elsewhere.
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn param_set(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        let node = &self.nodes[var.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => &self.params.get(*id).value,
            (_, Some(v)) => v,
            (_, None) => unreachable!("non-parameter node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let needs_grad = op.inputs().iter().flatten().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient outside the tape.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: true,
        });
        let var = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, var);
        var
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.cols() != bv.rows() {
            return Err(mismatch("matmul", av, bv));
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; n * m];
        gemm(av.data(), bv.data(), n, k, m, &mut out);
        Ok(self.push(Op::MatMul(a, b), Tensor::from_parts(vec![n, m], out)))
    }

    /// Adds a `[m]` bias to every row of an `[n, m]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if !xv.is_matrix() || bv.shape() != [xv.cols()] {
            return Err(mismatch("add_bias", xv, bv));
        }
        let m = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &bias) in row.iter_mut().zip(bv.data()) {
                *o += bias;
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Op::AddBias(x, b), Tensor::from_parts(shape, out)))
    }

    /// `x · W + b`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.map(x, |v| v * c);
        self.push(Op::Scale(x, c), v)
    }

    /// Adds the constant `c` elementwise.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let v = self.map(x, |v| v + c);
        self.push(Op::Shift(x), v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |v| v.max(0.0));
        self.push(Op::Relu(x), v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, sigmoid);
        self.push(Op::Sigmoid(x), v)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len().max(1) as f64;
        self.push(Op::Mean(x), Tensor::scalar(s))
    }

    /// Column means of an `[n, d]` matrix, as `[1, d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_matrix() || xv.rows() == 0 {
            return Err(Error::InvalidArgument(format!(
                "mean_rows needs a non-empty matrix, got {:?}",
                xv.shape()
            )));
        }
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; d];
        for row in xv.data().chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        Ok(self.push(Op::MeanRows(x), Tensor::from_parts(vec![1, d], out)))
    }

    /// Rows `ids` of an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = (tv.rows(), tv.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let v = Tensor::from_parts(vec![ids.len(), d], out);
        Ok(self.push(Op::Gather(table, ids.to_vec()), v))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.cols() != bv.cols() {
            return Err(mismatch("concat_rows", av, bv));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let v = Tensor::from_parts(vec![av.rows() + bv.rows(), av.cols()], data);
        Ok(self.push(Op::ConcatRows(a, b), v))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_matrix() || start + len > xv.rows() {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} out of range for {:?}",
                start + len,
                xv.shape()
            )));
        }
        let d = xv.cols();
        let data = xv.data()[start * d..(start + len) * d].to_vec();
        Ok(self.push(Op::SliceRows(x, start), Tensor::from_parts(vec![len, d], data)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if !xv.is_matrix() || gv.shape() != [d] || bv.shape() != [d] {
            return Err(mismatch("layer_norm", xv, gv));
        }
        let n = xv.rows();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = xv.row(i);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let v = Tensor::from_parts(vec![n, d], out);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            v,
        ))
    }

    /// Multi-head self-attention weights applied to already projected
    /// queries, keys and values (all `[n, d]`, `d` divisible by `heads`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || !qv.is_matrix() {
            return Err(mismatch("attention", qv, kv));
        }
        let (n, d) = (qv.rows(), qv.cols());
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let (out, probs) = kernels::attention(qv.data(), kv.data(), vv.data(), n, d, heads);
        let value = Tensor::from_parts(vec![n, d], out);
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            value,
        ))
    }

    /// Row-wise softmax of `x / tau`.
    pub fn softmax_t(&mut self, x: Var, tau: f64) -> Result<Var> {
        let out = softmax_t(self.value(x), tau)?;
        Ok(self.push(Op::Softmax(x, tau), out))
    }

    /// Mean of `-ln probs[i, targets[i]]` over rows with `mask[i]`; zero when
    /// no row is selected.
    pub fn nll(&mut self, probs: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let value = nll(self.value(probs), targets, mask)?;
        Ok(self.push(
            Op::Nll {
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            Tensor::scalar(value),
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients {
            grads: vec![None; self.params.len()],
        };

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, idx, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn propagate(
        &self,
        op: &Op,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let val = |v: Var| self.value(v);
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.value(v).len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        let add_into = |buf: &mut [f64], src: &[f64], c: f64| {
            for (b, s) in buf.iter_mut().zip(src) {
                *b += c * s;
            }
        };

        match op {
            Op::Leaf => {}
            Op::Param(id) => {
                let shape = self.params.get(*id).value.shape().to_vec();
                out.grads[id.0] = Some(Tensor::from_parts(shape, g.to_vec()));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                acc(*a, &mut |buf| gemm_nt(g, bv.data(), n, m, k, buf));
                acc(*b, &mut |buf| gemm_tn(av.data(), g, n, k, m, buf));
            }
            Op::AddBias(x, b) => {
                let m = val(*b).len();
                acc(*x, &mut |buf| add_into(buf, g, 1.0));
                acc(*b, &mut |buf| {
                    for row in g.chunks(m) {
                        add_into(buf, row, 1.0);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g, 1.0));
                acc(*b, &mut |buf| add_into(buf, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g, 1.0));
                acc(*b, &mut |buf| add_into(buf, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |buf| {
                    for ((o, gi), y) in buf.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, gi), x) in buf.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |buf| add_into(buf, g, *c)),
            Op::Shift(x) | Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, g, 1.0)),
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |buf| {
                    for ((o, gi), v) in buf.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[idx].value.as_ref().expect("sigmoid value").data();
                acc(*x, &mut |buf| {
                    for ((o, gi), s) in buf.iter_mut().zip(g).zip(y) {
                        *o += gi * s * (1.0 - s);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = val(*x).len().max(1) as f64;
                acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::MeanRows(x) => {
                let xv = val(*x);
                let (n, d) = (xv.rows(), xv.cols());
                acc(*x, &mut |buf| {
                    for row in buf.chunks_mut(d) {
                        add_into(row, g, 1.0 / n as f64);
                    }
                });
            }
            Op::Gather(table, ids) => {
                let d = val(*table).cols();
                acc(*table, &mut |buf| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut buf[i * d..(i + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let split = val(*a).len();
                acc(*a, &mut |buf| add_into(buf, &g[..split], 1.0));
                acc(*b, &mut |buf| add_into(buf, &g[split..], 1.0));
            }
            Op::SliceRows(x, start) => {
                let d = val(*x).cols();
                let off = start * d;
                acc(*x, &mut |buf| add_into(&mut buf[off..off + g.len()], g, 1.0));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain).data();
                let d = gv.len();
                acc(*x, &mut |buf| {
                    let mut dxhat = vec![0.0; d];
                    for (i, is) in inv_std.iter().enumerate() {
                        let gr = &g[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dot(&dxhat, xh) / d as f64;
                        for j in 0..d {
                            buf[i * d + j] += is * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
                acc(*gain, &mut |buf| {
                    for (gr, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            buf[j] += gr[j] * xh[j];
                        }
                    }
                });
                acc(*bias, &mut |buf| {
                    for gr in g.chunks(d) {
                        add_into(buf, gr, 1.0);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q).data(), val(*k).data(), val(*v).data());
                let (n, d) = (val(*q).rows(), val(*q).cols());
                let (dq, dk, dv) = attention_backward(qv, kv, vv, probs, g, n, d, *heads);
                acc(*q, &mut |buf| add_into(buf, &dq, 1.0));
                acc(*k, &mut |buf| add_into(buf, &dk, 1.0));
                acc(*v, &mut |buf| add_into(buf, &dv, 1.0));
            }
            Op::Softmax(x, tau) => {
                let y = self.nodes[idx].value.as_ref().expect("softmax value");
                let c = y.cols();
                acc(*x, &mut |buf| {
                    for ((yr, gr), br) in y.data().chunks(c).zip(g.chunks(c)).zip(buf.chunks_mut(c)) {
                        let inner = dot(yr, gr);
                        for j in 0..c {
                            br[j] += yr[j] * (gr[j] - inner) / tau;
                        }
                    }
                });
            }
            Op::Nll {
                probs,
                targets,
                mask,
            } => {
                let pv = val(*probs);
                let count = mask.iter().filter(|&&m| m).count();
                if count > 0 {
                    let c = pv.cols();
                    acc(*probs, &mut |buf| {
                        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                            if m {
                                let p = pv.data()[i * c + t].max(f64::MIN_POSITIVE);
                                buf[i * c + t] -= g[0] / (p * count as f64);
                            }
                        }
                    });
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    n: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut ds = vec![0.0; n];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let gi = &g[i * d + off..i * d + off + dh];
            let pi = &p[i * n..(i + 1) * n];
            let mut inner = 0.0;
            for j in 0..n {
                let vj = &v[j * d + off..j * d + off + dh];
                ds[j] = dot(gi, vj);
                inner += ds[j] * pi[j];
                let dvj = &mut dv[j * d + off..j * d + off + dh];
                for (o, x) in dvj.iter_mut().zip(gi) {
                    *o += pi[j] * x;
                }
            }
            let qi = &q[i * d + off..i * d + off + dh];
            for j in 0..n {
                let s = pi[j] * (ds[j] - inner) * scale;
                if s == 0.0 {
                    continue;
                }
                let kj = &k[j * d + off..j * d + off + dh];
                let dqi = &mut dq[i * d + off..i * d + off + dh];
                for (o, x) in dqi.iter_mut().zip(kj) {
                    *o += s * x;
                }
                let dkj = &mut dk[j * d + off..j * d + off + dh];
                for (o, x) in dkj.iter_mut().zip(qi) {
                    *o += s * x;
                }
            }
        }
    }
    (dq, dk, dv)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `out[i, j] = x[i, j] · W[j, k] + b[k]`, without recording gradients.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !x.is_matrix() || !w.is_matrix() || x.cols() != w.rows() {
        return Err(mismatch("affine", x, w));
    }
    if b.shape() != [w.cols()] {
        return Err(mismatch("affine", w, b));
    }
    let (n, k, m) = (x.rows(), x.cols(), w.cols());
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm(x.data(), w.data(), n, k, m, &mut out);
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Row-wise temperature softmax of a matrix (or a single vector row).
pub fn softmax_t(logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let c = logits.cols();
    let mut data = logits.data().to_vec();
    if c > 0 {
        for row in data.chunks_mut(c) {
            softmax_in_place(row, tau);
        }
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), data))
}

/// Mean negative log-likelihood of `targets` under row distributions
/// `probs`, over rows where `mask` is set. Returns 0 for an empty mask.
pub fn nll(probs: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let (n, c) = (probs.rows(), probs.cols());
    if targets.len() != n || mask.len() != n {
        return Err(Error::InvalidArgument(format!(
            "nll: {n} rows but {} targets and {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    if let Some(&t) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= c) {
        return Err(Error::InvalidArgument(format!("target {t} out of range for {c} classes")));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            total -= probs.data()[i * c + t].max(f64::MIN_POSITIVE).ln();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}
