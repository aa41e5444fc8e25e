//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation reads nodes
//! that already exist, so node indices are a topological order and the
//! backward pass is a single reverse sweep. Operations whose inputs do not
//! require gradients are evaluated but not recorded for backward.
//!
//! No operation broadcasts implicitly: adding a bias row to a matrix is its
//! own operation ([`Graph::add_row`]).

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    MatMulNt(Var, Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Tanh(Var),
    Gelu(Var),
    Square(Var),
    Logistic(Var),
    LogLogistic(Var),
    Log(Var),
    LogSoftmax(Var),
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Pick {
        x: Var,
        cols: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A computation graph. Leaves may borrow their values (model parameters)
/// for the lifetime `'a` so that building a graph never copies weights.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.push(Cow::Owned(value), op, requires_grad)
    }

    /// An owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// A borrowed leaf that requires grad (a trainable parameter).
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// A borrowed leaf that never receives a gradient.
    pub fn constant(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the loss with respect to `v`, populated by [`Graph::backward`]
    /// for every leaf that requires grad and is reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.value(v).shape().to_vec(), g.to_vec()).expect("grad shape"))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2().ok_or_else(|| Error::Shape {
            op,
            lhs: self.value(v).shape().to_vec(),
            rhs: vec![],
        })
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    // ---- forward operations ----

    /// `[m,k] · [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `[m,k] · [n,k]ᵀ → [m,n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(t, Op::MatMulNt(a, b), &[a, b]))
    }

    /// Rows of `table` (`[V,d]`) selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::UnknownTokenId { id: bad, vocab });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push_op(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err(name, a, b));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_op(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `[m,n] + [n]`, adding the row vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_row", a)?;
        if self.value(row).shape() != [n] {
            return Err(self.shape_err("add_row", a, row));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_exact_mut(n) {
            for (x, y) in chunk.iter_mut().zip(r) {
                *x += y;
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push_op(t, Op::AddRow(a, row), &[a, row]))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push_op(t, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::Shift(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, tensor::gelu, Op::Gelu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn logistic(&mut self, a: Var) -> Var {
        self.map(a, tensor::logistic, Op::Logistic(a))
    }

    /// `log σ(x)` without forming σ(x).
    pub fn log_logistic(&mut self, a: Var) -> Var {
        self.map(a, tensor::log_logistic, Op::LogLogistic(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    /// Log-softmax over the last axis of a 2-D tensor (or a whole vector).
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = *ta.shape().last().unwrap_or(&1);
        let mut out = vec![0.0; ta.numel()];
        for (x, o) in ta.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            tensor::log_softmax_row(x, o);
        }
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        self.push_op(t, Op::LogSoftmax(a), &[a])
    }

    /// Row-wise softmax of a square `[T,T]` score matrix where row `i` only
    /// sees columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("causal_softmax", a)?;
        if r != c {
            return Err(self.shape_err("causal_softmax", a, a));
        }
        let ta = self.value(a);
        let mut out = vec![0.0; r * c];
        for (i, (x, o)) in ta.data().chunks_exact(c).zip(out.chunks_exact_mut(c)).enumerate() {
            tensor::masked_softmax_row(x, i + 1, o);
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push_op(t, Op::CausalSoftmax(a), &[a]))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2("layer_norm", x)?;
        if self.value(gain).shape() != [n] {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.value(bias).shape() != [n] {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let mut out = vec![0.0; m * n];
        let mut normed = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        tensor::layer_norm_rows(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            &mut out,
            Some(&mut normed),
            Some(&mut inv_std),
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Rows `start..start+len` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_rows", x)?;
        if start + len > m {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: vec![m, n],
                rhs: vec![start, start + len],
            });
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::new(vec![len, n], data)?;
        Ok(self.push_op(t, Op::SliceRows { x, start }, &[x]))
    }

    /// `out[i] = x[i, cols[i]]` for a `[m,n]` input and `m` column indices.
    /// Used to gather each position's log-probability of its target token.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("pick", x)?;
        if cols.len() != m {
            return Err(Error::Shape {
                op: "pick",
                lhs: vec![m, n],
                rhs: vec![cols.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::UnknownTokenId { id: bad, vocab: n });
        }
        let src = self.value(x).data();
        let data = cols.iter().enumerate().map(|(i, &c)| src[i * n + c]).collect();
        let t = Tensor::vector(data);
        Ok(self.push_op(
            t,
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push_op(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    // ---- backward ----

    /// Populates gradients of `loss` for every node that requires grad.
    /// A graph can be differentiated once; a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::NoGradPath);
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Split borrows: nodes are read-only from here on, grads are written.
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let out = &nodes[i].value;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let n = nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = nodes[b.0].value.dims2().unwrap().1;
                let (av, bv) = (val(*a), val(*b));
                // dA = G · Bᵀ, dB = Aᵀ · G
                acc(*a, &mut |ga| tensor::matmul_nt_acc(g, bv, ga, m, n, k));
                acc(*b, &mut |gb| tensor::matmul_tn_acc(av, g, gb, k, m, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = nodes[b.0].value.dims2().unwrap().0;
                let (av, bv) = (val(*a), val(*b));
                // C = A·Bᵀ: dA = G · B, dB = Gᵀ · A
                acc(*a, &mut |ga| tensor::matmul_acc(g, bv, ga, m, n, k));
                acc(*b, &mut |gb| tensor::matmul_tn_acc(g, av, gb, n, m, k));
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.dims2().unwrap().1;
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (t, s) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *t += s;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((x, gy), y) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gy), y) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * y;
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |ga| add_into(ga, g));
                let n = nodes[row.0].value.numel();
                acc(*row, &mut |gr| {
                    for chunk in g.chunks_exact(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |ga| {
                    for (x, gy) in ga.iter_mut().zip(g) {
                        *x += c * gy;
                    }
                });
            }
            Op::Shift(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Tanh(a) => {
                let y = out.data();
                acc(*a, &mut |ga| {
                    for ((x, gy), yv) in ga.iter_mut().zip(g).zip(y) {
                        *x += gy * (1.0 - yv * yv);
                    }
                });
            }
            Op::Gelu(a) => {
                let xv = val(*a);
                acc(*a, &mut |ga| {
                    for ((x, gy), xi) in ga.iter_mut().zip(g).zip(xv) {
                        *x += gy * tensor::gelu_grad(*xi);
                    }
                });
            }
            Op::Square(a) => {
                let xv = val(*a);
                acc(*a, &mut |ga| {
                    for ((x, gy), xi) in ga.iter_mut().zip(g).zip(xv) {
                        *x += 2.0 * xi * gy;
                    }
                });
            }
            Op::Logistic(a) => {
                let y = out.data();
                acc(*a, &mut |ga| {
                    for ((x, gy), yv) in ga.iter_mut().zip(g).zip(y) {
                        *x += gy * yv * (1.0 - yv);
                    }
                });
            }
            Op::LogLogistic(a) => {
                let xv = val(*a);
                acc(*a, &mut |ga| {
                    // d/dx log σ(x) = σ(-x)
                    for ((x, gy), xi) in ga.iter_mut().zip(g).zip(xv) {
                        *x += gy * tensor::logistic(-xi);
                    }
                });
            }
            Op::Log(a) => {
                let xv = val(*a);
                acc(*a, &mut |ga| {
                    for ((x, gy), xi) in ga.iter_mut().zip(g).zip(xv) {
                        *x += gy / xi;
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = out.data();
                let n = *out.shape().last().unwrap_or(&1);
                acc(*a, &mut |ga| {
                    for ((gx, gy), yr) in ga.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let total: f64 = gy.iter().sum();
                        for j in 0..n {
                            gx[j] += gy[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::CausalSoftmax(a) => {
                let y = out.data();
                let n = out.dims2().unwrap().1;
                acc(*a, &mut |ga| {
                    for (r, ((gx, gy), yr)) in ga
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                        .enumerate()
                    {
                        let len = r + 1;
                        let inner = tensor::dot(&yr[..len], &gy[..len]);
                        for j in 0..len {
                            gx[j] += yr[j] * (gy[j] - inner);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let gv = val(*gain);
                let n = gv.len();
                acc(*x, &mut |gx| {
                    for (r, (gxr, gyr)) in gx.chunks_exact_mut(n).zip(g.chunks_exact(n)).enumerate() {
                        let xh = &normed[r * n..(r + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..n {
                            let d = gyr[j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                        }
                        let k = inv_std[r] / n as f64;
                        for j in 0..n {
                            let d = gyr[j] * gv[j];
                            gxr[j] += k * (n as f64 * d - sum_d - xh[j] * sum_dx);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (gyr, xh) in g.chunks_exact(n).zip(normed.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += gyr[j] * xh[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gyr in g.chunks_exact(n) {
                        add_into(gb, gyr);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = out.dims2().unwrap().1;
                acc(*x, &mut |gx| add_into(&mut gx[start * n..start * n + g.len()], g));
            }
            Op::Pick { x, cols } => {
                let n = nodes[x.0].value.dims2().unwrap().1;
                acc(*x, &mut |gx| {
                    for (i, &c) in cols.iter().enumerate() {
                        gx[i * n + c] += g[i];
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |ga| {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                });
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.numel() as f64;
                acc(*a, &mut |ga| {
                    for x in ga.iter_mut() {
                        *x += g[0] / n;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn logistic_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0), true);
        let y = g.logistic(x);
        assert_eq!(g.value(y).item(), 0.5);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn log_softmax_of_uniform_logits() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.3; 4]), false);
        let y = g.log_softmax(x);
        for &v in g.value(y).data() {
            assert!(approx(v, -(4f64).ln(), 1e-15));
        }
        assert!(approx(g.value(y).data()[0], -1.3863, 1e-4));
    }

    #[test]
    fn matmul_of_ones_counts() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full(&[2, 3], 1.0), false);
        let b = g.leaf(Tensor::full(&[3, 2], 1.0), false);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 2]);
        assert!(g.value(c).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn shape_mismatch_names_the_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), false);
        let b = g.leaf(Tensor::zeros(&[2, 3]), false);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
        let c = g.leaf(Tensor::zeros(&[3]), false);
        assert!(matches!(g.add(a, c), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 5.0]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn power_rule() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![2.0]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn fan_out_accumulates_additively() {
        // f(x) = sum(x*x + 3x) through a reused leaf must match a construction
        // where the two uses are separate leaves whose gradients are summed.
        let xs = vec![0.5, -1.5, 2.0];
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(xs.clone()), true);
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0);
        let t = g.add(sq, lin).unwrap();
        let s = g.sum(t);
        g.backward(s).unwrap();
        let shared = g.grad(x).unwrap().to_vec();

        let mut h = Graph::new();
        let x1 = h.leaf(Tensor::vector(xs.clone()), true);
        let x2 = h.leaf(Tensor::vector(xs.clone()), true);
        let x3 = h.leaf(Tensor::vector(xs), true);
        let sq = h.mul(x1, x2).unwrap();
        let lin = h.scale(x3, 3.0);
        let t = h.add(sq, lin).unwrap();
        let s = h.sum(t);
        h.backward(s).unwrap();
        let split: Vec<f64> = (0..3)
            .map(|i| h.grad(x1).unwrap()[i] + h.grad(x2).unwrap()[i] + h.grad(x3).unwrap()[i])
            .collect();
        assert_eq!(shared, split);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = g.square(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn ops_without_grad_inputs_are_not_recorded() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), false);
        let y = g.square(x);
        assert!(!g.requires_grad(y));
        let s = g.sum(y);
        assert!(matches!(g.backward(s), Err(Error::NoGradPath)));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(3, 3, (0..9).map(|v| v as f64 * 0.1).collect()).unwrap(), false);
        let y = g.causal_softmax(x).unwrap();
        let v = g.value(y);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1)[2], 0.0);
        for r in 0..3 {
            assert!(approx(v.row(r).iter().sum::<f64>(), 1.0, 1e-15));
        }
    }
}
