//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] records every operation of one forward pass. Values live in the
//! tape; [`Var`] is a cheap handle into it. Calling [`Tape::backward`] on a
//! scalar walks the record in reverse, accumulates gradients into every
//! non-frozen parameter of the [`ParamStore`] that took part, and returns the
//! gradients of all other tracked nodes. A tape can be differentiated once.

use std::sync::Arc;

use crate::activation::Activation;
use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{kernels, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Act(Var, Activation),
    Softmax {
        x: Var,
        axis: usize,
    },
    SoftmaxCausal(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MeanRows(Var),
    Sum(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    RepeatRows {
        x: Var,
        count: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// `(outer, dim, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Untracked value.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`] when tracked.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a stored parameter onto the tape without copying its values.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: Arc::clone(&p.value),
            op: Op::Param(id),
            requires_grad: !p.frozen,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul")?;
        let (k2, n) = bv.dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg, "matmul")
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul_nt")?;
        let (n, k2) = bv.dims2("matmul_nt")?;
        if k != k2 {
            return Err(mismatch("matmul_nt", av, bv));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), rg, "matmul_nt")
    }

    fn zip_same(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a vector to every row (last axis) of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = last_dim(xv);
        if bv.rank() != 1 || bv.len() != n {
            return Err(mismatch("add_row", xv, bv));
        }
        let b = bv.data();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + b[i % n]).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::AddRow(x, bias), rg, "add_row")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect());
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg, "scale")
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.len() != 1 {
            return Err(mismatch("scale_by", xv, sv));
        }
        let c = sv.data()[0];
        let out = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect());
        let rg = self.rg(&[x, s]);
        self.push(out, Op::ScaleBy(x, s), rg, "scale_by")
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| kind.apply(v)).collect());
        let rg = self.rg(&[x]);
        self.push(out, Op::Act(x, kind), rg, "activation")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: xv.rank(),
            });
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax { x, axis }, rg, "softmax")
    }

    /// Row softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn softmax_causal(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("softmax_causal")?;
        if r != c {
            return Err(mismatch("softmax_causal", xv, xv));
        }
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for i in 0..r {
            let row = &src[i * c..i * c + i + 1];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[i * c + j] = e;
                total += e;
            }
            for j in 0..=i {
                out[i * c + j] /= total;
            }
        }
        let out = Tensor::from_parts(vec![r, c], out);
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxCausal(x), rg, "softmax_causal")
    }

    /// Normalizes each row (last axis) to zero mean and unit variance, then
    /// applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let n = last_dim(xv);
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(mismatch("layer_norm", xv, gv));
        }
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    /// Mean over the first axis: `[m×n] → [n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2("mean_rows")?;
        let mut acc = vec![0.0; n];
        for r in 0..m {
            acc.iter_mut().zip(xv.row(r)).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= m as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![n], acc), Op::MeanRows(x), rg, "mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(Vec::new(), vec![total]), Op::Sum(x), rg, "sum")
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| TensorError::Config("concat of nothing".into()))?);
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { op: "concat", axis, rank });
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &p in parts {
            let pv = self.value(p);
            let ok = pv.rank() == rank
                && pv.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", first, pv));
            }
            shape[axis] += pv.shape()[axis];
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let block = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(TensorError::InvalidAxis {
                op: "slice",
                axis,
                rank: xv.rank(),
            });
        }
        let dim = xv.shape()[axis];
        if len == 0 || start + len > dim {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                len: dim,
            });
        }
        let (outer, _, inner) = split_axis(xv.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }, rg, "slice")
    }

    /// Element `i` of a vector as a scalar.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let s = self.slice(x, 0, i, 1)?;
        self.reshape(s, &[])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.len() || shape.contains(&0) {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: xv.len(),
            });
        }
        let out = Tensor::from_parts(shape.to_vec(), xv.data().to_vec());
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg, "reshape")
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = tv.dims2("gather_rows")?;
        if ids.is_empty() {
            return Err(TensorError::Config("gather_rows with no ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    len: v,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "gather_rows",
        )
    }

    /// Stacks `count` exact copies of vector `x`: `[n] → [count×n]`.
    pub fn repeat_rows(&mut self, x: Var, count: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 || count == 0 {
            return Err(mismatch("repeat_rows", xv, xv));
        }
        let n = xv.len();
        let out = xv.data().repeat(count);
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![count, n], out), Op::RepeatRows { x, count }, rg, "repeat_rows")
    }

    /// Mean cross-entropy of `logits` rows (`[n×V]`, or `[V]` for one row)
    /// against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let v = last_dim(lv);
        let n = lv.len() / v;
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    len: v,
                });
            }
            let row = &lv.data()[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[r * v + j] = e;
                z += e;
            }
            probs[r * v..(r + 1) * v].iter_mut().for_each(|p| *p /= z);
            total += z.ln() + max - row[t];
        }
        let loss = total / n as f64;
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::from_parts(Vec::new(), vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients of non-frozen parameters are added to their accumulators in
    /// `store`; everything else is returned.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads, store);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>], store: &mut ParamStore) {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                if wants(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(g, val(b).data(), &mut da, m, n, k);
                    accumulate(grads, a, da);
                }
                if wants(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(val(a).data(), g, &mut db, m, k, n);
                    accumulate(grads, b, db);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[0];
                if wants(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul(g, val(b).data(), &mut da, m, n, k);
                    accumulate(grads, a, da);
                }
                if wants(b) {
                    let mut db = vec![0.0; n * k];
                    kernels::matmul_tn(g, val(a).data(), &mut db, m, n, k);
                    accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if wants(b) {
                    accumulate(grads, b, g.to_vec());
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if wants(b) {
                    accumulate(grads, b, g.iter().map(|v| -v).collect());
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.iter().zip(val(b).data()).map(|(x, y)| x * y).collect());
                }
                if wants(b) {
                    accumulate(grads, b, g.iter().zip(val(a).data()).map(|(x, y)| x * y).collect());
                }
            }
            &Op::AddRow(x, bias) => {
                if wants(x) {
                    accumulate(grads, x, g.to_vec());
                }
                if wants(bias) {
                    let n = val(bias).len();
                    let mut db = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        db[i % n] += v;
                    }
                    accumulate(grads, bias, db);
                }
            }
            &Op::Scale(x, c) => {
                if wants(x) {
                    accumulate(grads, x, g.iter().map(|v| v * c).collect());
                }
            }
            &Op::ScaleBy(x, s) => {
                if wants(x) {
                    let c = val(s).data()[0];
                    accumulate(grads, x, g.iter().map(|v| v * c).collect());
                }
                if wants(s) {
                    let ds: f64 = g.iter().zip(val(x).data()).map(|(a, b)| a * b).sum();
                    accumulate(grads, s, vec![ds]);
                }
            }
            &Op::Act(x, kind) => {
                if wants(x) {
                    let dx = g.iter().zip(val(x).data()).map(|(gv, &xv)| gv * kind.derivative(xv)).collect();
                    accumulate(grads, x, dx);
                }
            }
            &Op::Softmax { x, axis } => {
                if wants(x) {
                    let (outer, n, inner) = split_axis(out.shape(), axis);
                    let p = out.data();
                    let mut dx = vec![0.0; p.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * p[at(j)]).sum();
                            for j in 0..n {
                                dx[at(j)] = p[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    accumulate(grads, x, dx);
                }
            }
            &Op::SoftmaxCausal(x) => {
                if wants(x) {
                    let c = out.shape()[1];
                    let p = out.data();
                    let mut dx = vec![0.0; p.len()];
                    for i in 0..out.shape()[0] {
                        let row = i * c..i * c + i + 1;
                        let dot: f64 = row.clone().map(|k| g[k] * p[k]).sum();
                        for k in row {
                            dx[k] = p[k] * (g[k] - dot);
                        }
                    }
                    accumulate(grads, x, dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = val(*gamma).len();
                let gam = val(*gamma).data();
                if wants(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, &s) in rstd.iter().enumerate() {
                        let span = r * n..(r + 1) * n;
                        let dh: Vec<f64> = span.clone().map(|k| g[k] * gam[k - r * n]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dh.iter().zip(&xhat[span.clone()]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for (j, k) in span.enumerate() {
                            dx[k] = s * (dh[j] - mean_dh - xhat[k] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if wants(*gamma) {
                    let mut dg = vec![0.0; n];
                    for (k, (gv, h)) in g.iter().zip(xhat).enumerate() {
                        dg[k % n] += gv * h;
                    }
                    accumulate(grads, *gamma, dg);
                }
                if wants(*beta) {
                    let mut db = vec![0.0; n];
                    for (k, gv) in g.iter().enumerate() {
                        db[k % n] += gv;
                    }
                    accumulate(grads, *beta, db);
                }
            }
            &Op::MeanRows(x) => {
                if wants(x) {
                    let m = val(x).shape()[0];
                    let dx = g.iter().map(|v| v / m as f64).collect::<Vec<_>>().repeat(m);
                    accumulate(grads, x, dx);
                }
            }
            &Op::Sum(x) => {
                if wants(x) {
                    accumulate(grads, x, vec![g[0]; val(x).len()]);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = val(p).shape()[*axis] * inner;
                    if wants(p) {
                        let mut dp = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let base = o * total + offset;
                            dp.extend_from_slice(&g[base..base + block]);
                        }
                        accumulate(grads, p, dp);
                    }
                    offset += block;
                }
            }
            &Op::Slice { x, axis, start } => {
                if wants(x) {
                    let xs = val(x).shape();
                    let (outer, dim, inner) = split_axis(xs, axis);
                    let len = out.shape()[axis];
                    let mut dx = vec![0.0; val(x).len()];
                    for o in 0..outer {
                        let base = o * dim * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dx[base..base + len * inner].copy_from_slice(src);
                    }
                    accumulate(grads, x, dx);
                }
            }
            &Op::Reshape(x) => {
                if wants(x) {
                    accumulate(grads, x, g.to_vec());
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let d = val(*table).shape()[1];
                    let mut dt = vec![0.0; val(*table).len()];
                    for (r, &id) in ids.iter().enumerate() {
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                    accumulate(grads, *table, dt);
                }
            }
            &Op::RepeatRows { x, count } => {
                if wants(x) {
                    let n = val(x).len();
                    let mut dx = vec![0.0; n];
                    for r in 0..count {
                        dx.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(a, b)| *a += b);
                    }
                    accumulate(grads, x, dx);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if wants(*logits) {
                    let v = probs.len() / targets.len();
                    let scale = g[0] / targets.len() as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * v + t] -= scale;
                    }
                    accumulate(grads, *logits, dl);
                }
            }
        }
    }
}
