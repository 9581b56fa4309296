use std::cell::{Ref, RefCell};

use super::{matmul_into, transpose_data, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        affine: Option<(Var, Var)>,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SumLastAxis(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations. Inputs always precede the nodes that
/// consume them, so reverse index order is a valid backward schedule.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n] => Some((1, *n)),
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Records a leaf; gradients flow to it iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor.with_requires_grad(rg), Op::Leaf, rg)
    }

    pub fn param(&self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, var: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[var.0].value)
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = as_matrix(av.shape()).ok_or_else(|| shape_err("matmul", av.shape(), bv.shape()))?;
            let (k2, n) = as_matrix(bv.shape()).ok_or_else(|| shape_err("matmul", av.shape(), bv.shape()))?;
            if k != k2 || av.rank() != 2 || bv.rank() != 2 {
                return Err(shape_err("matmul", av.shape(), bv.shape()));
            }
            let mut out = vec![0.0; m * n];
            matmul_into(av.data(), bv.data(), &mut out, m, k, n);
            (
                Tensor::new(vec![m, n], out)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = {
            let av = self.value(a);
            if av.rank() != 2 {
                return Err(shape_err("transpose", av.shape(), &[]));
            }
            let (m, n) = (av.shape()[0], av.shape()[1]);
            Tensor::new(vec![n, m], transpose_data(av.data(), m, n))?
        };
        let rg = self.needs_grad(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` row vector to every row of an `[m, n]` matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, rv) = (&nodes[a.0].value, &nodes[row.0].value);
            let n = av.cols();
            if rv.len() != n || av.rank() != 2 {
                return Err(shape_err("add_row", av.shape(), rv.shape()));
            }
            let mut data = av.data().to_vec();
            for chunk in data.chunks_mut(n) {
                for (x, b) in chunk.iter_mut().zip(rv.data()) {
                    *x += b;
                }
            }
            Tensor::new(av.shape().to_vec(), data)?
        };
        let rg = self.needs_grad(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Scales each row `i` of `a: [m, n]` by `col[i]` where `col: [m, 1]`.
    pub fn mul_col(&self, a: Var, col: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, cv) = (&nodes[a.0].value, &nodes[col.0].value);
            if av.rank() != 2 || cv.shape() != [av.rows(), 1] {
                return Err(shape_err("mul_col", av.shape(), cv.shape()));
            }
            let n = av.cols();
            let mut data = av.data().to_vec();
            for (chunk, s) in data.chunks_mut(n).zip(cv.data()) {
                for x in chunk {
                    *x *= s;
                }
            }
            Tensor::new(av.shape().to_vec(), data)?
        };
        let rg = self.needs_grad(&[a, col]);
        Ok(self.push(value, Op::MulCol(a, col), rg))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let value = {
            let av = self.value(a);
            let data = av.data().iter().map(|x| x * factor).collect();
            Tensor::new(av.shape().to_vec(), data).expect("same shape")
        };
        let rg = self.needs_grad(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = {
            let av = self.value(a);
            let data = av.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
            Tensor::new(av.shape().to_vec(), data).expect("same shape")
        };
        let rg = self.needs_grad(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    /// Numerically stable softmax along `axis` (max subtracted per slice).
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            if axis >= xv.rank() {
                return Err(Error::contract(format!("softmax axis {axis} for rank {}", xv.rank())));
            }
            let mut out = xv.data().to_vec();
            softmax_in_place(&mut out, xv.shape(), axis);
            Tensor::new(xv.shape().to_vec(), out)?
        };
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes over the last axis to zero mean and unit variance, then
    /// applies `gamma * x + beta` when an affine pair is given.
    pub fn layer_norm(&self, x: Var, affine: Option<(Var, Var)>, eps: f64) -> Result<Var> {
        let (value, normalized, inv_std) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let n = xv.cols();
            if n == 0 {
                return Err(Error::contract("layer_norm over empty axis"));
            }
            if let Some((g, b)) = affine {
                let (gv, bv) = (&nodes[g.0].value, &nodes[b.0].value);
                if gv.len() != n || bv.len() != n {
                    return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
                }
            }
            let rows = xv.len() / n;
            let mut normalized = vec![0.0; xv.len()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let row = &xv.data()[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let s = 1.0 / (var + eps).sqrt();
                inv_std[r] = s;
                for (o, v) in normalized[r * n..(r + 1) * n].iter_mut().zip(row) {
                    *o = (v - mean) * s;
                }
            }
            let out = match affine {
                Some((g, b)) => {
                    let (gd, bd) = (nodes[g.0].value.data(), nodes[b.0].value.data());
                    normalized
                        .chunks(n)
                        .flat_map(|row| row.iter().zip(gd).zip(bd).map(|((x, g), b)| g * x + b))
                        .collect()
                }
                None => normalized.clone(),
            };
            (Tensor::new(xv.shape().to_vec(), out)?, normalized, inv_std)
        };
        let mut inputs = vec![x];
        if let Some((g, b)) = affine {
            inputs.extend([g, b]);
        }
        let rg = self.needs_grad(&inputs);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                affine,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean over rows of the (optionally label-smoothed) token cross-entropy.
    ///
    /// With `smoothing = s` the per-token target distribution is
    /// `(1 - s) * onehot + s / |V|`; `s = 0` gives `-log softmax(logits)[t, y_t]`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::contract(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        let (value, probs) = {
            let lv = self.value(logits);
            if lv.rank() != 2 || lv.rows() != targets.len() || targets.is_empty() {
                return Err(shape_err("cross_entropy", lv.shape(), &[targets.len()]));
            }
            let v = lv.cols();
            if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
                return Err(Error::Index {
                    what: "target vocabulary",
                    index: bad,
                    bound: v,
                });
            }
            let mut probs = vec![0.0; lv.len()];
            let mut total = 0.0;
            for (t, &y) in targets.iter().enumerate() {
                let row = lv.row(t);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
                let log_z = max + sum.ln();
                let nll = log_z - row[y];
                let token_loss = if smoothing == 0.0 {
                    nll
                } else {
                    let mean_nll = row.iter().map(|x| log_z - x).sum::<f64>() / v as f64;
                    (1.0 - smoothing) * nll + smoothing * mean_nll
                };
                total += token_loss;
                for (p, x) in probs[t * v..(t + 1) * v].iter_mut().zip(row) {
                    *p = (x - log_z).exp();
                }
            }
            let loss = total / targets.len() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("cross-entropy loss {loss}")));
            }
            (Tensor::scalar(loss), probs)
        };
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            rg,
        ))
    }

    /// Selects rows of `table: [n, d]` by id, yielding `[ids.len(), d]`.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = {
            let tv = self.value(table);
            if tv.rank() != 2 {
                return Err(shape_err("gather_rows", tv.shape(), &[ids.len()]));
            }
            let (n, d) = (tv.rows(), tv.cols());
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= n {
                    return Err(Error::Index {
                        what: "embedding table",
                        index: id,
                        bound: n,
                    });
                }
                data.extend_from_slice(tv.row(id));
            }
            Tensor::new(vec![ids.len(), d], data)?
        };
        let rg = self.needs_grad(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            if xv.rank() != 2 || start + len > xv.cols() || len == 0 {
                return Err(shape_err("slice_cols", xv.shape(), &[start, len]));
            }
            let data = (0..xv.rows())
                .flat_map(|r| xv.row(r)[start..start + len].iter().copied())
                .collect();
            Tensor::new(vec![xv.rows(), len], data)?
        };
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = parts.first().ok_or_else(|| Error::contract("concat_cols of nothing"))?;
            let rows = nodes[first.0].value.rows();
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let v = &nodes[p.0].value;
                if v.rank() != 2 || v.rows() != rows {
                    return Err(shape_err("concat_cols", nodes[first.0].value.shape(), v.shape()));
                }
                widths.push(v.cols());
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.0].value.row(r));
                }
            }
            Tensor::new(vec![rows, total], data)?
        };
        let rg = self.needs_grad(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = parts.first().ok_or_else(|| Error::contract("concat_rows of nothing"))?;
            let cols = nodes[first.0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                if v.rank() != 2 || v.cols() != cols {
                    return Err(shape_err("concat_rows", nodes[first.0].value.shape(), v.shape()));
                }
                data.extend_from_slice(v.data());
                rows += v.rows();
            }
            Tensor::new(vec![rows, cols], data)?
        };
        let rg = self.needs_grad(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row sums of `x: [m, n]`, shaped `[m, 1]`.
    pub fn sum_last_axis(&self, x: Var) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            if xv.rank() != 2 {
                return Err(shape_err("sum_last_axis", xv.shape(), &[]));
            }
            let data = (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect();
            Tensor::new(vec![xv.rows(), 1], data)?
        };
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, Op::SumLastAxis(x), rg))
    }

    pub fn sum(&self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.needs_grad(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_node = nodes
            .get(loss.0)
            .ok_or_else(|| Error::contract("loss is not on this tape"))?;
        if loss_node.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            backprop(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn softmax_in_place(data: &mut [f64], shape: &[usize], axis: usize) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |k: usize| base + k * inner;
            let max = (0..len).map(|k| data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..len {
                let e = (data[idx(k)] - max).exp();
                data[idx(k)] = e;
                sum += e;
            }
            for k in 0..len {
                data[idx(k)] /= sum;
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], var: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[var.0].requires_grad {
        return;
    }
    let slot = grads[var.0].get_or_insert_with(|| vec![0.0; nodes[var.0].value.len()]);
    f(slot);
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            accumulate(grads, nodes, *a, |ga| {
                // dA = G · Bᵀ
                for i in 0..m {
                    let g_row = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let b_row = &bv.data()[p * n..(p + 1) * n];
                        let mut s = 0.0;
                        for (x, y) in g_row.iter().zip(b_row) {
                            s += x * y;
                        }
                        ga[i * k + p] += s;
                    }
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                // dB = Aᵀ · G
                for i in 0..m {
                    let g_row = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let a_ip = av.data()[i * k + p];
                        for (o, x) in gb[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                            *o += a_ip * x;
                        }
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (m, n) = (node.value.rows(), node.value.cols());
            let back = transpose_data(g, m, n);
            accumulate(grads, nodes, *a, |ga| add_into(ga, &back));
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |ga| add_into(ga, g));
            accumulate(grads, nodes, *b, |gb| add_into(gb, g));
        }
        Op::AddRow(a, row) => {
            accumulate(grads, nodes, *a, |ga| add_into(ga, g));
            let n = node.value.cols();
            accumulate(grads, nodes, *row, |gr| {
                for chunk in g.chunks(n) {
                    add_into(gr, chunk);
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(grads, nodes, *a, |ga| {
                for ((o, x), y) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *o += x * y;
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for ((o, x), y) in gb.iter_mut().zip(g).zip(av.data()) {
                    *o += x * y;
                }
            });
        }
        Op::MulCol(a, col) => {
            let (av, cv) = (val(*a), val(*col));
            let n = av.cols();
            accumulate(grads, nodes, *a, |ga| {
                for ((o_row, g_row), s) in ga.chunks_mut(n).zip(g.chunks(n)).zip(cv.data()) {
                    for (o, x) in o_row.iter_mut().zip(g_row) {
                        *o += x * s;
                    }
                }
            });
            accumulate(grads, nodes, *col, |gc| {
                for (r, (g_row, a_row)) in g.chunks(n).zip(av.data().chunks(n)).enumerate() {
                    gc[r] += g_row.iter().zip(a_row).map(|(x, y)| x * y).sum::<f64>();
                }
            });
        }
        Op::Scale(a, factor) => {
            accumulate(grads, nodes, *a, |ga| {
                for (o, x) in ga.iter_mut().zip(g) {
                    *o += x * factor;
                }
            });
        }
        Op::Relu(a) => {
            let out = node.value.data();
            accumulate(grads, nodes, *a, |ga| {
                for ((o, x), y) in ga.iter_mut().zip(g).zip(out) {
                    if *y > 0.0 {
                        *o += x;
                    }
                }
            });
        }
        Op::Softmax { x, axis } => {
            let shape = node.value.shape();
            let y = node.value.data();
            let len = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            accumulate(grads, nodes, *x, |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                        for k in 0..len {
                            let j = base + k * inner;
                            gx[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            affine,
            normalized,
            inv_std,
        } => {
            let n = node.value.cols();
            let gamma = affine.map(|(gm, _)| val(gm).data());
            if let Some((gm, bt)) = affine {
                accumulate(grads, nodes, *gm, |gg| {
                    for (g_row, x_row) in g.chunks(n).zip(normalized.chunks(n)) {
                        for ((o, a), b) in gg.iter_mut().zip(g_row).zip(x_row) {
                            *o += a * b;
                        }
                    }
                });
                accumulate(grads, nodes, *bt, |gb| {
                    for g_row in g.chunks(n) {
                        add_into(gb, g_row);
                    }
                });
            }
            accumulate(grads, nodes, *x, |gx| {
                let nf = n as f64;
                let mut dxhat = vec![0.0; n];
                for (r, s) in inv_std.iter().enumerate() {
                    let g_row = &g[r * n..(r + 1) * n];
                    let xh = &normalized[r * n..(r + 1) * n];
                    for j in 0..n {
                        dxhat[j] = match gamma {
                            Some(gd) => g_row[j] * gd[j],
                            None => g_row[j],
                        };
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += s / nf * (nf * dxhat[j] - sum_d - xh[j] * sum_dx);
                    }
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            smoothing,
            probs,
        } => {
            let v = val(*logits).cols();
            let scale = g[0] / targets.len() as f64;
            let uniform = smoothing / v as f64;
            accumulate(grads, nodes, *logits, |gl| {
                for (t, &y) in targets.iter().enumerate() {
                    for k in 0..v {
                        let q = if k == y { 1.0 - smoothing + uniform } else { uniform };
                        gl[t * v + k] += (probs[t * v + k] - q) * scale;
                    }
                }
            });
        }
        Op::Gather { table, ids } => {
            let d = node.value.cols();
            accumulate(grads, nodes, *table, |gt| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            });
        }
        Op::SliceCols { x, start } => {
            let width = val(*x).cols();
            let len = node.value.cols();
            accumulate(grads, nodes, *x, |gx| {
                for (r, g_row) in g.chunks(len).enumerate() {
                    add_into(&mut gx[r * width + start..r * width + start + len], g_row);
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut offset = 0;
            for p in parts {
                let w = val(*p).cols();
                accumulate(grads, nodes, *p, |gp| {
                    for (r, o_row) in gp.chunks_mut(w).enumerate() {
                        add_into(o_row, &g[r * total + offset..r * total + offset + w]);
                    }
                });
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = val(*p).len();
                accumulate(grads, nodes, *p, |gp| add_into(gp, &g[offset..offset + len]));
                offset += len;
            }
        }
        Op::SumLastAxis(x) => {
            let n = val(*x).cols();
            accumulate(grads, nodes, *x, |gx| {
                for (o_row, gr) in gx.chunks_mut(n).zip(g) {
                    for o in o_row {
                        *o += gr;
                    }
                }
            });
        }
        Op::Sum(x) => {
            accumulate(grads, nodes, *x, |gx| {
                for o in gx {
                    *o += g[0];
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
