//! Eager reverse-mode automatic differentiation.
//!
//! Every operation computes its value immediately and appends a node to the
//! graph. Nodes are created in topological order, so backward is a single
//! reverse sweep over the node list.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamGrad, ParamId, ParamStore};
use crate::tensor::{layer_norm_forward, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Stored {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Tanh(Var),
    Relu(Var),
    Softmax(Var, usize),
    MaskedSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        x_hat: Tensor,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    StackRows(Vec<Var>),
    Gather(ParamId, Vec<usize>),
    MaskedMaxRows(Var, Vec<usize>),
    SumAxis(Var, usize),
    Sum(Var),
    LogSoftmax(Var),
    Pick(Var, usize),
    Reshape(Var),
}

struct Node {
    value: Stored,
    op: Op,
    requires_grad: bool,
}

static NO_PARAMS: ParamStore = ParamStore::new();

/// A recorded computation over tensors and (borrowed) parameters.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Graph::new(&NO_PARAMS)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Stored::Owned(t) => t,
            Stored::Param(id) => self.params.value(*id),
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Stored::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_with(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push_with(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node, so
    /// every use of a parameter accumulates into a single gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Stored::Param(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        if self.value(bias).len() != cols {
            return Err(Error::Shape {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        for r in 0..rows {
            for (o, bv) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).scale(factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// Elementwise product with a tensor that is not differentiated.
    pub fn mul_const(&mut self, x: Var, factor: Tensor) -> Result<Var> {
        let out = self.value(x).mul(&factor)?;
        Ok(self.push(out, Op::MulConst(x, factor), &[x]))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v >= 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        Ok(self.push(out, Op::Softmax(x, axis), &[x]))
    }

    /// Row-wise softmax of an `m x m` score matrix where columns with
    /// `key_mask[j] == false` get probability exactly zero.
    pub fn masked_softmax_rows(&mut self, x: Var, key_mask: &[bool]) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        if key_mask.len() != cols {
            return Err(Error::Shape {
                op: "masked_softmax_rows",
                left: self.shape(x).to_vec(),
                right: vec![key_mask.len()],
            });
        }
        if !key_mask.iter().any(|&k| k) {
            return Err(Error::InvalidArgument(
                "masked_softmax_rows: every key is masked".into(),
            ));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(key_mask)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for j in 0..cols {
                if key_mask[j] {
                    let e = (row[j] - max).exp();
                    dst[j] = e;
                    total += e;
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(out, Op::MaskedSoftmaxRows(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, x_hat, inv_std) = layer_norm_forward(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                x_hat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::matrix(rows, total, out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        if start + len > cols || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "slice_cols: columns {start}..{} out of range for {cols}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::matrix(rows, len, out)?;
        Ok(self.push(out, Op::SliceCols(x, start), &[x]))
    }

    /// Stacks equally sized tensors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let width = self.value(rows[0]).len();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if self.value(r).len() != width {
                return Err(Error::Shape {
                    op: "stack_rows",
                    left: self.shape(rows[0]).to_vec(),
                    right: self.shape(r).to_vec(),
                });
            }
            out.extend_from_slice(self.value(r).data());
        }
        let out = Tensor::matrix(rows.len(), width, out)?;
        Ok(self.push(out, Op::StackRows(rows.to_vec()), rows))
    }

    /// Looks up rows of a parameter table. The backward pass produces a
    /// row-sparse gradient instead of a dense one.
    pub fn gather(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let group = self.params.get(table);
        let (rows, cols) = group.value.dims2();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange {
                    table: group.name.clone(),
                    index: id,
                    rows,
                });
            }
            out.extend_from_slice(group.value.row(id));
        }
        let out = Tensor::matrix(ids.len(), cols, out)?;
        Ok(self.push_with(out, Op::Gather(table, ids.to_vec()), true))
    }

    /// Column-wise maximum over the rows where `mask` is true; yields a vector.
    pub fn masked_max_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        if mask.len() != rows {
            return Err(Error::Shape {
                op: "masked_max_rows",
                left: self.shape(x).to_vec(),
                right: vec![mask.len()],
            });
        }
        let first = mask
            .iter()
            .position(|&m| m)
            .ok_or_else(|| Error::InvalidArgument("masked_max_rows: every row is masked".into()))?;
        let src = self.value(x);
        let mut arg = vec![first; cols];
        let mut out: Vec<f64> = src.row(first).to_vec();
        for r in (first + 1..rows).filter(|&r| mask[r]) {
            for (c, v) in src.row(r).iter().enumerate() {
                if *v > out[c] {
                    out[c] = *v;
                    arg[c] = r;
                }
            }
        }
        Ok(self.push(Tensor::vector(out), Op::MaskedMaxRows(x, arg), &[x]))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).sum_axis(axis)?;
        Ok(self.push(out, Op::SumAxis(x, axis), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Log-softmax over all elements of a vector.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let max = src.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let out = src.map(|v| v - lse);
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Scalar element `index` of the flattened tensor.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let src = self.value(x);
        if index >= src.len() {
            return Err(Error::InvalidArgument(format!(
                "pick: index {index} out of range for {} elements",
                src.len()
            )));
        }
        let out = Tensor::scalar(src.data()[index]);
        Ok(self.push(out, Op::Pick(x, index), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Inverted dropout. Identity when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        check_dropout(p)?;
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = Tensor::new(self.shape(x).to_vec(), mask)?;
        self.mul_const(x, mask)
    }

    /// `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let logp = self.log_softmax(logits);
        let picked = self.pick(logp, target)?;
        Ok(self.scale(picked, -1.0))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut rows: BTreeMap<ParamId, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads, &mut rows)?;
            grads[idx] = Some(g);
        }

        let mut params: BTreeMap<ParamId, ParamGrad> = BTreeMap::new();
        for (&id, &v) in &self.param_nodes {
            if let Some(g) = grads[v.0].take() {
                params.insert(id, ParamGrad::Dense(g));
                grads[v.0] = None;
            }
        }
        for (id, r) in rows {
            match params.get_mut(&id) {
                Some(ParamGrad::Dense(t)) => {
                    let shape = t.shape().to_vec();
                    t.add_assign(&ParamGrad::Rows(r).to_dense(&shape))?;
                }
                _ => {
                    params.insert(id, ParamGrad::Rows(r));
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        rows: &mut BTreeMap<ParamId, BTreeMap<usize, Vec<f64>>>,
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let out = self.value(Var(idx));
        let acc = |v: Var, delta: Tensor, grads: &mut [Option<Tensor>]| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&delta),
                slot => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.nodes[a.0].requires_grad {
                    acc(*a, g.matmul(&bv.transpose()?)?, grads)?;
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, av.transpose()?.matmul(g)?, grads)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads)?;
                acc(*b, g.clone(), grads)?;
            }
            Op::AddBias(x, bias) => {
                acc(*x, g.clone(), grads)?;
                let (rows_n, cols) = g.dims2();
                let mut gb = vec![0.0; cols];
                for r in 0..rows_n {
                    for (d, v) in gb.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                let shape = self.shape(*bias).to_vec();
                acc(*bias, Tensor::new(shape, gb)?, grads)?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.mul(self.value(*b))?, grads)?;
                acc(*b, g.mul(self.value(*a))?, grads)?;
            }
            Op::Scale(x, f) => acc(*x, g.scale(*f), grads)?,
            Op::MulConst(x, factor) => acc(*x, g.mul(factor)?, grads)?,
            Op::Tanh(x) => {
                let d = g.mul(&out.map(|y| 1.0 - y * y))?;
                acc(*x, d, grads)?;
            }
            Op::Relu(x) => {
                let mask = self.value(*x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                acc(*x, g.mul(&mask)?, grads)?;
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = out.axis_split("softmax", *axis)?;
                let mut d = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g.data()[at(j)] * out.data()[at(j)]).sum();
                        for j in 0..n {
                            d[at(j)] = out.data()[at(j)] * (g.data()[at(j)] - dot);
                        }
                    }
                }
                acc(*x, Tensor::new(out.shape().to_vec(), d)?, grads)?;
            }
            Op::MaskedSoftmaxRows(x) => {
                let (rows_n, cols) = out.dims2();
                let mut d = vec![0.0; out.len()];
                for r in 0..rows_n {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        d[r * cols + j] = y[j] * (gr[j] - dot);
                    }
                }
                acc(*x, Tensor::new(out.shape().to_vec(), d)?, grads)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                x_hat,
                inv_std,
            } => {
                let d = *out.shape().last().unwrap();
                let n_rows = out.len() / d;
                let gain_v = self.value(*gain).data();
                let mut g_gain = vec![0.0; d];
                let mut g_bias = vec![0.0; d];
                let mut dx = vec![0.0; out.len()];
                for r in 0..n_rows {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let xh = &x_hat.data()[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        g_gain[j] += gr[j] * xh[j];
                        g_bias[j] += gr[j];
                        let dxh = gr[j] * gain_v[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gain_v[j];
                        dx[r * d + j] = inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                acc(*x, Tensor::new(out.shape().to_vec(), dx)?, grads)?;
                let gs = self.shape(*gain).to_vec();
                acc(*gain, Tensor::new(gs, g_gain)?, grads)?;
                let bs = self.shape(*bias).to_vec();
                acc(*bias, Tensor::new(bs, g_bias)?, grads)?;
            }
            Op::Transpose(x) => acc(*x, g.transpose()?, grads)?,
            Op::ConcatCols(parts) => {
                let (n_rows, total) = g.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    let mut d = Vec::with_capacity(n_rows * w);
                    for r in 0..n_rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    let shape = self.shape(p).to_vec();
                    acc(p, Tensor::new(shape, d)?, grads)?;
                }
            }
            Op::SliceCols(x, start) => {
                let (n_rows, cols) = self.value(*x).dims2();
                let w = g.dims2().1;
                let mut d = Tensor::zeros(self.shape(*x));
                for r in 0..n_rows {
                    d.data_mut()[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                acc(*x, d, grads)?;
            }
            Op::StackRows(parts) => {
                for (r, &p) in parts.iter().enumerate() {
                    let shape = self.shape(p).to_vec();
                    acc(p, Tensor::new(shape, g.row(r).to_vec())?, grads)?;
                }
            }
            Op::Gather(table, ids) => {
                let entry = rows.entry(*table).or_default();
                let cols = g.dims2().1;
                for (r, &id) in ids.iter().enumerate() {
                    let dst = entry.entry(id).or_insert_with(|| vec![0.0; cols]);
                    for (d, v) in dst.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
            }
            Op::MaskedMaxRows(x, arg) => {
                let cols = self.value(*x).dims2().1;
                let mut d = Tensor::zeros(self.shape(*x));
                for (c, &r) in arg.iter().enumerate() {
                    d.data_mut()[r * cols + c] += g.data()[c];
                }
                acc(*x, d, grads)?;
            }
            Op::SumAxis(x, axis) => {
                let src = self.value(*x);
                let (outer, n, inner) = src.axis_split("sum_axis", *axis)?;
                let mut d = vec![0.0; src.len()];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            d[(o * n + j) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                acc(*x, Tensor::new(src.shape().to_vec(), d)?, grads)?;
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                acc(*x, Tensor::full(&shape, g.item()), grads)?;
            }
            Op::LogSoftmax(x) => {
                let total = g.sum();
                let d = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(lp, gv)| gv - lp.exp() * total)
                    .collect();
                acc(*x, Tensor::new(out.shape().to_vec(), d)?, grads)?;
            }
            Op::Pick(x, index) => {
                let mut d = Tensor::zeros(self.shape(*x));
                d.data_mut()[*index] = g.item();
                acc(*x, d, grads)?;
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                acc(*x, g.reshape(&shape)?, grads)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn check_dropout(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    Ok(())
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, ParamGrad>,
}

impl Gradients {
    /// Gradient with respect to a non-parameter node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&ParamGrad> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &ParamGrad)> {
        self.params.iter().map(|(&id, g)| (id, g))
    }

    /// Adds `scale` times every parameter gradient into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) {
        for (&id, g) in &self.params {
            store.accumulate(id, g, scale);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_derivative() {
        let mut g = Graph::default();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_y() {
        let z = vec![0.3, -1.2, 2.0, 0.0];
        let mut g = Graph::default();
        let x = g.variable(Tensor::vector(z.clone()));
        let loss = g.cross_entropy(x, 2).unwrap();
        let grads = g.backward(loss).unwrap();
        let p = Tensor::vector(z).softmax(0).unwrap();
        for (k, (gv, pv)) in grads.wrt(x).unwrap().data().iter().zip(p.data()).enumerate() {
            let y = if k == 2 { 1.0 } else { 0.0 };
            assert!((gv - (pv - y)).abs() < 1e-14);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::default();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn param_reuse_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add(ParamGroup::new("w", Tensor::scalar(2.0)));
        let mut g = Graph::new(&store);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let y = g.mul(s, a).unwrap(); // 2w^2
        let grads = g.backward(y).unwrap();
        match grads.param(id).unwrap() {
            ParamGrad::Dense(t) => assert_eq!(t.item(), 8.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gather_produces_row_gradients() {
        let mut store = ParamStore::new();
        let id = store.add(ParamGroup::new(
            "emb",
            Tensor::matrix(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
        ));
        let mut g = Graph::new(&store);
        let rows = g.gather(id, &[2, 2, 1]).unwrap();
        assert_eq!(g.value(rows).data(), &[4.0, 5.0, 4.0, 5.0, 2.0, 3.0]);
        let s = g.sum(rows);
        let grads = g.backward(s).unwrap();
        let dense = grads.param(id).unwrap().to_dense(&[3, 2]);
        assert_eq!(dense.data(), &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        assert!(g.gather(id, &[3]).is_err());
    }

    #[test]
    fn masked_softmax_zeroes_masked_keys() {
        let mut g = Graph::default();
        let x = g.variable(Tensor::matrix(2, 3, vec![1.0, 5.0, 2.0, 0.0, 0.0, 0.0]).unwrap());
        let y = g.masked_softmax_rows(x, &[true, false, true]).unwrap();
        let v = g.value(y);
        assert_eq!(v.get2(0, 1), 0.0);
        assert_eq!(v.get2(1, 0), 0.5);
        assert!(g.masked_softmax_rows(x, &[false, false, false]).is_err());
    }

    #[test]
    fn dropout_identities_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::default();
        let x = g.variable(Tensor::full(&[1000, 1000], 1.0));
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
        let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
        let mean = g.value(y).sum() / 1e6;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn masked_max_routes_to_argmax() {
        let mut g = Graph::default();
        let x = g.variable(Tensor::matrix(3, 2, vec![1.0, 9.0, 3.0, 0.0, 7.0, 8.0]).unwrap());
        let p = g.masked_max_rows(x, &[true, true, false]).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 9.0]);
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
