use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_raw, transpose_raw, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One recorded primitive. Inputs are earlier tape positions, so iterating
/// the record in reverse replays adjoints in reverse execution order.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulScalar { a: Var, c: f64 },
    AddBroadcastRow { a: Var, row: Var },
    Relu { a: Var },
    Gelu { a: Var },
    SoftmaxLast { a: Var },
    MeanAxis { a: Var, axis: usize },
    SumAll { a: Var },
    LayerNorm { x: Var, gain: Var, offset: Var, eps: f64 },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    Transpose { a: Var },
    Reshape { a: Var },
    CrossEntropy { logits: Var, label: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Per-forward computation record for reverse-mode differentiation.
///
/// Operations are recorded in execution order; [`Graph::backward`] walks them
/// once in reverse, accumulating adjoints. Gradients persist on the graph, so
/// repeated backward calls accumulate.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    // One leaf per parameter per graph; keyed for reuse across a batch.
    param_vars: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
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

    /// Accumulated gradient of `v`, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Record a constant input (never receives gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Record an input, optionally tracked for gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Record a parameter from `store` as a graph leaf, reusing the leaf when
    /// the same parameter is requested again within this graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let entry = store.entry(id);
        let v = self.push(entry.value.clone(), Op::Leaf, entry.trainable);
        self.param_vars.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    /// Add this graph's parameter gradients into `store` (registration order).
    pub fn write_grads(&self, store: &mut ParamStore) {
        for &(id, var) in &self.param_order {
            if let Some(g) = self.nodes[var.0].grad.as_ref() {
                store.accumulate_grad(id, g);
            }
        }
    }

    // ── Primitives ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul { a, b }, rg))
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub { a, b }, rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, rg))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let rg = self.requires_grad(a);
        let shape = self.shape(a).to_vec();
        self.push(
            Tensor::new(shape, data).expect("same shape"),
            Op::MulScalar { a, c },
            rg,
        )
    }

    /// Add `row` to every row of `a`. `row` must have exactly `a`'s trailing
    /// extent as element count (shape `[n]` or `[1, n]`).
    pub fn add_broadcast_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let n = *sa.last().ok_or(Error::ShapeMismatch {
            op: "add_broadcast_row",
            lhs: sa.clone(),
            rhs: self.shape(row).to_vec(),
        })?;
        if self.value(row).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast_row",
                lhs: sa,
                rhs: self.shape(row).to_vec(),
            });
        }
        let rv = self.value(row).data().to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + rv[i % n])
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(row);
        Ok(self.push(Tensor::new(sa, data)?, Op::AddBroadcastRow { a, row }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let rg = self.requires_grad(a);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Relu { a }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| gelu_fwd(x)).collect();
        let rg = self.requires_grad(a);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Gelu { a }, rg)
    }

    /// Softmax over the trailing axis, computed with max subtraction.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        if !self.value(a).all_finite() {
            return Err(Error::NonFinite {
                op: "softmax",
                what: format!("input of shape {:?}", self.shape(a)),
            });
        }
        let shape = self.shape(a).to_vec();
        let n = *shape.last().expect("non-empty shape");
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_row(row);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::SoftmaxLast { a }, rg))
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "mean_axis",
                axis,
                shape,
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    data[o * inner + i] += x[base + i];
                }
            }
        }
        let inv = 1.0 / n as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::MeanAxis { a, axis }, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, rg)
    }

    /// Row-wise layer normalization over the trailing axis of a 2-D input,
    /// followed by the affine map `gain * xhat + offset`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[1] < 2 {
            return Err(Error::Config(format!(
                "layer_norm expects [rows, h] with h >= 2, got {shape:?}"
            )));
        }
        let h = shape[1];
        if self.value(gain).numel() != h || self.value(offset).numel() != h {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let gv = self.value(gain).data().to_vec();
        let ov = self.value(offset).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(h) {
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * gv[j] + ov[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(offset);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::LayerNorm { x, gain, offset, eps },
            rg,
        ))
    }

    /// Stack 2-D inputs vertically (all must share the column count).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.require_matching(parts, "concat_rows", 1)?;
        let rows: usize = parts.iter().map(|&p| self.shape(p)[0]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows { parts: parts.to_vec() },
            rg,
        ))
    }

    /// Stack 2-D inputs horizontally (all must share the row count).
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.require_matching(parts, "concat_cols", 0)?;
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = vec![0.0; rows * cols];
        let mut col0 = 0usize;
        for &p in parts {
            let pc = self.shape(p)[1];
            let pv = self.value(p).data();
            for r in 0..rows {
                data[r * cols + col0..r * cols + col0 + pc]
                    .copy_from_slice(&pv[r * pc..(r + 1) * pc]);
            }
            col0 += pc;
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatCols { parts: parts.to_vec() },
            rg,
        ))
    }

    fn require_matching(&self, parts: &[Var], op: &'static str, fixed_dim: usize) -> Result<usize> {
        let first = *parts.first().ok_or(Error::Config(format!("{op}: empty input list")))?;
        if self.shape(first).len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(first).to_vec(),
                rhs: vec![],
            });
        }
        let extent = self.shape(first)[fixed_dim];
        for &p in &parts[1..] {
            if self.shape(p).len() != 2 || self.shape(p)[fixed_dim] != extent {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        Ok(extent)
    }

    /// Rows `start..end` of a 2-D input.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || start >= end || end > shape[0] {
            return Err(Error::Config(format!(
                "slice_rows: invalid range {start}..{end} for shape {shape:?}"
            )));
        }
        let cols = shape[1];
        let data = self.value(a).data()[start * cols..end * cols].to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::new(vec![end - start, cols], data)?,
            Op::SliceRows { a, start },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: shape,
                rhs: vec![],
            });
        }
        let data = transpose_raw(self.value(a).data(), shape[0], shape[1]);
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::new(vec![shape[1], shape[0]], data)?,
            Op::Transpose { a },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// Negative log softmax probability of `label`, stabilized via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 1 {
            return Err(Error::Config(format!(
                "cross_entropy expects rank-1 logits, got {shape:?}"
            )));
        }
        let classes = shape[0];
        if label >= classes {
            return Err(Error::IndexOutOfRange {
                index: label,
                limit: classes,
            });
        }
        let x = self.value(logits).data();
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - x[label];
        let rg = self.requires_grad(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label }, rg))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Each recorded op is visited once,
    /// in reverse execution order; gradients accumulate on the graph (and so
    /// across repeated calls).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar {
                op: "backward",
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut adjoint: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adjoint[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                adjoint[id] = None;
                continue;
            }
            let Some(g) = adjoint[id].take() else { continue };
            self.propagate(id, &g, &mut adjoint);
            match &mut self.nodes[id].grad {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Scatter the adjoint `g` of node `id` onto its inputs.
    fn propagate(&self, id: usize, g: &[f64], adjoint: &mut [Option<Vec<f64>>]) {
        let send = |graph: &Graph, v: Var, contrib: Vec<f64>, adj: &mut [Option<Vec<f64>>]| {
            if !graph.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
                slot @ None => *slot = Some(contrib),
            }
        };

        match self.nodes[id].op.clone() {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.requires_grad(a) {
                    let bt = transpose_raw(bv, k, n);
                    send(self, a, matmul_raw(g, &bt, m, n, k), adjoint);
                }
                if self.requires_grad(b) {
                    let at = transpose_raw(av, m, k);
                    send(self, b, matmul_raw(&at, g, k, m, n), adjoint);
                }
            }
            Op::Add { a, b } => {
                send(self, a, g.to_vec(), adjoint);
                send(self, b, g.to_vec(), adjoint);
            }
            Op::Sub { a, b } => {
                send(self, a, g.to_vec(), adjoint);
                send(self, b, g.iter().map(|v| -v).collect(), adjoint);
            }
            Op::Mul { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                send(self, a, g.iter().zip(bv).map(|(gv, y)| gv * y).collect(), adjoint);
                send(self, b, g.iter().zip(av).map(|(gv, x)| gv * x).collect(), adjoint);
            }
            Op::MulScalar { a, c } => {
                send(self, a, g.iter().map(|v| v * c).collect(), adjoint);
            }
            Op::AddBroadcastRow { a, row } => {
                send(self, a, g.to_vec(), adjoint);
                if self.requires_grad(row) {
                    let n = self.value(row).numel();
                    let mut rg = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        rg[i % n] += v;
                    }
                    send(self, row, rg, adjoint);
                }
            }
            Op::Relu { a } => {
                let xv = self.value(a).data();
                send(
                    self,
                    a,
                    g.iter()
                        .zip(xv)
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect(),
                    adjoint,
                );
            }
            Op::Gelu { a } => {
                let xv = self.value(a).data();
                send(
                    self,
                    a,
                    g.iter().zip(xv).map(|(gv, &x)| gv * gelu_grad(x)).collect(),
                    adjoint,
                );
            }
            Op::SoftmaxLast { a } => {
                let y = self.value(Var(id)).data();
                let n = *self.shape(a).last().expect("non-empty");
                let mut out = vec![0.0; y.len()];
                for (r, (g_row, y_row)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(gv, yv)| gv * yv).sum();
                    for j in 0..n {
                        out[r * n + j] = y_row[j] * (g_row[j] - dot);
                    }
                }
                send(self, a, out, adjoint);
            }
            Op::MeanAxis { a, axis } => {
                let shape = self.shape(a).to_vec();
                let (outer, n, inner) = split_axis(&shape, axis);
                let inv = 1.0 / n as f64;
                let mut out = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        for i in 0..inner {
                            out[base + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                send(self, a, out, adjoint);
            }
            Op::SumAll { a } => {
                send(self, a, vec![g[0]; self.value(a).numel()], adjoint);
            }
            Op::LayerNorm { x, gain, offset, eps } => {
                let shape = self.shape(x).to_vec();
                let (rows, h) = (shape[0], shape[1]);
                let xv = self.value(x).data();
                let gv = self.value(gain).data();
                let mut dx = vec![0.0; rows * h];
                let mut dgain = vec![0.0; h];
                let mut doffset = vec![0.0; h];
                for r in 0..rows {
                    let row = &xv[r * h..(r + 1) * h];
                    let g_row = &g[r * h..(r + 1) * h];
                    let mean = row.iter().sum::<f64>() / h as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    for j in 0..h {
                        dgain[j] += g_row[j] * xhat[j];
                        doffset[j] += g_row[j];
                    }
                    // dxhat = g * gain; dx = inv_std*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    let dxhat: Vec<f64> = (0..h).map(|j| g_row[j] * gv[j]).collect();
                    let m1 = dxhat.iter().sum::<f64>() / h as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(d, xh)| d * xh).sum::<f64>() / h as f64;
                    for j in 0..h {
                        dx[r * h + j] = inv_std * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                send(self, x, dx, adjoint);
                send(self, gain, dgain, adjoint);
                send(self, offset, doffset, adjoint);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0usize;
                for p in parts {
                    let len = self.value(p).numel();
                    send(self, p, g[offset..offset + len].to_vec(), adjoint);
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let rows = self.shape(Var(id))[0];
                let cols = self.shape(Var(id))[1];
                let mut col0 = 0usize;
                for p in parts {
                    let pc = self.shape(p)[1];
                    let mut pg = vec![0.0; rows * pc];
                    for r in 0..rows {
                        pg[r * pc..(r + 1) * pc]
                            .copy_from_slice(&g[r * cols + col0..r * cols + col0 + pc]);
                    }
                    send(self, p, pg, adjoint);
                    col0 += pc;
                }
            }
            Op::SliceRows { a, start } => {
                let cols = self.shape(a)[1];
                let mut out = vec![0.0; self.value(a).numel()];
                out[start * cols..start * cols + g.len()].copy_from_slice(g);
                send(self, a, out, adjoint);
            }
            Op::Transpose { a } => {
                let out_shape = self.shape(Var(id)).to_vec();
                send(self, a, transpose_raw(g, out_shape[0], out_shape[1]), adjoint);
            }
            Op::Reshape { a } => {
                send(self, a, g.to_vec(), adjoint);
            }
            Op::CrossEntropy { logits, label } => {
                let mut probs = self.value(logits).data().to_vec();
                softmax_row(&mut probs);
                probs[label] -= 1.0;
                probs.iter_mut().for_each(|p| *p *= g[0]);
                send(self, logits, probs, adjoint);
            }
        }
    }
}

/// (outer, axis extent, inner) factorization of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_row(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

// Tanh-form GELU, matching the BERT-family convention.
fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}
