//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and enough saved state to
//! run its adjoint. Nodes are only ever appended, so the node order is a
//! topological order and the backward sweep is a single reverse scan.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `sqrt(2 / pi)`, the tanh-approximation constant used by [`Tape::gelu`].
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh GELU approximation.
pub const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MeanPool {
        x: Var,
        group: usize,
    },
    Slice {
        x: Var,
        row0: usize,
        col0: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: Axis,
    },
    Combine {
        coeffs: Var,
        row: usize,
        parts: Vec<Var>,
    },
    KronIdentity {
        b: Var,
        m: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to the leaves marked as trainable.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn contains(&self, var: Var) -> bool {
        self.grads.contains_key(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: receives a gradient from [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Frozen leaf: participates in the computation but never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Bias add: `x[r, :] + b` for every row of the matrix `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("add_row")?;
        let bias = self.value(b);
        if bias.shape() != [cols] {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for matrix [{rows}, {cols}]", bias.shape()),
            ));
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(bias.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// Multiply `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self
            .value(s)
            .item()
            .ok_or_else(|| Error::shape("scale_by", format!("scale {:?} is not a scalar", self.value(s).shape())))?;
        let value = self.value(x).scale(c);
        Ok(self.push(value, Op::ScaleBy(x, s), &[x, s]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.value(x).dims2("softmax")?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Per-row normalization to zero mean and unit variance, then `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::invalid(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (rows, cols) = self.value(x).dims2("layer_norm")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [cols] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} {:?} for last extent {cols}", self.value(v).shape()),
                ));
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = g[c] * h + b[c];
            }
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        let xhat = Tensor::new(vec![rows, cols], xhat)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Gather rows of `table` (shape `[n, d]`) by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.value(table).dims2("embedding")?;
        if ids.is_empty() {
            return Err(Error::invalid("embedding lookup with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("embedding id {bad} out of range for {n} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean over consecutive groups of `group` rows: `[b * group, d] -> [b, d]`.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("mean_pool")?;
        if group == 0 || rows % group != 0 {
            return Err(Error::shape(
                "mean_pool",
                format!("{rows} rows not divisible into groups of {group}"),
            ));
        }
        let b = rows / group;
        let src = self.value(x).data();
        let mut out = vec![0.0; b * cols];
        for r in 0..rows {
            let dst = &mut out[(r / group) * cols..(r / group + 1) * cols];
            for (o, &v) in dst.iter_mut().zip(&src[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(vec![b, cols], out)?;
        Ok(self.push(value, Op::MeanPool { x, group }, &[x]))
    }

    /// Rectangular block `[row0..row0+rows, col0..col0+cols]` of a matrix.
    pub fn slice(&mut self, x: Var, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("slice")?;
        if rows == 0 || cols == 0 || row0 + rows > r || col0 + cols > c {
            return Err(Error::shape(
                "slice",
                format!("block [{row0}+{rows}, {col0}+{cols}] outside [{r}, {c}]"),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            out.extend_from_slice(&src[i * c + col0..i * c + col0 + cols]);
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::Slice { x, row0, col0 }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (r0, c0) = self.value(*first).dims2("concat")?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat")?;
            let ok = match axis {
                Axis::Rows => c == c0,
                Axis::Cols => r == r0,
            };
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("[{r}, {c}] vs [{r0}, {c0}] along {axis:?}"),
                ));
            }
            dims.push((r, c));
        }
        let value = match axis {
            Axis::Rows => {
                let rows = dims.iter().map(|d| d.0).sum();
                let data = parts
                    .iter()
                    .flat_map(|&p| self.value(p).data().iter().copied())
                    .collect();
                Tensor::new(vec![rows, c0], data)?
            }
            Axis::Cols => {
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for (&p, &(_, c)) in parts.iter().zip(&dims) {
                        data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
                    }
                }
                Tensor::new(vec![r0, cols], data)?
            }
        };
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// `sum_k coeffs[row, k] * parts[k]` where `coeffs` is a matrix with one column per part.
    pub fn combine(&mut self, coeffs: Var, row: usize, parts: &[Var]) -> Result<Var> {
        let (r, c) = self.value(coeffs).dims2("combine")?;
        if row >= r || c != parts.len() || parts.is_empty() {
            return Err(Error::shape(
                "combine",
                format!("row {row} of [{r}, {c}] against {} parts", parts.len()),
            ));
        }
        let shape = self.value(parts[0]).shape().to_vec();
        let mut acc = Tensor::zeros(&shape);
        for (k, &p) in parts.iter().enumerate() {
            let w = self.value(coeffs).get2(row, k);
            acc.axpy(w, self.value(p)).map_err(|_| {
                Error::shape(
                    "combine",
                    format!("part {k} has shape {:?}, expected {shape:?}", self.value(p).shape()),
                )
            })?;
        }
        let mut inputs = parts.to_vec();
        inputs.push(coeffs);
        Ok(self.push(
            acc,
            Op::Combine {
                coeffs,
                row,
                parts: parts.to_vec(),
            },
            &inputs,
        ))
    }

    /// `B ⊗ I_m`: entry `[i*m + a, j*m + a] = B[i, j]`.
    pub fn kron_identity(&mut self, b: Var, m: usize) -> Result<Var> {
        let (r, c) = self.value(b).dims2("kron_identity")?;
        if m == 0 {
            return Err(Error::invalid("kron_identity with m = 0"));
        }
        let mut out = Tensor::zeros(&[r * m, c * m]);
        let cols = c * m;
        let src = self.value(b).data();
        let data = out.data_mut();
        for i in 0..r {
            for j in 0..c {
                for a in 0..m {
                    data[(i * m + a) * cols + j * m + a] = src[i * c + j];
                }
            }
        }
        Ok(self.push(out, Op::KronIdentity { b, m }, &[b]))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, classes) = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.is_empty() {
            return Err(Error::invalid("cross-entropy over an empty batch"));
        }
        if labels.len() != rows {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {rows} logit rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = self.value(logits).clone();
        let mut loss = 0.0;
        for (row, &y) in probs.data_mut().chunks_mut(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / rows as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar node. Only trainable leaves appear in the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::ones(lv.shape()));
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            if let Op::Leaf = node.op {
                out.grads.insert(Var(idx), g);
                continue;
            }
            self.propagate(node, &g, &mut adj)?;
        }
        Ok(out)
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut adj[v.0] {
            Some(acc) => acc.axpy(1.0, &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone())?;
                self.accumulate(adj, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                let ga = g.mul(self.value(*b))?;
                let gb = g.mul(self.value(*a))?;
                self.accumulate(adj, *a, ga)?;
                self.accumulate(adj, *b, gb)?;
            }
            Op::AddRow(x, b) => {
                self.accumulate(adj, *x, g.clone())?;
                if self.requires_grad(*b) {
                    let (_, cols) = g.dims2("add_row")?;
                    let mut gb = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(adj, *b, Tensor::vector(gb)?)?;
                }
            }
            Op::Scale(x, c) => self.accumulate(adj, *x, g.scale(*c))?,
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).data()[0];
                if self.requires_grad(*x) {
                    self.accumulate(adj, *x, g.scale(c))?;
                }
                if self.requires_grad(*s) {
                    let shape = self.value(*s).shape().to_vec();
                    let gs = Tensor::new(shape, vec![g.dot(self.value(*x))])?;
                    self.accumulate(adj, *s, gs)?;
                }
            }
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = g.matmul(&self.value(*b).transpose()?)?;
                    self.accumulate(adj, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let gb = self.value(*a).transpose()?.matmul(g)?;
                    self.accumulate(adj, *b, gb)?;
                }
            }
            Op::Transpose(x) => self.accumulate(adj, *x, g.transpose()?)?,
            Op::Reshape(x) => {
                let gx = g.reshaped(self.value(*x).shape())?;
                self.accumulate(adj, *x, gx)?;
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.value(*x).shape(), g.data()[0]);
                self.accumulate(adj, *x, gx)?;
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (o, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                    *o *= gelu_grad(v);
                }
                self.accumulate(adj, *x, gx)?;
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (_, cols) = y.dims2("softmax")?;
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (o, &yv) in gr.iter_mut().zip(yr) {
                        *o = yv * (*o - dot);
                    }
                }
                self.accumulate(adj, *x, gx)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.dims2("layer_norm")?;
                let gam = self.value(*gamma).data();
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; rows * cols];
                    let n = cols as f64;
                    for r in 0..rows {
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let hr = &xhat.data()[r * cols..(r + 1) * cols];
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[r * cols + c] = inv_std[r] / n * (n * dh[c] - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                    self.accumulate(adj, *x, Tensor::new(vec![rows, cols], gx)?)?;
                }
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut gg = vec![0.0; cols];
                    let mut gb = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let gv = g.data()[r * cols + c];
                            gg[c] += gv * xhat.data()[r * cols + c];
                            gb[c] += gv;
                        }
                    }
                    self.accumulate(adj, *gamma, Tensor::vector(gg)?)?;
                    self.accumulate(adj, *beta, Tensor::vector(gb)?)?;
                }
            }
            Op::Embedding { table, ids } => {
                let shape = self.value(*table).shape().to_vec();
                let d = shape[1];
                let mut gt = Tensor::zeros(&shape);
                let data = gt.data_mut();
                for (r, &i) in ids.iter().enumerate() {
                    for c in 0..d {
                        data[i * d + c] += g.data()[r * d + c];
                    }
                }
                self.accumulate(adj, *table, gt)?;
            }
            Op::MeanPool { x, group } => {
                let shape = self.value(*x).shape().to_vec();
                let cols = shape[1];
                let inv = 1.0 / *group as f64;
                let mut gx = Tensor::zeros(&shape);
                for (r, row) in gx.data_mut().chunks_mut(cols).enumerate() {
                    let src = &g.data()[(r / group) * cols..(r / group + 1) * cols];
                    for (o, &v) in row.iter_mut().zip(src) {
                        *o = v * inv;
                    }
                }
                self.accumulate(adj, *x, gx)?;
            }
            Op::Slice { x, row0, col0 } => {
                let shape = self.value(*x).shape().to_vec();
                let (rows, cols) = g.dims2("slice")?;
                let mut gx = Tensor::zeros(&shape);
                let c = shape[1];
                let data = gx.data_mut();
                for i in 0..rows {
                    let dst = &mut data[(row0 + i) * c + col0..(row0 + i) * c + col0 + cols];
                    dst.copy_from_slice(&g.data()[i * cols..(i + 1) * cols]);
                }
                self.accumulate(adj, *x, gx)?;
            }
            Op::Concat { parts, axis } => {
                let (_, total_cols) = g.dims2("concat")?;
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.value(p).dims2("concat")?;
                    if self.requires_grad(p) {
                        let gp = match axis {
                            Axis::Rows => Tensor::new(vec![r, c], g.data()[offset * c..(offset + r) * c].to_vec())?,
                            Axis::Cols => {
                                let mut data = Vec::with_capacity(r * c);
                                for i in 0..r {
                                    data.extend_from_slice(
                                        &g.data()[i * total_cols + offset..i * total_cols + offset + c],
                                    );
                                }
                                Tensor::new(vec![r, c], data)?
                            }
                        };
                        self.accumulate(adj, p, gp)?;
                    }
                    offset += match axis {
                        Axis::Rows => r,
                        Axis::Cols => c,
                    };
                }
            }
            Op::Combine { coeffs, row, parts } => {
                let w = self.value(*coeffs);
                for (k, &p) in parts.iter().enumerate() {
                    if self.requires_grad(p) {
                        self.accumulate(adj, p, g.scale(w.get2(*row, k)))?;
                    }
                }
                if self.requires_grad(*coeffs) {
                    let (r, c) = w.dims2("combine")?;
                    let mut gw = Tensor::zeros(&[r, c]);
                    for (k, &p) in parts.iter().enumerate() {
                        gw.data_mut()[row * c + k] = g.dot(self.value(p));
                    }
                    self.accumulate(adj, *coeffs, gw)?;
                }
            }
            Op::KronIdentity { b, m } => {
                let (r, c) = self.value(*b).dims2("kron_identity")?;
                let cols = c * m;
                let mut gb = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..c {
                        let mut s = 0.0;
                        for a in 0..*m {
                            s += g.data()[(i * m + a) * cols + j * m + a];
                        }
                        gb.data_mut()[i * c + j] = s;
                    }
                }
                self.accumulate(adj, *b, gb)?;
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (rows, classes) = probs.dims2("softmax_cross_entropy")?;
                let scale = g.data()[0] / rows as f64;
                let mut gl = probs.clone();
                for (row, &y) in gl.data_mut().chunks_mut(classes).zip(labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(adj, *logits, gl)?;
            }
        }
        Ok(())
    }
}

pub fn gelu(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
