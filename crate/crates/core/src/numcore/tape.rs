//! Reverse-mode autodiff over a flat op tape.
//!
//! Every operation appends one node (output values plus an op record naming
//! its inputs). [`Tape::backward`] walks the records in reverse and
//! accumulates gradients per node. Values are immutable after creation;
//! gradient accumulation happens only inside `backward`.

use super::tensor::{NumError, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum OpRecord<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    SoftmaxLastDim(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: T,
    },
    EmbeddingLookup {
        table: NodeId,
        ids: Vec<usize>,
    },
    CausalMaskFill(NodeId),
    Gelu(NodeId),
    CrossEntropyWithLogits {
        logits: NodeId,
        targets: Vec<(usize, usize)>,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Sum(NodeId),
}

pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    ops: Vec<OpRecord<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// Gradient of the most recent `backward` loss w.r.t. this node, if the
    /// node participated.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id.0].as_ref().map(|g| {
            Tensor::from_vec(self.value(id).shape().to_vec(), g.clone())
                .expect("gradient shape matches value shape")
        })
    }

    fn push(&mut self, value: Tensor<T>, op: OpRecord<T>, name: &'static str) -> Result<NodeId, NumError> {
        value.check_finite(name)?;
        let id = NodeId(self.values.len());
        self.values.push(value);
        self.ops.push(op);
        self.grads.push(None);
        Ok(id)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Result<NodeId, NumError> {
        self.push(value, OpRecord::Leaf, "leaf")
    }

    /// Row-major 2-D matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", av.shape(), bv.shape()),
            });
        }
        let out = matmul_values(av, bv);
        self.push(out, OpRecord::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(NumError::ShapeMismatch {
                op: "transpose",
                detail: format!("{:?}", xv.shape()),
            });
        }
        let (m, n) = xv.dims2();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xv.at2(i, j);
            }
        }
        let out = Tensor::from_vec(vec![n, m], data)?;
        self.push(out, OpRecord::Transpose(x), "transpose")
    }

    /// Elementwise sum. The right operand may broadcast: its shape must be a
    /// suffix of the left shape (e.g. adding a bias row to every row).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !is_suffix(bv.shape(), av.shape()) {
            return Err(NumError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} + {:?}", av.shape(), bv.shape()),
            });
        }
        let bn = bv.numel().max(1);
        let data: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv.data()[i % bn])
            .collect();
        let out = Tensor::from_vec(av.shape().to_vec(), data)?;
        self.push(out, OpRecord::Add(a, b), "add")
    }

    /// Hadamard product of same-shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NumError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} * {:?}", av.shape(), bv.shape()),
            });
        }
        let data: Vec<T> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(av.shape().to_vec(), data)?;
        self.push(out, OpRecord::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId, NumError> {
        let xv = self.value(x);
        let data: Vec<T> = xv.data().iter().map(|&v| v * factor).collect();
        let out = Tensor::from_vec(xv.shape().to_vec(), data)?;
        self.push(out, OpRecord::Scale(x, factor), "scale")
    }

    /// Softmax over the last dimension, numerically stabilized by the row
    /// max.
    pub fn softmax_last_dim(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        let xv = self.value(x);
        if xv.shape().is_empty() {
            return Err(NumError::ShapeMismatch {
                op: "softmax_last_dim",
                detail: "scalar input".into(),
            });
        }
        let out = softmax_values(xv);
        self.push(out, OpRecord::SoftmaxLastDim(x), "softmax_last_dim")
    }

    /// Mean-centered layer normalization over the last dimension with
    /// learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: T,
    ) -> Result<NodeId, NumError> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = *xv.shape().last().ok_or(NumError::ShapeMismatch {
            op: "layer_norm",
            detail: "scalar input".into(),
        })?;
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(NumError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    xv.shape(),
                    gv.shape(),
                    bv.shape()
                ),
            });
        }
        let out = layer_norm_values(xv, gv, bv, eps);
        self.push(out, OpRecord::LayerNorm { x, gain, bias, eps }, "layer_norm")
    }

    /// Gathers rows of a (V, d) table by token id, producing (len(ids), d).
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, NumError> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(NumError::ShapeMismatch {
                op: "embedding_lookup",
                detail: format!("table {:?}", tv.shape()),
            });
        }
        let (v, d) = tv.dims2();
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(NumError::IndexOutOfRange {
                op: "embedding_lookup",
                detail: format!("id {bad} >= vocab {v}"),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::from_vec(vec![ids.len(), d], data)?;
        self.push(
            out,
            OpRecord::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
            "embedding_lookup",
        )
    }

    /// Fills entries above the diagonal of a square score matrix with a
    /// large negative constant, so a following softmax zeroes them.
    pub fn causal_mask_fill(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || xv.shape()[0] != xv.shape()[1] {
            return Err(NumError::ShapeMismatch {
                op: "causal_mask_fill",
                detail: format!("{:?}", xv.shape()),
            });
        }
        let s = xv.shape()[0];
        let mut data = xv.data().to_vec();
        for i in 0..s {
            for j in (i + 1)..s {
                data[i * s + j] = T::mask_fill();
            }
        }
        let out = Tensor::from_vec(vec![s, s], data)?;
        self.push(out, OpRecord::CausalMaskFill(x), "causal_mask_fill")
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        let xv = self.value(x);
        let data: Vec<T> = xv.data().iter().map(|&v| gelu_scalar(v)).collect();
        let out = Tensor::from_vec(xv.shape().to_vec(), data)?;
        self.push(out, OpRecord::Gelu(x), "gelu")
    }

    /// Mean cross-entropy of the listed (position, token) targets against
    /// row softmaxes of a (S, V) logit matrix. Positions not listed
    /// contribute nothing — their logit gradients are exactly zero.
    pub fn cross_entropy_with_logits(
        &mut self,
        logits: NodeId,
        targets: &[(usize, usize)],
    ) -> Result<NodeId, NumError> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 {
            return Err(NumError::ShapeMismatch {
                op: "cross_entropy_with_logits",
                detail: format!("logits {:?}", lv.shape()),
            });
        }
        let (s, v) = lv.dims2();
        if targets.is_empty() {
            return Err(NumError::ShapeMismatch {
                op: "cross_entropy_with_logits",
                detail: "no targets".into(),
            });
        }
        if let Some(&(p, t)) = targets.iter().find(|&&(p, t)| p >= s || t >= v) {
            return Err(NumError::IndexOutOfRange {
                op: "cross_entropy_with_logits",
                detail: format!("target ({p}, {t}) outside ({s}, {v})"),
            });
        }
        let inv_n = T::one() / T::of_f64(targets.len() as f64);
        let mut loss = T::zero();
        for &(pos, tok) in targets {
            loss = loss + neg_log_softmax_at(lv.row(pos), tok) * inv_n;
        }
        let out = Tensor::scalar(loss);
        self.push(
            out,
            OpRecord::CrossEntropyWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            "cross_entropy_with_logits",
        )
    }

    /// Concatenates 2-D tensors along `axis` (0 = stack rows, 1 = widen
    /// rows).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, NumError> {
        if parts.is_empty() || axis > 1 {
            return Err(NumError::ShapeMismatch {
                op: "concat",
                detail: format!("{} parts, axis {axis}", parts.len()),
            });
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() != 2 {
            return Err(NumError::ShapeMismatch {
                op: "concat",
                detail: format!("rank {:?}", first),
            });
        }
        let fixed = 1 - axis;
        let mut total = 0;
        for &p in parts {
            let sh = self.value(p).shape();
            if sh.len() != 2 || sh[fixed] != first[fixed] {
                return Err(NumError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{:?} vs {:?} on axis {axis}", sh, first),
                });
            }
            total += sh[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = vec![T::zero(); shape[0] * shape[1]];
        if axis == 0 {
            let mut row0 = 0;
            for &p in parts {
                let pv = self.value(p);
                let rows = pv.shape()[0];
                data[row0 * shape[1]..(row0 + rows) * shape[1]].copy_from_slice(pv.data());
                row0 += rows;
            }
        } else {
            let mut col0 = 0;
            for &p in parts {
                let pv = self.value(p);
                let (rows, cols) = pv.dims2();
                for i in 0..rows {
                    data[i * shape[1] + col0..i * shape[1] + col0 + cols]
                        .copy_from_slice(pv.row(i));
                }
                col0 += cols;
            }
        }
        let out = Tensor::from_vec(shape, data)?;
        self.push(
            out,
            OpRecord::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// Contiguous slice of a 2-D tensor along `axis`.
    pub fn slice(
        &mut self,
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, NumError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || axis > 1 {
            return Err(NumError::ShapeMismatch {
                op: "slice",
                detail: format!("{:?}, axis {axis}", xv.shape()),
            });
        }
        if start + len > xv.shape()[axis] || len == 0 {
            return Err(NumError::IndexOutOfRange {
                op: "slice",
                detail: format!("{start}..{} of {:?}", start + len, xv.shape()),
            });
        }
        let (rows, cols) = xv.dims2();
        let (out_rows, out_cols) = if axis == 0 { (len, cols) } else { (rows, len) };
        let mut data = Vec::with_capacity(out_rows * out_cols);
        if axis == 0 {
            data.extend_from_slice(&xv.data()[start * cols..(start + len) * cols]);
        } else {
            for i in 0..rows {
                data.extend_from_slice(&xv.row(i)[start..start + len]);
            }
        }
        let out = Tensor::from_vec(vec![out_rows, out_cols], data)?;
        self.push(
            out,
            OpRecord::Slice {
                x,
                axis,
                start,
                len,
            },
            "slice",
        )
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        let total: T = self.value(x).data().iter().copied().sum();
        let out = Tensor::scalar(total);
        self.push(out, OpRecord::Sum(x), "sum")
    }

    /// Populates every participating node's gradient with d(loss)/d(node).
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumError> {
        if !self.value(loss).is_scalar() {
            return Err(NumError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let gout = match &self.grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            // Each arm reads input values and accumulates into input grads.
            match &self.ops[idx] {
                OpRecord::Leaf => {}
                OpRecord::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = &self.values[a.0];
                    let bv = &self.values[b.0];
                    let (m, k) = av.dims2();
                    let (_, n) = bv.dims2();
                    // dA = dC . B^T, with B^T materialized so the inner
                    // loops stay stride-1 (reduction loops do not vectorize)
                    let mut bt = vec![T::zero(); n * k];
                    for kk in 0..k {
                        for j in 0..n {
                            bt[j * k + kk] = bv.data()[kk * n + j];
                        }
                    }
                    let mut da = vec![T::zero(); m * k];
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        let darow = &mut da[i * k..(i + 1) * k];
                        for (j, &g) in grow.iter().enumerate() {
                            let btrow = &bt[j * k..(j + 1) * k];
                            for (d, &bval) in darow.iter_mut().zip(btrow) {
                                *d = *d + g * bval;
                            }
                        }
                    }
                    // dB = A^T . dC
                    let mut db = vec![T::zero(); k * n];
                    for i in 0..m {
                        let arow = av.row(i);
                        let grow = &gout[i * n..(i + 1) * n];
                        for (kk, &aval) in arow.iter().enumerate() {
                            let dbrow = &mut db[kk * n..(kk + 1) * n];
                            for (d, &g) in dbrow.iter_mut().zip(grow) {
                                *d = *d + aval * g;
                            }
                        }
                    }
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                OpRecord::Transpose(x) => {
                    let x = *x;
                    let (m, n) = self.values[x.0].dims2();
                    let mut dx = vec![T::zero(); m * n];
                    for i in 0..n {
                        for j in 0..m {
                            dx[j * n + i] = gout[i * m + j];
                        }
                    }
                    self.accumulate(x, dx);
                }
                OpRecord::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    let bn = self.values[b.0].numel().max(1);
                    let mut db = vec![T::zero(); bn];
                    for (i, &g) in gout.iter().enumerate() {
                        db[i % bn] = db[i % bn] + g;
                    }
                    self.accumulate(b, db);
                    self.accumulate(a, gout);
                }
                OpRecord::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da: Vec<T> = gout
                        .iter()
                        .zip(self.values[b.0].data())
                        .map(|(&g, &bv)| g * bv)
                        .collect();
                    let db: Vec<T> = gout
                        .iter()
                        .zip(self.values[a.0].data())
                        .map(|(&g, &av)| g * av)
                        .collect();
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                OpRecord::Scale(x, factor) => {
                    let (x, factor) = (*x, *factor);
                    let dx: Vec<T> = gout.iter().map(|&g| g * factor).collect();
                    self.accumulate(x, dx);
                }
                OpRecord::SoftmaxLastDim(x) => {
                    let x = *x;
                    let yv = &self.values[idx];
                    let d = *yv.shape().last().expect("non-scalar");
                    let mut dx = vec![T::zero(); yv.numel()];
                    for r in 0..(yv.numel() / d) {
                        let y = &yv.data()[r * d..(r + 1) * d];
                        let g = &gout[r * d..(r + 1) * d];
                        let mut dot = T::zero();
                        for (yi, gi) in y.iter().zip(g) {
                            dot = dot + *yi * *gi;
                        }
                        for i in 0..d {
                            dx[r * d + i] = y[i] * (g[i] - dot);
                        }
                    }
                    self.accumulate(x, dx);
                }
                OpRecord::LayerNorm { x, gain, bias, eps } => {
                    let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                    let xv = &self.values[x.0];
                    let gv = &self.values[gain.0];
                    let d = *xv.shape().last().expect("non-scalar");
                    let rows = xv.numel() / d;
                    let inv_d = T::one() / T::of_f64(d as f64);
                    let mut dx = vec![T::zero(); xv.numel()];
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        let xr = &xv.data()[r * d..(r + 1) * d];
                        let gr = &gout[r * d..(r + 1) * d];
                        let mean = xr.iter().copied().sum::<T>() * inv_d;
                        let var = xr
                            .iter()
                            .map(|&v| (v - mean) * (v - mean))
                            .sum::<T>()
                            * inv_d;
                        let inv_sigma = T::one() / (var + eps).sqrt();
                        let xhat: Vec<T> =
                            xr.iter().map(|&v| (v - mean) * inv_sigma).collect();
                        let dxhat: Vec<T> = gr
                            .iter()
                            .zip(gv.data())
                            .map(|(&g, &gn)| g * gn)
                            .collect();
                        let mean_dxhat = dxhat.iter().copied().sum::<T>() * inv_d;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(&a, &b)| a * b)
                            .sum::<T>()
                            * inv_d;
                        for i in 0..d {
                            dx[r * d + i] =
                                inv_sigma * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                            dg[i] = dg[i] + gr[i] * xhat[i];
                            db[i] = db[i] + gr[i];
                        }
                    }
                    self.accumulate(x, dx);
                    self.accumulate(gain, dg);
                    self.accumulate(bias, db);
                }
                OpRecord::EmbeddingLookup { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    let (v, d) = self.values[table.0].dims2();
                    let mut dt = vec![T::zero(); v * d];
                    for (row, &id) in ids.iter().enumerate() {
                        for i in 0..d {
                            dt[id * d + i] = dt[id * d + i] + gout[row * d + i];
                        }
                    }
                    self.accumulate(table, dt);
                }
                OpRecord::CausalMaskFill(x) => {
                    let x = *x;
                    let s = self.values[x.0].shape()[0];
                    let mut dx = vec![T::zero(); s * s];
                    for i in 0..s {
                        for j in 0..=i {
                            dx[i * s + j] = gout[i * s + j];
                        }
                    }
                    self.accumulate(x, dx);
                }
                OpRecord::Gelu(x) => {
                    let x = *x;
                    let dx: Vec<T> = self.values[x.0]
                        .data()
                        .iter()
                        .zip(&gout)
                        .map(|(&v, &g)| g * gelu_grad_scalar(v))
                        .collect();
                    self.accumulate(x, dx);
                }
                OpRecord::CrossEntropyWithLogits { logits, targets } => {
                    let logits = *logits;
                    let targets = targets.clone();
                    let lv = &self.values[logits.0];
                    let (_, v) = lv.dims2();
                    let g = gout[0] / T::of_f64(targets.len() as f64);
                    let mut dl = vec![T::zero(); lv.numel()];
                    for &(pos, tok) in &targets {
                        let probs = softmax_row(lv.row(pos));
                        for i in 0..v {
                            let delta = if i == tok { T::one() } else { T::zero() };
                            dl[pos * v + i] = dl[pos * v + i] + (probs[i] - delta) * g;
                        }
                    }
                    self.accumulate(logits, dl);
                }
                OpRecord::Concat { parts, axis } => {
                    let parts = parts.clone();
                    let axis = *axis;
                    let out_cols = self.values[idx].shape()[1];
                    let mut offset = 0;
                    for p in parts {
                        let (rows, cols) = self.values[p.0].dims2();
                        let mut dp = vec![T::zero(); rows * cols];
                        if axis == 0 {
                            dp.copy_from_slice(
                                &gout[offset * cols..(offset + rows) * cols],
                            );
                            offset += rows;
                        } else {
                            for i in 0..rows {
                                dp[i * cols..(i + 1) * cols].copy_from_slice(
                                    &gout[i * out_cols + offset..i * out_cols + offset + cols],
                                );
                            }
                            offset += cols;
                        }
                        self.accumulate(p, dp);
                    }
                }
                OpRecord::Slice {
                    x,
                    axis,
                    start,
                    len,
                } => {
                    let (x, axis, start, len) = (*x, *axis, *start, *len);
                    let (rows, cols) = self.values[x.0].dims2();
                    let mut dx = vec![T::zero(); rows * cols];
                    if axis == 0 {
                        dx[start * cols..(start + len) * cols].copy_from_slice(&gout);
                    } else {
                        for i in 0..rows {
                            dx[i * cols + start..i * cols + start + len]
                                .copy_from_slice(&gout[i * len..(i + 1) * len]);
                        }
                    }
                    self.accumulate(x, dx);
                }
                OpRecord::Sum(x) => {
                    let x = *x;
                    let dx = vec![gout[0]; self.values[x.0].numel()];
                    self.accumulate(x, dx);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Vec<T>) {
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(&delta) {
                    *gi = *gi + d;
                }
            }
            None => *slot = Some(delta),
        }
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn matmul_values<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, _) = a.dims2();
    let (_, n) = b.dims2();
    let mut data = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut data[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = b.row(kk);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
    Tensor::from_vec(vec![m, n], data).expect("matmul shape")
}

pub(crate) fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn softmax_values<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = *x.shape().last().expect("non-scalar");
    let mut data = Vec::with_capacity(x.numel());
    for r in 0..(x.numel() / d) {
        data.extend(softmax_row(&x.data()[r * d..(r + 1) * d]));
    }
    Tensor::from_vec(x.shape().to_vec(), data).expect("softmax shape")
}

fn layer_norm_values<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Tensor<T> {
    let d = *x.shape().last().expect("non-scalar");
    let inv_d = T::one() / T::of_f64(d as f64);
    let mut data = Vec::with_capacity(x.numel());
    for r in 0..(x.numel() / d) {
        let xr = &x.data()[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let inv_sigma = T::one() / (var + eps).sqrt();
        for i in 0..d {
            data.push((xr[i] - mean) * inv_sigma * gain.data()[i] + bias.data()[i]);
        }
    }
    Tensor::from_vec(x.shape().to_vec(), data).expect("layer_norm shape")
}

fn neg_log_softmax_at<T: Scalar>(row: &[T], tok: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse: T = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    lse - row[tok]
}

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::of_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::of_f64(0.044_715);
    let half = T::of_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::of_f64(0.797_884_560_802_865_4);
    let a = T::of_f64(0.044_715);
    let half = T::of_f64(0.5);
    let three = T::of_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}
