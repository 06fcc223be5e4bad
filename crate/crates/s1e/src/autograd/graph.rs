//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive whose inputs are tracked (gradient
//! leaves or values derived from them) and replays the record in reverse to
//! accumulate exact analytic gradients. Graphs are rebuilt every training
//! step; [`Graph::backward`] consumes the record and refuses to run twice.
//!
//! There is deliberately no broadcasting: elementwise ops demand exact shape
//! equality and every coercion (bias rows, upsampling, shuffling) is an
//! explicit gather with a visible index table, which keeps the index oracles
//! in the test suite exact.

use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{Result, Tensor, TensorError, TensorId};

/// Large negative additive bias standing in for -inf on forbidden attention
/// pairs. exp(x) underflows to exactly 0.0 for x below about -746, so masked
/// keys receive an attention weight of exactly zero while every stored value
/// stays finite.
pub const MASK_NEG: f64 = -1e9;

const LN_EPS_DEFAULT: f64 = 1e-5;

enum Op {
    MatMul { a: Tensor, b: Tensor },
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Scale { x: Tensor, c: f64 },
    Reshape { x: Tensor },
    Permute { x: Tensor, axes: Vec<usize> },
    Gather { x: Tensor, indices: Arc<Vec<usize>> },
    SoftmaxLastDim { x: Tensor, y: Tensor },
    LayerNorm { x: Tensor, gamma: Tensor, beta: Tensor, eps: f64 },
    Gelu { x: Tensor },
    Sigmoid { x: Tensor, y: Tensor },
    MeanAxis { x: Tensor, axis: usize },
    SumAxis { x: Tensor, axis: usize },
    EmbeddingLookup { table: Tensor, ids: Arc<Vec<usize>> },
    ConcatLastDim { parts: Vec<Tensor> },
    SplitLastDim { x: Tensor, offset: usize, len: usize },
    // Fused loss kernels: numerically stable forms with hand-derived
    // adjoints, each checked against finite differences in the test suite.
    BceWithLogits { logits: Tensor, target: Arc<Vec<f64>> },
    DiceWithLogits { logits: Tensor, target: Arc<Vec<f64>>, eps: f64 },
    NextTokenCrossEntropy { logits: Tensor, rows: Arc<Vec<usize>>, targets: Arc<Vec<usize>> },
}

struct Node {
    op: Op,
    out_id: TensorId,
    out_shape: Vec<usize>,
}

/// Gradients keyed by tensor identity, as produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct GradMap {
    grads: HashMap<TensorId, Vec<f64>>,
}

impl GradMap {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(|g| g.as_slice())
    }

    pub fn get_by_id(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(&id).map(|g| g.as_slice())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn accumulate(&mut self, id: TensorId, numel: usize) -> &mut Vec<f64> {
        self.grads.entry(id).or_insert_with(|| vec![0.0; numel])
    }
}

/// Ordered record of executed primitives.
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            recording: true,
            consumed: false,
        }
    }

    /// A graph that never records; use for frozen-model evaluation.
    pub fn inference() -> Graph {
        Graph {
            nodes: Vec::new(),
            recording: false,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn emit(&mut self, op: Op, tracked: bool, out: Tensor) -> Tensor {
        if self.recording && tracked {
            self.nodes.push(Node {
                op,
                out_id: out.id(),
                out_shape: out.shape().to_vec(),
            });
        }
        out
    }

    // ---- primitive forwards -------------------------------------------------

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = as_2d("matmul", a)?;
        let (k2, n) = as_2d("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", &format!("[{m},{k}]x[{k},n]"), b.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(a.data(), b.data(), m, k, n, &mut out);
        let tracked = a.tracked() || b.tracked();
        let t = Tensor::from_op("matmul", vec![m, n], out, tracked)?;
        Ok(self.emit(Op::MatMul { a: a.clone(), b: b.clone() }, tracked, t))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let tracked = a.tracked() || b.tracked();
        let t = Tensor::from_op("add", a.shape().to_vec(), data, tracked)?;
        Ok(self.emit(Op::Add { a: a.clone(), b: b.clone() }, tracked, t))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("sub", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let tracked = a.tracked() || b.tracked();
        let t = Tensor::from_op("sub", a.shape().to_vec(), data, tracked)?;
        Ok(self.emit(Op::Sub { a: a.clone(), b: b.clone() }, tracked, t))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        let data = x.data().iter().map(|v| v * c).collect();
        let tracked = x.tracked();
        let t = Tensor::from_op("scale", x.shape().to_vec(), data, tracked)?;
        Ok(self.emit(Op::Scale { x: x.clone(), c }, tracked, t))
    }

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let tracked = x.tracked();
        let t = x.aliased("reshape", shape.to_vec(), tracked)?;
        Ok(self.emit(Op::Reshape { x: x.clone() }, tracked, t))
    }

    /// Reorder axes; `axes` is a permutation of `0..rank`.
    pub fn permute(&mut self, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
        let rank = x.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", &format!("permutation of 0..{rank}"), x.shape()));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
        let data = permute_raw(x.data(), x.shape(), axes);
        let tracked = x.tracked();
        let t = Tensor::from_op("permute", out_shape, data, tracked)?;
        Ok(self.emit(Op::Permute { x: x.clone(), axes: axes.to_vec() }, tracked, t))
    }

    /// Select rows along axis 0. Indices may repeat; the adjoint scatter-adds.
    pub fn gather(&mut self, x: &Tensor, indices: Arc<Vec<usize>>) -> Result<Tensor> {
        let rows = x.shape().first().copied().unwrap_or(0);
        let row_len = if rows == 0 { 0 } else { x.numel() / rows };
        for &i in indices.iter() {
            if i >= rows {
                return Err(TensorError::BadIndex { op: "gather", index: i, size: rows });
            }
        }
        let mut data = Vec::with_capacity(indices.len() * row_len);
        for &i in indices.iter() {
            data.extend_from_slice(&x.data()[i * row_len..(i + 1) * row_len]);
        }
        let mut out_shape = x.shape().to_vec();
        out_shape[0] = indices.len();
        let tracked = x.tracked();
        let t = Tensor::from_op("gather", out_shape, data, tracked)?;
        Ok(self.emit(Op::Gather { x: x.clone(), indices }, tracked, t))
    }

    pub fn softmax_lastdim(&mut self, x: &Tensor) -> Result<Tensor> {
        let (rows, n) = rows_lastdim("softmax_lastdim", x)?;
        let mut data = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let out = &mut data[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let tracked = x.tracked();
        let t = Tensor::from_op("softmax_lastdim", x.shape().to_vec(), data, tracked)?;
        Ok(self.emit(Op::SoftmaxLastDim { x: x.clone(), y: t.clone() }, tracked, t))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layernorm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        self.layernorm_eps(x, gamma, beta, LN_EPS_DEFAULT)
    }

    pub fn layernorm_eps(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (rows, n) = rows_lastdim("layernorm", x)?;
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(shape_err("layernorm", &format!("[{n}] scale/shift"), gamma.shape()));
        }
        let mut data = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let out = &mut data[r * n..(r + 1) * n];
            let (mu, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[j] = (row[j] - mu) * inv * gamma.data()[j] + beta.data()[j];
            }
        }
        let tracked = x.tracked() || gamma.tracked() || beta.tracked();
        let t = Tensor::from_op("layernorm", x.shape().to_vec(), data, tracked)?;
        let op = Op::LayerNorm { x: x.clone(), gamma: gamma.clone(), beta: beta.clone(), eps };
        Ok(self.emit(op, tracked, t))
    }

    /// GELU in its tanh form.
    pub fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| gelu_fwd(v)).collect();
        let tracked = x.tracked();
        let t = Tensor::from_op("gelu", x.shape().to_vec(), data, tracked)?;
        Ok(self.emit(Op::Gelu { x: x.clone() }, tracked, t))
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| sigmoid_fwd(v)).collect();
        let tracked = x.tracked();
        let t = Tensor::from_op("sigmoid", x.shape().to_vec(), data, tracked)?;
        Ok(self.emit(Op::Sigmoid { x: x.clone(), y: t.clone() }, tracked, t))
    }

    pub fn mean_axis(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let (shape, data) = reduce_axis("mean_axis", x, axis, true)?;
        let tracked = x.tracked();
        let t = Tensor::from_op("mean_axis", shape, data, tracked)?;
        Ok(self.emit(Op::MeanAxis { x: x.clone(), axis }, tracked, t))
    }

    pub fn sum_axis(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let (shape, data) = reduce_axis("sum_axis", x, axis, false)?;
        let tracked = x.tracked();
        let t = Tensor::from_op("sum_axis", shape, data, tracked)?;
        Ok(self.emit(Op::SumAxis { x: x.clone(), axis }, tracked, t))
    }

    /// Rows of an embedding table: `[vocab, d]` indexed by ids -> `[len, d]`.
    pub fn embedding_lookup(&mut self, table: &Tensor, ids: Arc<Vec<usize>>) -> Result<Tensor> {
        let (vocab, d) = as_2d("embedding_lookup", table)?;
        for &i in ids.iter() {
            if i >= vocab {
                return Err(TensorError::BadIndex { op: "embedding_lookup", index: i, size: vocab });
            }
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids.iter() {
            data.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let tracked = table.tracked();
        let t = Tensor::from_op("embedding_lookup", vec![ids.len(), d], data, tracked)?;
        Ok(self.emit(Op::EmbeddingLookup { table: table.clone(), ids }, tracked, t))
    }

    /// Concatenate along the last axis; all leading axes must match.
    pub fn concat_lastdim(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(shape_err("concat_lastdim", "at least one input", &[]));
        }
        let lead = &parts[0].shape()[..parts[0].shape().len() - 1];
        let rows: usize = lead.iter().product();
        let mut total_last = 0;
        for p in parts {
            if &p.shape()[..p.shape().len() - 1] != lead {
                return Err(shape_err("concat_lastdim", &format!("leading dims {lead:?}"), p.shape()));
            }
            total_last += *p.shape().last().unwrap();
        }
        let mut data = Vec::with_capacity(rows * total_last);
        for r in 0..rows {
            for p in parts {
                let n = *p.shape().last().unwrap();
                data.extend_from_slice(&p.data()[r * n..(r + 1) * n]);
            }
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(total_last);
        let tracked = parts.iter().any(|p| p.tracked());
        let t = Tensor::from_op("concat_lastdim", out_shape, data, tracked)?;
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        Ok(self.emit(Op::ConcatLastDim { parts: owned }, tracked, t))
    }

    /// Contiguous slice `[offset, offset+len)` of the last axis.
    pub fn split_lastdim(&mut self, x: &Tensor, offset: usize, len: usize) -> Result<Tensor> {
        let (rows, n) = rows_lastdim("split_lastdim", x)?;
        if offset + len > n {
            return Err(shape_err("split_lastdim", &format!("offset {offset} + len {len} <= {n}"), x.shape()));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * n + offset..r * n + offset + len]);
        }
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = len;
        let tracked = x.tracked();
        let t = Tensor::from_op("split_lastdim", out_shape, data, tracked)?;
        Ok(self.emit(Op::SplitLastDim { x: x.clone(), offset, len }, tracked, t))
    }

    // ---- fused loss kernels -------------------------------------------------

    /// Mean binary cross-entropy from logits, in the stable form
    /// `max(l,0) - l*g + ln(1 + exp(-|l|))`.
    pub fn bce_with_logits(&mut self, logits: &Tensor, target: Arc<Vec<f64>>) -> Result<Tensor> {
        if target.len() != logits.numel() {
            return Err(shape_err("bce_with_logits", &format!("{} targets", logits.numel()), &[target.len()]));
        }
        let n = logits.numel() as f64;
        let mut acc = 0.0;
        for (&l, &g) in logits.data().iter().zip(target.iter()) {
            acc += l.max(0.0) - l * g + (-l.abs()).exp().ln_1p();
        }
        let tracked = logits.tracked();
        let t = Tensor::from_op("bce_with_logits", vec![1], vec![acc / n], tracked)?;
        Ok(self.emit(Op::BceWithLogits { logits: logits.clone(), target }, tracked, t))
    }

    /// Soft DICE loss from logits: `1 - (2*sum(p*g)+eps) / (sum(p)+sum(g)+eps)`
    /// with `p = sigmoid(logits)`.
    pub fn dice_with_logits(&mut self, logits: &Tensor, target: Arc<Vec<f64>>, eps: f64) -> Result<Tensor> {
        if target.len() != logits.numel() {
            return Err(shape_err("dice_with_logits", &format!("{} targets", logits.numel()), &[target.len()]));
        }
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut gsum = 0.0;
        for (&l, &g) in logits.data().iter().zip(target.iter()) {
            let p = sigmoid_fwd(l);
            inter += p * g;
            psum += p;
            gsum += g;
        }
        let loss = 1.0 - (2.0 * inter + eps) / (psum + gsum + eps);
        let tracked = logits.tracked();
        let t = Tensor::from_op("dice_with_logits", vec![1], vec![loss], tracked)?;
        Ok(self.emit(Op::DiceWithLogits { logits: logits.clone(), target, eps }, tracked, t))
    }

    /// Mean cross-entropy of `logits[rows[i]]` against `targets[i]`, the
    /// next-token objective restricted to supervised positions. Empty rows
    /// produce a constant zero.
    pub fn next_token_cross_entropy(
        &mut self,
        logits: &Tensor,
        rows: Arc<Vec<usize>>,
        targets: Arc<Vec<usize>>,
    ) -> Result<Tensor> {
        let (n_rows, vocab) = as_2d("next_token_cross_entropy", logits)?;
        if rows.len() != targets.len() {
            return Err(shape_err("next_token_cross_entropy", "rows.len() == targets.len()", &[rows.len(), targets.len()]));
        }
        if rows.is_empty() {
            return Tensor::scalar(0.0);
        }
        for (&r, &t) in rows.iter().zip(targets.iter()) {
            if r >= n_rows {
                return Err(TensorError::BadIndex { op: "next_token_cross_entropy", index: r, size: n_rows });
            }
            if t >= vocab {
                return Err(TensorError::BadIndex { op: "next_token_cross_entropy", index: t, size: vocab });
            }
        }
        let mut acc = 0.0;
        for (&r, &tgt) in rows.iter().zip(targets.iter()) {
            let row = &logits.data()[r * vocab..(r + 1) * vocab];
            acc += log_sum_exp(row) - row[tgt];
        }
        let loss = acc / rows.len() as f64;
        let tracked = logits.tracked();
        let t = Tensor::from_op("next_token_cross_entropy", vec![1], vec![loss], tracked)?;
        Ok(self.emit(Op::NextTokenCrossEntropy { logits: logits.clone(), rows, targets }, tracked, t))
    }

    // ---- composites ----------------------------------------------------------

    /// `x W + b` with the bias row repeated explicitly (no broadcasting).
    pub fn affine(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let y = self.matmul(x, w)?;
        let rows = y.shape()[0];
        let brow = self.reshape(b, &[1, b.numel()])?;
        let idx = Arc::new(vec![0usize; rows]);
        let btile = self.gather(&brow, idx)?;
        self.add(&y, &btile)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let flat = self.reshape(x, &[x.numel()])?;
        self.sum_axis(&flat, 0)
    }

    /// Mean of every element, as a scalar.
    pub fn mean_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let flat = self.reshape(x, &[x.numel()])?;
        self.mean_axis(&flat, 0)
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Visits every recorded node exactly
    /// once in reverse execution order and returns the gradient of the loss
    /// with respect to every tracked tensor, keyed by identity.
    pub fn backward(&mut self, loss: &Tensor) -> Result<GradMap> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        self.consumed = true;
        if loss.numel() != 1 {
            return Err(TensorError::NotScalar { numel: loss.numel() });
        }
        let mut grads = GradMap::default();
        grads.accumulate(loss.id(), 1)[0] = 1.0;

        for node in self.nodes.iter().rev() {
            let dy = match grads.grads.get(&node.out_id) {
                Some(g) => g.clone(),
                None => continue,
            };
            backprop_node(node, &dy, &mut grads);
        }
        Ok(grads)
    }
}

fn backprop_node(node: &Node, dy: &[f64], grads: &mut GradMap) {
    match &node.op {
        Op::MatMul { a, b } => {
            let m = a.shape()[0];
            let k = a.shape()[1];
            let n = b.shape()[1];
            if a.tracked() {
                let da = grads.accumulate(a.id(), a.numel());
                matmul_nt_acc(dy, b.data(), m, n, k, da);
            }
            if b.tracked() {
                let db = grads.accumulate(b.id(), b.numel());
                matmul_tn_acc(a.data(), dy, m, k, n, db);
            }
        }
        Op::Add { a, b } => {
            if a.tracked() {
                acc(grads.accumulate(a.id(), a.numel()), dy, 1.0);
            }
            if b.tracked() {
                acc(grads.accumulate(b.id(), b.numel()), dy, 1.0);
            }
        }
        Op::Sub { a, b } => {
            if a.tracked() {
                acc(grads.accumulate(a.id(), a.numel()), dy, 1.0);
            }
            if b.tracked() {
                acc(grads.accumulate(b.id(), b.numel()), dy, -1.0);
            }
        }
        Op::Scale { x, c } => {
            if x.tracked() {
                acc(grads.accumulate(x.id(), x.numel()), dy, *c);
            }
        }
        Op::Reshape { x } => {
            if x.tracked() {
                acc(grads.accumulate(x.id(), x.numel()), dy, 1.0);
            }
        }
        Op::Permute { x, axes } => {
            if x.tracked() {
                let inv = invert_permutation(axes);
                let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
                let dx = permute_raw(dy, &out_shape, &inv);
                acc(grads.accumulate(x.id(), x.numel()), &dx, 1.0);
            }
        }
        Op::Gather { x, indices } => {
            if x.tracked() {
                let rows = x.shape()[0];
                let row_len = if rows == 0 { 0 } else { x.numel() / rows };
                let dx = grads.accumulate(x.id(), x.numel());
                for (pos, &i) in indices.iter().enumerate() {
                    let src = &dy[pos * row_len..(pos + 1) * row_len];
                    let dst = &mut dx[i * row_len..(i + 1) * row_len];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        Op::SoftmaxLastDim { x, y } => {
            if x.tracked() {
                let n = *y.shape().last().unwrap();
                let rows = y.numel() / n;
                let dx = grads.accumulate(x.id(), x.numel());
                for r in 0..rows {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let dr = &dy[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] += yr[j] * (dr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let n = gamma.numel();
            let rows = x.numel() / n;
            for r in 0..rows {
                let xr = &x.data()[r * n..(r + 1) * n];
                let dr = &dy[r * n..(r + 1) * n];
                let (mu, var) = mean_var(xr);
                let inv = 1.0 / (var + eps).sqrt();
                if gamma.tracked() {
                    let dg = grads.accumulate(gamma.id(), n);
                    for j in 0..n {
                        dg[j] += dr[j] * (xr[j] - mu) * inv;
                    }
                }
                if beta.tracked() {
                    let db = grads.accumulate(beta.id(), n);
                    for j in 0..n {
                        db[j] += dr[j];
                    }
                }
                if x.tracked() {
                    // dxhat = dy * gamma; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..n {
                        let xh = (xr[j] - mu) * inv;
                        let dxh = dr[j] * gamma.data()[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh;
                    }
                    mean_dxh /= n as f64;
                    mean_dxh_xh /= n as f64;
                    let dx = grads.accumulate(x.id(), x.numel());
                    for j in 0..n {
                        let xh = (xr[j] - mu) * inv;
                        let dxh = dr[j] * gamma.data()[j];
                        dx[r * n + j] += inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                    }
                }
            }
        }
        Op::Gelu { x } => {
            if x.tracked() {
                let dx = grads.accumulate(x.id(), x.numel());
                for (j, &v) in x.data().iter().enumerate() {
                    dx[j] += dy[j] * gelu_grad(v);
                }
            }
        }
        Op::Sigmoid { x, y } => {
            if x.tracked() {
                let dx = grads.accumulate(x.id(), x.numel());
                for (j, &s) in y.data().iter().enumerate() {
                    dx[j] += dy[j] * s * (1.0 - s);
                }
            }
        }
        Op::MeanAxis { x, axis } | Op::SumAxis { x, axis } => {
            if x.tracked() {
                let mean = matches!(node.op, Op::MeanAxis { .. });
                let shape = x.shape();
                let axis_len = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let w = if mean { 1.0 / axis_len as f64 } else { 1.0 };
                let dx = grads.accumulate(x.id(), x.numel());
                for o in 0..outer {
                    for a in 0..axis_len {
                        for i in 0..inner {
                            dx[(o * axis_len + a) * inner + i] += dy[o * inner + i] * w;
                        }
                    }
                }
            }
        }
        Op::EmbeddingLookup { table, ids } => {
            if table.tracked() {
                let d = table.shape()[1];
                let dt = grads.accumulate(table.id(), table.numel());
                for (pos, &i) in ids.iter().enumerate() {
                    let src = &dy[pos * d..(pos + 1) * d];
                    let dst = &mut dt[i * d..(i + 1) * d];
                    for (a, b) in dst.iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
        }
        Op::ConcatLastDim { parts } => {
            let lead: usize = parts[0].shape()[..parts[0].shape().len() - 1].iter().product();
            let total: usize = parts.iter().map(|p| *p.shape().last().unwrap()).sum();
            let mut offset = 0;
            for p in parts {
                let n = *p.shape().last().unwrap();
                if p.tracked() {
                    let dp = grads.accumulate(p.id(), p.numel());
                    for r in 0..lead {
                        let src = &dy[r * total + offset..r * total + offset + n];
                        let dst = &mut dp[r * n..(r + 1) * n];
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                offset += n;
            }
        }
        Op::SplitLastDim { x, offset, len } => {
            if x.tracked() {
                let n = *x.shape().last().unwrap();
                let rows = x.numel() / n;
                let dx = grads.accumulate(x.id(), x.numel());
                for r in 0..rows {
                    let src = &dy[r * len..(r + 1) * len];
                    let dst = &mut dx[r * n + offset..r * n + offset + len];
                    for (a, b) in dst.iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
        }
        Op::BceWithLogits { logits, target } => {
            if logits.tracked() {
                let n = logits.numel() as f64;
                let dl = grads.accumulate(logits.id(), logits.numel());
                for (j, (&l, &g)) in logits.data().iter().zip(target.iter()).enumerate() {
                    dl[j] += dy[0] * (sigmoid_fwd(l) - g) / n;
                }
            }
        }
        Op::DiceWithLogits { logits, target, eps } => {
            if logits.tracked() {
                let mut inter = 0.0;
                let mut psum = 0.0;
                let mut gsum = 0.0;
                let p: Vec<f64> = logits.data().iter().map(|&l| sigmoid_fwd(l)).collect();
                for (&pi, &g) in p.iter().zip(target.iter()) {
                    inter += pi * g;
                    psum += pi;
                    gsum += g;
                }
                let denom = psum + gsum + eps;
                let numer = 2.0 * inter + eps;
                let dl = grads.accumulate(logits.id(), logits.numel());
                for (j, (&pi, &g)) in p.iter().zip(target.iter()).enumerate() {
                    let dp = -(2.0 * g * denom - numer) / (denom * denom);
                    dl[j] += dy[0] * dp * pi * (1.0 - pi);
                }
            }
        }
        Op::NextTokenCrossEntropy { logits, rows, targets } => {
            if logits.tracked() {
                let vocab = logits.shape()[1];
                let scale = dy[0] / rows.len() as f64;
                let dl = grads.accumulate(logits.id(), logits.numel());
                for (&r, &tgt) in rows.iter().zip(targets.iter()) {
                    let row = &logits.data()[r * vocab..(r + 1) * vocab];
                    let lse = log_sum_exp(row);
                    for j in 0..vocab {
                        let p = (row[j] - lse).exp();
                        dl[r * vocab + j] += scale * (p - if j == tgt { 1.0 } else { 0.0 });
                    }
                }
            }
        }
    }
    let _ = node.out_shape;
}

fn acc(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

// ---- raw kernels ---------------------------------------------------------

/// C += is not used; C is assumed zeroed. Row-major ikj loop so the inner
/// loop runs along contiguous rows of B and C.
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
}

/// dA += dC * B^T where dC is [m,n], B is [k,n], dA is [m,k]. B is
/// transposed once so the accumulation runs as a contiguous ikj product;
/// the O(k*n) transpose is negligible next to the O(m*k*n) flops.
fn matmul_nt_acc(dc: &[f64], b: &[f64], m: usize, n: usize, k: usize, da: &mut [f64]) {
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for (j, &x) in dcrow.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let btrow = &bt[j * k..(j + 1) * k];
            for (d, &t) in darow.iter_mut().zip(btrow) {
                *d += x * t;
            }
        }
    }
}

/// dB += A^T * dC where A is [m,k], dC is [m,n], dB is [k,n].
fn matmul_tn_acc(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let dcrow = &dc[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (d, &g) in dbrow.iter_mut().zip(dcrow) {
                *d += av * g;
            }
        }
    }
}

fn permute_raw(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut src = 0;
        for (pos, &ax) in axes.iter().enumerate() {
            src += idx[pos] * in_strides[ax];
        }
        *o = data[src];
        for pos in (0..rank).rev() {
            idx[pos] += 1;
            if idx[pos] < out_shape[pos] {
                break;
            }
            idx[pos] = 0;
        }
    }
    out
}

fn invert_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn reduce_axis(op: &'static str, x: &Tensor, axis: usize, mean: bool) -> Result<(Vec<usize>, Vec<f64>)> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(shape_err(op, &format!("axis < {}", shape.len()), shape));
    }
    let axis_len = shape[axis];
    if axis_len == 0 {
        return Err(shape_err(op, "non-empty reduction axis", shape));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for a in 0..axis_len {
            for i in 0..inner {
                out[o * inner + i] += x.data()[(o * axis_len + a) * inner + i];
            }
        }
    }
    if mean {
        for v in out.iter_mut() {
            *v /= axis_len as f64;
        }
    }
    let mut out_shape: Vec<usize> = shape.to_vec();
    out_shape.remove(axis);
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    Ok((out_shape, out))
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var)
}

pub(crate) fn sigmoid_fwd(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn as_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(shape_err(op, "rank-2 tensor", other)),
    }
}

fn rows_lastdim(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    let n = *t
        .shape()
        .last()
        .ok_or_else(|| shape_err(op, "rank >= 1", t.shape()))?;
    if n == 0 {
        return Err(shape_err(op, "non-empty last axis", t.shape()));
    }
    Ok((t.numel() / n, n))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, &format!("{:?}", a.shape()), b.shape()));
    }
    Ok(())
}

fn shape_err(op: &'static str, expected: &str, got: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.to_string(),
        got: format!("{got:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_value() {
        let mut g = Graph::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        let c = g.matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_inner_dim_checked() {
        let mut g = Graph::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(g.matmul(&a, &b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_symmetry_and_rows() {
        let mut g = Graph::new();
        let x = t(&[2], &[0.0, 0.0]);
        let y = g.softmax_lastdim(&x).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        let x = t(&[3, 4], &[1.0, -2.0, 0.5, 3.0, 10.0, 10.0, 10.0, 10.0, -5.0, 0.0, 5.0, 2.0]);
        let y = g.softmax_lastdim(&x).unwrap();
        for r in 0..3 {
            let s: f64 = y.data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(y.data()[r * 4..(r + 1) * 4].iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn gather_then_inverse_is_identity() {
        let mut g = Graph::new();
        let x = t(&[4, 4], &(0..16).map(|v| v as f64 * 1.37 - 3.0).collect::<Vec<_>>());
        let perm = vec![2usize, 0, 3, 1];
        let mut inv = vec![0usize; 4];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let y = g.gather(&x, Arc::new(perm)).unwrap();
        let z = g.gather(&y, Arc::new(inv)).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn backward_of_square_sum() {
        // loss = sum(x*x) via matmul with itself transposed: use x [1,1]=3
        let mut g = Graph::new();
        let x = Tensor::param(&[1, 1], vec![3.0]).unwrap();
        let y = g.matmul(&x, &x).unwrap(); // 9
        let loss = g.sum_all(&y).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_without_leaves_is_empty() {
        let mut g = Graph::new();
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let loss = g.mean_all(&x).unwrap();
        let grads = g.backward(&loss).unwrap();
        // only d(loss)/d(loss) itself is present
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get_by_id(loss.id()).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut g = Graph::new();
        let x = Tensor::param(&[1], vec![2.0]).unwrap();
        let loss = g.sum_all(&x).unwrap();
        let _ = g.backward(&loss).unwrap();
        assert_eq!(g.backward(&loss).unwrap_err(), TensorError::GraphConsumed);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = g.scale(&x, 2.0).unwrap();
        assert_eq!(g.backward(&y).unwrap_err(), TensorError::NotScalar { numel: 2 });
    }

    #[test]
    fn dloss_dloss_is_one() {
        let mut g = Graph::new();
        let x = Tensor::param(&[1], vec![5.0]).unwrap();
        let loss = g.scale(&x, 3.0).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get_by_id(loss.id()).unwrap(), &[1.0]);
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut g = Graph::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 3], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let c = g.concat_lastdim(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]);
        let back = g.split_lastdim(&c, 2, 3).unwrap();
        assert_eq!(back.data(), b.data());
    }

    #[test]
    fn permute_transpose() {
        let mut g = Graph::new();
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let at = g.permute(&a, &[1, 0]).unwrap();
        assert_eq!(at.shape(), &[3, 2]);
        assert_eq!(at.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn reduce_axes() {
        let mut g = Graph::new();
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s0 = g.sum_axis(&a, 0).unwrap();
        assert_eq!(s0.data(), &[5.0, 7.0, 9.0]);
        let m1 = g.mean_axis(&a, 1).unwrap();
        assert_eq!(m1.data(), &[2.0, 5.0]);
    }

    #[test]
    fn embedding_rows() {
        let mut g = Graph::new();
        let table = t(&[3, 2], &[0.0, 1.0, 10.0, 11.0, 20.0, 21.0]);
        let e = g.embedding_lookup(&table, Arc::new(vec![2, 0, 2])).unwrap();
        assert_eq!(e.data(), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        assert!(matches!(
            g.embedding_lookup(&table, Arc::new(vec![3])),
            Err(TensorError::BadIndex { .. })
        ));
    }

    #[test]
    fn masked_softmax_weight_is_exactly_zero() {
        let mut g = Graph::new();
        let x = t(&[3], &[0.3, MASK_NEG, 1.2]);
        let y = g.softmax_lastdim(&x).unwrap();
        assert_eq!(y.data()[1], 0.0);
        assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
