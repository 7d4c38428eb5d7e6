//! The autodiff tape: operations, forward kernels, and reverse pass.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]'s tape. Only meaningful for the graph
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// One recorded operation. Caches hold whatever the backward rule needs
/// beyond the input/output buffers themselves.
enum Op<T: Scalar> {
    Leaf,
    Add { a: TensorId, b: TensorId },
    AddBias { a: TensorId, bias: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, factor: T },
    MatMul { a: TensorId, b: TensorId },
    /// C = A · Bᵀ, with B stored row-major [N×K]. Used for weight tying.
    MatMulNt { a: TensorId, b: TensorId },
    SliceCols { a: TensorId, start: usize },
    ConcatCols { parts: Vec<TensorId> },
    GatherRows { table: TensorId, rows: Vec<usize> },
    Gelu { a: TensorId },
    Softmax { a: TensorId, axis: usize },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        normed: Vec<T>,
        inv_std: Vec<T>,
    },
    /// Fused single-head causal attention over [T×d_k] inputs. `weights`
    /// caches the post-softmax attention matrix [T×T], with exact zeros
    /// above the diagonal.
    CausalAttention {
        q: TensorId,
        k: TensorId,
        v: TensorId,
        weights: Vec<T>,
    },
    /// Mean negative log-likelihood over the rows selected by `mask`.
    /// `probs` caches softmax(logits) on masked rows (zeros elsewhere).
    CrossEntropyMasked {
        logits: TensorId,
        probs: Vec<T>,
        targets: Vec<usize>,
        mask: Vec<bool>,
        masked: usize,
    },
    Sum { a: TensorId },
    Mean { a: TensorId },
}

struct Node<T: Scalar> {
    data: Vec<T>,
    shape: Vec<usize>,
    /// True when a backward pass must produce a gradient here (a trainable
    /// leaf, or any node with a trainable ancestor).
    needs_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

impl<T: Scalar> Node<T> {
    fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Reverse-mode autodiff tape.
///
/// Typical use: create a graph, insert leaves, apply operations, call
/// [`Graph::backward`] on a scalar loss, then read gradients off the leaves
/// with [`Graph::grad`]. A graph is single-threaded by construction; batch
/// parallelism, where used, runs one graph per thread.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Graph<T> {
    /// Graph that records gradients for leaves marked `requires_grad`.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true }
    }

    /// Graph that never records gradients, for evaluation passes.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, needs_grad: bool, op: Op<T>) -> TensorId {
        self.nodes.push(Node {
            data,
            shape,
            needs_grad: needs_grad && self.grad_enabled,
            grad: None,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node<T> {
        &self.nodes[id.0]
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.node(id).data
    }

    /// Gradient of `id`, if a backward pass has produced one.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.node(id).grad.as_deref()
    }

    /// Copy a node out of the graph.
    pub fn detach(&self, id: TensorId) -> Tensor<T> {
        let n = self.node(id);
        Tensor::new(n.data.clone(), n.shape.clone()).expect("node invariants hold")
    }

    /// Post-softmax attention matrix cached by a [`Graph::causal_attention`]
    /// node, row-major [T×T].
    pub fn attention_weights(&self, id: TensorId) -> Result<&[T]> {
        match &self.node(id).op {
            Op::CausalAttention { weights, .. } => Ok(weights),
            _ => Err(Error::Contract(
                "attention_weights called on a non-attention node".into(),
            )),
        }
    }

    // ---- leaves ----------------------------------------------------------

    /// Insert a copy of `t` as a leaf. Gradient tracking follows
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> TensorId {
        self.push(t.data().to_vec(), t.shape().to_vec(), t.requires_grad, Op::Leaf)
    }

    /// Insert a leaf copying `data`, with gradient tracking stated
    /// explicitly rather than read off a tensor.
    pub fn leaf_from(&mut self, data: &[T], shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        if shape.is_empty() || data.len() != shape.iter().product::<usize>() {
            return Err(Error::Contract(format!(
                "leaf_from: {} values do not fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(self.push(data.to_vec(), shape.to_vec(), requires_grad, Op::Leaf))
    }

    /// Insert a leaf that never tracks gradients.
    pub fn constant(&mut self, data: Vec<T>, shape: Vec<usize>) -> Result<TensorId> {
        let t = Tensor::new(data, shape)?;
        Ok(self.push(t.data().to_vec(), t.shape().to_vec(), false, Op::Leaf))
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let data: Vec<T> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, needs, Op::Add { a, b }))
    }

    /// Row-broadcast add: `a` is [R×C], `bias` is [C].
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (r, c) = self.rank2(a, "add_bias")?;
        if self.shape(bias) != [c] {
            return Err(self.shape_err("add_bias", a, bias));
        }
        let mut data = self.node(a).data.clone();
        let bdata = &self.node(bias).data;
        for row in 0..r {
            for col in 0..c {
                data[row * c + col] += bdata[col];
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(data, vec![r, c], needs, Op::AddBias { a, bias }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let data: Vec<T> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, needs, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: TensorId, factor: T) -> Result<TensorId> {
        let data: Vec<T> = self.node(a).data.iter().map(|&x| x * factor).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, needs, Op::Scale { a, factor }))
    }

    // ---- linear algebra ---------------------------------------------------

    /// C[M×N] = A[M×K] · B[K×N].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (kb, n) = self.rank2(b, "matmul")?;
        if k != kb {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![T::ZERO; m * n];
        mm_acc(&self.node(a).data, &self.node(b).data, &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![m, n], needs, Op::MatMul { a, b }))
    }

    /// C[M×N] = A[M×K] · Bᵀ with B stored [N×K].
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.rank2(a, "matmul_nt")?;
        let (n, kb) = self.rank2(b, "matmul_nt")?;
        if k != kb {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = vec![T::ZERO; m * n];
        mm_nt_acc(&self.node(a).data, &self.node(b).data, &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![m, n], needs, Op::MatMulNt { a, b }))
    }

    // ---- shape surgery ----------------------------------------------------

    /// Columns `start..end` of a [R×C] matrix.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (r, c) = self.rank2(a, "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{end} out of range for {c} columns"
            )));
        }
        let w = end - start;
        let src = &self.node(a).data;
        let mut data = Vec::with_capacity(r * w);
        for row in 0..r {
            data.extend_from_slice(&src[row * c + start..row * c + end]);
        }
        let needs = self.needs(a);
        Ok(self.push(data, vec![r, w], needs, Op::SliceCols { a, start }))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols needs at least one part".into()));
        }
        let (r, _) = self.rank2(parts[0], "concat_cols")?;
        let mut total = 0usize;
        for &p in parts {
            let (rp, cp) = self.rank2(p, "concat_cols")?;
            if rp != r {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
            total += cp;
        }
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for &p in parts {
                let c = self.shape(p)[1];
                let src = &self.node(p).data;
                data.extend_from_slice(&src[row * c..(row + 1) * c]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(data, vec![r, total], needs, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Rows of an embedding table, in the order given. Indices are validated
    /// here so the backward scatter cannot go out of bounds.
    pub fn gather_rows(&mut self, table: TensorId, rows: &[usize]) -> Result<TensorId> {
        let (r, c) = self.rank2(table, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {r} rows"
            )));
        }
        let src = &self.node(table).data;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            data,
            vec![rows.len(), c],
            needs,
            Op::GatherRows { table, rows: rows.to_vec() },
        ))
    }

    // ---- nonlinearities ---------------------------------------------------

    /// Tanh-approximation GELU, applied elementwise.
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<T> = self.node(a).data.iter().map(|&x| gelu_fwd(x)).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, needs, Op::Gelu { a }))
    }

    /// Softmax along `axis`, numerically stabilized by max subtraction.
    /// Non-finite inputs are rejected rather than silently propagated.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let axis_n = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.node(a).data;
        let mut data = vec![T::ZERO; src.len()];
        let mut lane = vec![T::ZERO; axis_n];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..axis_n {
                    let v = src[(o * axis_n + j) * inner + i];
                    if !v.is_finite() {
                        return Err(Error::Numeric("softmax input".into()));
                    }
                    lane[j] = v;
                }
                softmax_lane(&mut lane);
                for j in 0..axis_n {
                    data[(o * axis_n + j) * inner + i] = lane[j];
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(data, shape, needs, Op::Softmax { a, axis }))
    }

    /// Row-wise layer normalization of an [R×C] matrix with learned gain and
    /// bias of shape [C]. Uses the biased variance and `eps` inside the
    /// square root.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (r, c) = self.rank2(x, "layer_norm")?;
        if self.shape(gain) != [c] {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.shape(bias) != [c] {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let src = &self.node(x).data;
        let gdata = &self.node(gain).data;
        let bdata = &self.node(bias).data;
        let inv_c = T::from_f64(1.0 / c as f64);
        let epsilon = T::from_f64(eps);
        let mut normed = vec![T::ZERO; r * c];
        let mut inv_std = vec![T::ZERO; r];
        let mut data = vec![T::ZERO; r * c];
        for row in 0..r {
            let xs = &src[row * c..(row + 1) * c];
            let mut mean = T::ZERO;
            for &v in xs {
                mean += v;
            }
            mean *= inv_c;
            let mut var = T::ZERO;
            for &v in xs {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_c;
            let istd = T::ONE / (var + epsilon).sqrt();
            if !istd.is_finite() {
                return Err(Error::Numeric("layer_norm scale".into()));
            }
            inv_std[row] = istd;
            for col in 0..c {
                let n = (xs[col] - mean) * istd;
                normed[row * c + col] = n;
                data[row * c + col] = n * gdata[col] + bdata[col];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            data,
            vec![r, c],
            needs,
            Op::LayerNorm { x, gain, bias, normed, inv_std },
        ))
    }

    // ---- fused model ops --------------------------------------------------

    /// Single-head causal self-attention. `q`, `k`, `v` are [T×d_k]; the
    /// output is [T×d_k]. Scores are scaled by 1/√d_k and each query row is
    /// softmaxed over keys 0..=row only; the cached weight matrix stores
    /// exact zeros above the diagonal.
    pub fn causal_attention(&mut self, q: TensorId, k: TensorId, v: TensorId) -> Result<TensorId> {
        let (t, dk) = self.rank2(q, "causal_attention")?;
        if self.shape(k) != [t, dk] {
            return Err(self.shape_err("causal_attention", q, k));
        }
        if self.shape(v) != [t, dk] {
            return Err(self.shape_err("causal_attention", q, v));
        }
        let qd = &self.node(q).data;
        let kd = &self.node(k).data;
        let vd = &self.node(v).data;
        let scale = T::from_f64(1.0 / (dk as f64).sqrt());
        let mut weights = vec![T::ZERO; t * t];
        let mut out = vec![T::ZERO; t * dk];
        for i in 0..t {
            let qrow = &qd[i * dk..(i + 1) * dk];
            let wrow = &mut weights[i * t..i * t + i + 1];
            for (j, w) in wrow.iter_mut().enumerate() {
                let krow = &kd[j * dk..(j + 1) * dk];
                let mut s = T::ZERO;
                for d in 0..dk {
                    s += qrow[d] * krow[d];
                }
                *w = s * scale;
                if !w.is_finite() {
                    return Err(Error::Numeric("attention scores".into()));
                }
            }
            softmax_lane(wrow);
            let orow = i * dk;
            for (j, &w) in wrow.iter().enumerate() {
                let vrow = &vd[j * dk..(j + 1) * dk];
                for d in 0..dk {
                    out[orow + d] += w * vrow[d];
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(out, vec![t, dk], needs, Op::CausalAttention { q, k, v, weights }))
    }

    /// Mean token-level negative log-likelihood over masked rows.
    ///
    /// `logits` is [R×V]; `targets` and `mask` have length R. Rows where the
    /// mask is false contribute nothing to the value or the gradient. At
    /// least one row must be selected.
    pub fn cross_entropy_masked(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<TensorId> {
        let (r, v) = self.rank2(logits, "cross_entropy_masked")?;
        if targets.len() != r || mask.len() != r {
            return Err(Error::Contract(format!(
                "cross_entropy_masked: {r} logit rows but {} targets / {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let masked = mask.iter().filter(|&&m| m).count();
        if masked == 0 {
            return Err(Error::Degenerate("loss mask selects no positions".into()));
        }
        if let Some(&bad) = targets
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(t, _)| t)
            .find(|&&t| t >= v)
        {
            return Err(Error::Contract(format!(
                "cross_entropy_masked target {bad} out of range for {v} classes"
            )));
        }
        let src = &self.node(logits).data;
        let mut probs = vec![T::ZERO; r * v];
        let mut total = 0.0f64;
        for row in 0..r {
            if !mask[row] {
                continue;
            }
            let xs = &src[row * v..(row + 1) * v];
            let prow = &mut probs[row * v..(row + 1) * v];
            let mut maxv = xs[0];
            for &x in xs {
                if !x.is_finite() {
                    return Err(Error::Numeric("cross_entropy logits".into()));
                }
                maxv = maxv.maximum(x);
            }
            let mut denom = T::ZERO;
            for (p, &x) in prow.iter_mut().zip(xs) {
                let e = (x - maxv).exp();
                *p = e;
                denom += e;
            }
            let inv = T::ONE / denom;
            for p in prow.iter_mut() {
                *p *= inv;
            }
            // log-sum-exp done in the scalar domain for the loss value.
            let lse = maxv.to_f64() + denom.to_f64().ln();
            total += lse - xs[targets[row]].to_f64();
        }
        let value = T::from_f64(total / masked as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            vec![value],
            vec![1],
            needs,
            Op::CrossEntropyMasked {
                logits,
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                masked,
            },
        ))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let mut acc = T::ZERO;
        for &v in &self.node(a).data {
            acc += v;
        }
        let needs = self.needs(a);
        Ok(self.push(vec![acc], vec![1], needs, Op::Sum { a }))
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.node(a).numel();
        let mut acc = T::ZERO;
        for &v in &self.node(a).data {
            acc += v;
        }
        let needs = self.needs(a);
        let value = acc * T::from_f64(1.0 / n as f64);
        Ok(self.push(vec![value], vec![1], needs, Op::Mean { a }))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Backpropagate from a scalar `loss` node, accumulating gradients into
    /// every node with `needs_grad`. Nodes are visited in reverse creation
    /// order, which is a valid topological order because operations can only
    /// reference earlier nodes.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Contract(
                "backward called on an inference graph".into(),
            ));
        }
        if self.node(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.node(loss).needs_grad {
            return Err(Error::Contract(
                "backward: loss does not depend on any gradient-tracked leaf".into(),
            ));
        }
        self.nodes[loss.0].grad = Some(vec![T::ONE]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            let g = node.grad.as_deref().expect("checked above");
            match &node.op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    acc_grad(head, *a, |dst| add_assign(dst, g));
                    acc_grad(head, *b, |dst| add_assign(dst, g));
                }
                Op::AddBias { a, bias } => {
                    let c = head[bias.0].numel();
                    acc_grad(head, *a, |dst| add_assign(dst, g));
                    acc_grad(head, *bias, |dst| {
                        for (i, &gv) in g.iter().enumerate() {
                            dst[i % c] += gv;
                        }
                    });
                }
                Op::Mul { a, b } => {
                    let bdata: Vec<T> = head[b.0].data.clone();
                    let adata: Vec<T> = head[a.0].data.clone();
                    acc_grad(head, *a, |dst| {
                        for ((d, &gv), &bv) in dst.iter_mut().zip(g).zip(&bdata) {
                            *d += gv * bv;
                        }
                    });
                    acc_grad(head, *b, |dst| {
                        for ((d, &gv), &av) in dst.iter_mut().zip(g).zip(&adata) {
                            *d += gv * av;
                        }
                    });
                }
                Op::Scale { a, factor } => {
                    let f = *factor;
                    acc_grad(head, *a, |dst| {
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d += gv * f;
                        }
                    });
                }
                Op::MatMul { a, b } => {
                    // C = A·B  ⇒  dA = g·Bᵀ, dB = Aᵀ·g.
                    let (m, k) = dims2(&head[a.0].shape);
                    let n = head[b.0].shape[1];
                    if head[a.0].needs_grad {
                        let bdata = head[b.0].data.clone();
                        acc_grad(head, *a, |dst| mm_nt_acc(g, &bdata, dst, m, n, k));
                    }
                    if head[b.0].needs_grad {
                        let adata = head[a.0].data.clone();
                        acc_grad(head, *b, |dst| mm_tn_acc(&adata, g, dst, m, k, n));
                    }
                }
                Op::MatMulNt { a, b } => {
                    // C = A·Bᵀ  ⇒  dA = g·B, dB = gᵀ·A.
                    let (m, k) = dims2(&head[a.0].shape);
                    let n = head[b.0].shape[0];
                    if head[a.0].needs_grad {
                        let bdata = head[b.0].data.clone();
                        acc_grad(head, *a, |dst| mm_acc(g, &bdata, dst, m, n, k));
                    }
                    if head[b.0].needs_grad {
                        let adata = head[a.0].data.clone();
                        acc_grad(head, *b, |dst| mm_tn_acc(g, &adata, dst, m, n, k));
                    }
                }
                Op::SliceCols { a, start } => {
                    let c = head[a.0].shape[1];
                    let w = node.shape[1];
                    let s = *start;
                    acc_grad(head, *a, |dst| {
                        for row in 0..node.shape[0] {
                            for col in 0..w {
                                dst[row * c + s + col] += g[row * w + col];
                            }
                        }
                    });
                }
                Op::ConcatCols { parts } => {
                    let total = node.shape[1];
                    let rows = node.shape[0];
                    let mut offset = 0usize;
                    for &p in parts {
                        let c = head[p.0].shape[1];
                        let off = offset;
                        acc_grad(head, p, |dst| {
                            for row in 0..rows {
                                for col in 0..c {
                                    dst[row * c + col] += g[row * total + off + col];
                                }
                            }
                        });
                        offset += c;
                    }
                }
                Op::GatherRows { table, rows } => {
                    let c = head[table.0].shape[1];
                    acc_grad(head, *table, |dst| {
                        for (pos, &r) in rows.iter().enumerate() {
                            for col in 0..c {
                                dst[r * c + col] += g[pos * c + col];
                            }
                        }
                    });
                }
                Op::Gelu { a } => {
                    let xs = head[a.0].data.clone();
                    acc_grad(head, *a, |dst| {
                        for ((d, &gv), &x) in dst.iter_mut().zip(g).zip(&xs) {
                            *d += gv * gelu_bwd(x);
                        }
                    });
                }
                Op::Softmax { a, axis } => {
                    // dx = y ⊙ (g − ⟨g, y⟩) per softmax lane.
                    let y = &node.data;
                    let shape = &node.shape;
                    let axis_n = shape[*axis];
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    acc_grad(head, *a, |dst| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let mut dot = T::ZERO;
                                for j in 0..axis_n {
                                    let idx = (o * axis_n + j) * inner + i;
                                    dot += g[idx] * y[idx];
                                }
                                for j in 0..axis_n {
                                    let idx = (o * axis_n + j) * inner + i;
                                    dst[idx] += y[idx] * (g[idx] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                    let (r, c) = dims2(&node.shape);
                    let inv_c = T::from_f64(1.0 / c as f64);
                    if head[gain.0].needs_grad {
                        acc_grad(head, *gain, |dst| {
                            for row in 0..r {
                                for col in 0..c {
                                    dst[col] += g[row * c + col] * normed[row * c + col];
                                }
                            }
                        });
                    }
                    if head[bias.0].needs_grad {
                        acc_grad(head, *bias, |dst| {
                            for row in 0..r {
                                for col in 0..c {
                                    dst[col] += g[row * c + col];
                                }
                            }
                        });
                    }
                    if head[x.0].needs_grad {
                        let gdata = head[gain.0].data.clone();
                        acc_grad(head, *x, |dst| {
                            // dx = istd · (dx̂ − mean(dx̂) − x̂ · mean(dx̂ ⊙ x̂))
                            for row in 0..r {
                                let base = row * c;
                                let mut mean_dn = T::ZERO;
                                let mut mean_dn_n = T::ZERO;
                                for col in 0..c {
                                    let dn = g[base + col] * gdata[col];
                                    mean_dn += dn;
                                    mean_dn_n += dn * normed[base + col];
                                }
                                mean_dn *= inv_c;
                                mean_dn_n *= inv_c;
                                let istd = inv_std[row];
                                for col in 0..c {
                                    let dn = g[base + col] * gdata[col];
                                    dst[base + col] +=
                                        istd * (dn - mean_dn - normed[base + col] * mean_dn_n);
                                }
                            }
                        });
                    }
                }
                Op::CausalAttention { q, k, v, weights } => {
                    let (t, dk) = dims2(&node.shape);
                    let scale = T::from_f64(1.0 / (dk as f64).sqrt());
                    let w = weights;
                    // dV = Wᵀ · g  (zeros above the diagonal make the causal
                    // restriction implicit).
                    if head[v.0].needs_grad {
                        acc_grad(head, *v, |dst| mm_tn_acc(w, g, dst, t, t, dk));
                    }
                    if head[q.0].needs_grad || head[k.0].needs_grad {
                        let vdata = head[v.0].data.clone();
                        // dW[i,j] = ⟨g_i, v_j⟩, then the softmax Jacobian per
                        // row, then the 1/√d_k score scaling folded in.
                        let mut ds = vec![T::ZERO; t * t];
                        for i in 0..t {
                            let grow = &g[i * dk..(i + 1) * dk];
                            let wrow = &w[i * t..i * t + i + 1];
                            let dsrow = &mut ds[i * t..i * t + i + 1];
                            let mut dot = T::ZERO;
                            for (j, d) in dsrow.iter_mut().enumerate() {
                                let vrow = &vdata[j * dk..(j + 1) * dk];
                                let mut dw = T::ZERO;
                                for c in 0..dk {
                                    dw += grow[c] * vrow[c];
                                }
                                *d = dw;
                                dot += dw * wrow[j];
                            }
                            for (j, d) in dsrow.iter_mut().enumerate() {
                                *d = wrow[j] * (*d - dot) * scale;
                            }
                        }
                        let kdata = head[k.0].data.clone();
                        let qdata = head[q.0].data.clone();
                        if head[q.0].needs_grad {
                            acc_grad(head, *q, |dst| mm_acc(&ds, &kdata, dst, t, t, dk));
                        }
                        if head[k.0].needs_grad {
                            acc_grad(head, *k, |dst| mm_tn_acc(&ds, &qdata, dst, t, t, dk));
                        }
                    }
                }
                Op::CrossEntropyMasked { logits, probs, targets, mask, masked } => {
                    let (r, vdim) = dims2(&head[logits.0].shape);
                    let gscale = g[0] * T::from_f64(1.0 / *masked as f64);
                    acc_grad(head, *logits, |dst| {
                        for row in 0..r {
                            if !mask[row] {
                                continue;
                            }
                            let base = row * vdim;
                            for col in 0..vdim {
                                let indicator = if col == targets[row] { T::ONE } else { T::ZERO };
                                dst[base + col] += (probs[base + col] - indicator) * gscale;
                            }
                        }
                    });
                }
                Op::Sum { a } => {
                    let gv = g[0];
                    acc_grad(head, *a, |dst| {
                        for d in dst.iter_mut() {
                            *d += gv;
                        }
                    });
                }
                Op::Mean { a } => {
                    let n = head[a.0].numel();
                    let gv = g[0] * T::from_f64(1.0 / n as f64);
                    acc_grad(head, *a, |dst| {
                        for d in dst.iter_mut() {
                            *d += gv;
                        }
                    });
                }
            }
        }
        Ok(())
    }

    // ---- internals --------------------------------------------------------

    fn rank2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::Shape { op, lhs: s.to_vec(), rhs: vec![0, 0] });
        }
        Ok((s[0], s[1]))
    }

    fn shape_err(&self, op: &'static str, a: TensorId, b: TensorId) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

/// Accumulate into the gradient buffer of `id` (allocating it on first use)
/// if and only if that node tracks gradients.
fn acc_grad<T: Scalar>(
    nodes: &mut [Node<T>],
    id: TensorId,
    write: impl FnOnce(&mut [T]),
) {
    let node = &mut nodes[id.0];
    if !node.needs_grad {
        return;
    }
    let numel = node.data.len();
    let grad = node.grad.get_or_insert_with(|| vec![T::ZERO; numel]);
    write(grad);
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// out += A[M×K] · B[K×N]. The i-k-j loop order keeps the inner loop
/// contiguous in both B and out so it autovectorizes.
fn mm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += A[M×K] · Bᵀ with B stored [N×K]: out[i,j] = ⟨A_i, B_j⟩.
fn mm_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out += Aᵀ · B with A stored [M×K], B stored [M×N]; out is [K×N].
fn mm_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// In-place stabilized softmax of one lane.
fn softmax_lane<T: Scalar>(lane: &mut [T]) {
    let mut maxv = lane[0];
    for &v in lane.iter() {
        maxv = maxv.maximum(v);
    }
    let mut denom = T::ZERO;
    for v in lane.iter_mut() {
        *v = (*v - maxv).exp();
        denom += *v;
    }
    let inv = T::ONE / denom;
    for v in lane.iter_mut() {
        *v *= inv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * x * (T::ONE + t)
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let three_a = T::from_f64(3.0 * GELU_A);
    let half = T::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three_a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t2(data: Vec<f64>, r: usize, c: usize) -> Tensor<f64> {
        Tensor::new(data, vec![r, c]).unwrap().with_grad()
    }

    #[test]
    fn matmul_forward_2x3_3x2() {
        let mut g = Graph::new();
        let a = g.leaf(&t2(vec![1., 2., 3., 4., 5., 6.], 2, 3));
        let b = g.leaf(&t2(vec![7., 8., 9., 10., 11., 12.], 3, 2));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2]);
        assert_eq!(g.data(c), &[58., 64., 139., 154.]);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut g = Graph::new();
        let a = g.leaf(&t2(vec![1., 2., 3., 4.], 2, 2));
        // B stored [3×2]; A·Bᵀ is [2×3].
        let b = g.leaf(&t2(vec![1., 0., 0., 1., 2., 3.], 3, 2));
        let c = g.matmul_nt(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 3]);
        assert_eq!(g.data(c), &[1., 2., 8., 3., 4., 18.]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(&t2(vec![0.; 6], 2, 3));
        let b = g.leaf(&t2(vec![0.; 8], 4, 2));
        match g.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn add_reuses_the_same_input_twice() {
        // d(x + x)/dx = 2: the tape must accumulate both contributions into
        // one buffer.
        let mut g = Graph::new();
        let x = g.leaf(&t2(vec![3.0], 1, 1));
        let y = g.add(x, x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn softmax_values_match_reference() {
        let mut g = Graph::new();
        let x = g.leaf(&t2(vec![1., 2., 3.], 1, 3));
        let y = g.softmax(x, 1).unwrap();
        let want = [
            0.09003057317038046,
            0.24472847105479764,
            0.6652409557748218,
        ];
        for (got, want) in g.data(y).iter().zip(want) {
            assert!((got - want).abs() < 1e-15);
        }
        let s: f64 = g.data(y).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite_input() {
        let mut g = Graph::new();
        let x = g.leaf(&t2(vec![f64::NAN, 0.0], 1, 2));
        assert!(matches!(g.softmax(x, 1), Err(Error::Numeric(_))));
        let x = g.leaf(&t2(vec![f64::INFINITY, 0.0], 1, 2));
        assert!(matches!(g.softmax(x, 1), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let mut g = Graph::new();
        let x = g.leaf(&t2(vec![0., 10., 0., 20.], 2, 2));
        let y = g.softmax(x, 0).unwrap();
        let d = g.data(y);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-12);
        assert!((d[1] + d[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_matches_reference_point() {
        let mut g = Graph::new();
        let x = g.leaf(&t2(vec![1.0, -10.0, 0.0], 1, 3));
        let y = g.gelu(x).unwrap();
        assert!((g.data(y)[0] - 0.8411919906082768).abs() < 1e-15);
        assert!(g.data(y)[1].abs() < 1e-9, "deep negative tail ≈ 0");
        assert_eq!(g.data(y)[2], 0.0);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::new();
        let x = g.leaf(&t2(vec![1., 2., 3., 4., -1., 0., 1., 2.], 2, 4));
        let gain = g.leaf(&Tensor::new(vec![1.; 4], vec![4]).unwrap());
        let bias = g.leaf(&Tensor::new(vec![0.; 4], vec![4]).unwrap());
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        for row in 0..2 {
            let r = &g.data(y)[row * 4..(row + 1) * 4];
            let mean: f64 = r.iter().sum::<f64>() / 4.0;
            let var: f64 = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_first_row_copies_first_value_row() {
        // Row 0 can only attend to key 0, so out[0] == v[0] exactly.
        let mut g = Graph::new();
        let q = g.leaf(&t2(vec![0.3, -0.1, 0.8, 0.5], 2, 2));
        let k = g.leaf(&t2(vec![0.7, 0.2, -0.4, 0.9], 2, 2));
        let v = g.leaf(&t2(vec![1.5, -2.0, 0.25, 4.0], 2, 2));
        let o = g.causal_attention(q, k, v).unwrap();
        assert_eq!(&g.data(o)[..2], &[1.5, -2.0]);
        let w = g.attention_weights(o).unwrap();
        assert_eq!(w[1], 0.0, "future key must carry exactly zero weight");
        assert!((w[2] + w[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_weights_match_hand_softmax() {
        // T=2, d_k=1: row 1 scores are [q1·k0, q1·k1]/√1.
        let mut g = Graph::new();
        let q = g.leaf(&t2(vec![1.0, 2.0], 2, 1));
        let k = g.leaf(&t2(vec![0.5, -0.5], 2, 1));
        let v = g.leaf(&t2(vec![1.0, 3.0], 2, 1));
        let o = g.causal_attention(q, k, v).unwrap();
        let e0 = (2.0f64 * 0.5).exp();
        let e1 = (2.0f64 * -0.5).exp();
        let w0 = e0 / (e0 + e1);
        let w = g.attention_weights(o).unwrap();
        assert!((w[2] - w0).abs() < 1e-12);
        assert!((g.data(o)[1] - (w0 * 1.0 + (1.0 - w0) * 3.0)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits_gives_log_vocab() {
        let mut g = Graph::new();
        let logits = g.leaf(&t2(vec![0.0; 8], 2, 4));
        let loss = g
            .cross_entropy_masked(logits, &[2, 0], &[true, false])
            .unwrap();
        assert!((g.data(loss)[0] - 4.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_empty_mask_and_bad_targets() {
        let mut g = Graph::new();
        let logits = g.leaf(&t2(vec![0.0; 8], 2, 4));
        assert!(matches!(
            g.cross_entropy_masked(logits, &[0, 0], &[false, false]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            g.cross_entropy_masked(logits, &[0, 9], &[true, true]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot_over_m() {
        let mut g = Graph::new();
        let logits = g.leaf(&t2(vec![0.0; 8], 2, 4));
        let loss = g
            .cross_entropy_masked(logits, &[2, 1], &[true, false])
            .unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();
        // Masked row: uniform probs 0.25, target 2, m = 1.
        assert!((grad[0] - 0.25).abs() < 1e-15);
        assert!((grad[2] + 0.75).abs() < 1e-15);
        // Unmasked row contributes nothing.
        assert!(grad[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gather_rows_scatters_gradient_with_repeats() {
        let mut g = Graph::new();
        let table = g.leaf(&t2(vec![1., 2., 3., 4., 5., 6.], 3, 2));
        let picked = g.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.data(picked), &[5., 6., 1., 2., 5., 6.]);
        let loss = g.sum(picked).unwrap();
        g.backward(loss).unwrap();
        // Row 2 was gathered twice.
        assert_eq!(g.grad(table).unwrap(), &[1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn slice_and_concat_roundtrip_with_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(&t2(vec![1., 2., 3., 4., 5., 6.], 2, 3));
        let left = g.slice_cols(x, 0, 1).unwrap();
        let right = g.slice_cols(x, 1, 3).unwrap();
        let back = g.concat_cols(&[left, right]).unwrap();
        assert_eq!(g.data(back), g.data(x));
        let s = g.sum(back).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.; 6]);
    }

    #[test]
    fn backward_requires_scalar_and_grad_mode() {
        let mut g = Graph::new();
        let x = g.leaf(&t2(vec![1., 2.], 1, 2));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));

        let mut g: Graph<f64> = Graph::inference();
        let x = g.leaf(&t2(vec![1.], 1, 1));
        let s = g.sum(x).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn inference_graph_allocates_no_gradients() {
        let mut g: Graph<f64> = Graph::inference();
        let x = g.leaf(&t2(vec![1., 2.], 1, 2));
        let y = g.gelu(x).unwrap();
        assert!(g.grad(x).is_none() && g.grad(y).is_none());
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut g = Graph::new();
        let frozen = g
            .constant(vec![1.0f64, 2.0], vec![1, 2])
            .unwrap();
        let live = g.leaf(&t2(vec![3., 4.], 1, 2));
        let y = g.mul(frozen, live).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(frozen).is_none());
        assert_eq!(g.grad(live).unwrap(), &[1., 2.]);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || -> Vec<f64> {
            let mut g = Graph::new();
            let q = g.leaf(&t2(vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6], 3, 2));
            let k = g.leaf(&t2(vec![0.9, 0.8, -0.7, 0.6, 0.5, 0.4], 3, 2));
            let v = g.leaf(&t2(vec![1., 2., 3., 4., 5., 6.], 3, 2));
            let o = g.causal_attention(q, k, v).unwrap();
            let sm = g.softmax(o, 1).unwrap();
            g.data(sm).to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
