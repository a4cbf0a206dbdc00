//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in execution order, so the tape is already topologically
//! sorted; `backward` walks it once in reverse.

use crate::tensor::{
    domain, layer_norm_forward, matmul, matmul_bt, silu, softmax_rows_into, Result, Scalar, Tensor,
    TensorError,
};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-entry gate kind produced by the soft mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateKind {
    Dropped,
    Kept,
    Epsilon,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        scale: Var,
        offset: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Pick {
        x: Var,
        rows: Vec<usize>,
        col: usize,
    },
    MulRows(Var, Var),
    CombineRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    SoftMask {
        probs: Var,
        kinds: Vec<GateKind>,
        normalize: bool,
        totals: Vec<T>,
    },
    CausalAttention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        attn: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    WeightedColMean {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape. Single-threaded; one graph per forward pass.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by node; populated for every `requires_grad` node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_bt(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMulBt(a, b), rg))
    }

    fn zip_with(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)?.ensure_finite(op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * s).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?.ensure_finite("scale")?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Scale(a, s), rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| silu(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?.ensure_finite("silu")?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Silu(a), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.dims2("softmax")?;
        if !ta.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            softmax_rows_into(ta.row(r), &mut out[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, offset: Var, eps: f64) -> Result<Var> {
        let (out, stats) =
            layer_norm_forward(self.value(x), self.value(scale), self.value(offset), eps)?;
        let rg = self.any_grad(&[x, scale, offset]);
        let op = Op::LayerNorm {
            x,
            scale,
            offset,
            mean: stats.mean,
            rstd: stats.rstd,
        };
        Ok(self.push(out, op, rg))
    }

    /// Mean token NLL (nats) as a `[1]` tensor.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, cols) = tl.dims2("cross_entropy")?;
        if targets.len() != rows || rows == 0 {
            return Err(mismatch("cross_entropy", tl.shape(), &[targets.len()]));
        }
        let mut probs = vec![T::zero(); rows * cols];
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(domain(
                    "cross_entropy",
                    format!("target {t} >= vocab {cols}"),
                ));
            }
            let p = &mut probs[r * cols..(r + 1) * cols];
            softmax_rows_into(tl.row(r), p);
            let row = tl.row(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            total += (lse - row[t]).as_f64();
        }
        let out = Tensor::scalar(T::of(total / rows as f64)).ensure_finite("cross_entropy")?;
        let rg = self.any_grad(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(out, op, rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, d) = tt.dims2("embedding")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(domain("embedding", format!("id {id} >= vocab {vocab}")));
            }
            out.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.any_grad(&[table]);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(out, op, rg))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = tx.dims2("gather_rows")?;
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(domain("gather_rows", format!("row {r} >= {n}")));
            }
            out.extend_from_slice(tx.row(r));
        }
        let out = Tensor::new(vec![rows.len(), d], out)?;
        let rg = self.any_grad(&[x]);
        let op = Op::GatherRows {
            x,
            rows: rows.to_vec(),
        };
        Ok(self.push(out, op, rg))
    }

    /// `[x[rows[i], col]]` as an `[n×1]` column.
    pub fn pick(&mut self, x: Var, rows: &[usize], col: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = tx.dims2("pick")?;
        if col >= d || rows.iter().any(|&r| r >= n) {
            return Err(domain("pick", "index out of range"));
        }
        let out = rows.iter().map(|&r| tx.data()[r * d + col]).collect();
        let out = Tensor::new(vec![rows.len(), 1], out)?;
        let rg = self.any_grad(&[x]);
        let op = Op::Pick {
            x,
            rows: rows.to_vec(),
            col,
        };
        Ok(self.push(out, op, rg))
    }

    /// Scales row `i` of `x [n×d]` by `s[i]`, `s` shaped `[n×1]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let (n, d) = tx.dims2("mul_rows")?;
        if ts.shape() != [n, 1] {
            return Err(mismatch("mul_rows", tx.shape(), ts.shape()));
        }
        let mut out = tx.data().to_vec();
        for r in 0..n {
            let f = ts.data()[r];
            for v in &mut out[r * d..(r + 1) * d] {
                *v = *v * f;
            }
        }
        let out = Tensor::new(vec![n, d], out)?.ensure_finite("mul_rows")?;
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(out, Op::MulRows(x, s), rg))
    }

    /// Scatter-adds each part's rows into an `[n_rows×d]` zero tensor, parts in order.
    pub fn combine_rows(
        &mut self,
        n_rows: usize,
        d: usize,
        parts: Vec<(Var, Vec<usize>)>,
    ) -> Result<Var> {
        let mut out = vec![T::zero(); n_rows * d];
        for (v, rows) in &parts {
            let tv = self.value(*v);
            if tv.shape() != [rows.len(), d] {
                return Err(mismatch("combine_rows", tv.shape(), &[rows.len(), d]));
            }
            for (i, &r) in rows.iter().enumerate() {
                if r >= n_rows {
                    return Err(domain("combine_rows", format!("row {r} >= {n_rows}")));
                }
                for (o, &x) in out[r * d..(r + 1) * d].iter_mut().zip(tv.row(i)) {
                    *o = *o + x;
                }
            }
        }
        let out = Tensor::new(vec![n_rows, d], out)?.ensure_finite("combine_rows")?;
        let vars: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        let rg = self.any_grad(&vars);
        Ok(self.push(out, Op::CombineRows { parts }, rg))
    }

    /// Applies a precomputed gate mask to probabilities: kept entries pass
    /// through, ε entries become the constant `eps`, dropped entries become 0.
    /// With `normalize`, each row is divided by its masked sum.
    pub fn soft_mask(
        &mut self,
        probs: Var,
        kinds: Vec<GateKind>,
        eps: T,
        normalize: bool,
    ) -> Result<Var> {
        let tp = self.value(probs);
        let (rows, cols) = tp.dims2("soft_mask")?;
        if kinds.len() != rows * cols {
            return Err(mismatch("soft_mask", tp.shape(), &[kinds.len()]));
        }
        let mut out = vec![T::zero(); rows * cols];
        let mut totals = Vec::with_capacity(if normalize { rows } else { 0 });
        for r in 0..rows {
            let o = &mut out[r * cols..(r + 1) * cols];
            for (j, o) in o.iter_mut().enumerate() {
                *o = match kinds[r * cols + j] {
                    GateKind::Kept => tp.data()[r * cols + j],
                    GateKind::Epsilon => eps,
                    GateKind::Dropped => T::zero(),
                };
            }
            if normalize {
                let total = o.iter().fold(T::zero(), |a, &v| a + v);
                for v in o.iter_mut() {
                    *v = *v / total;
                }
                totals.push(total);
            }
        }
        let out = Tensor::new(vec![rows, cols], out)?.ensure_finite("soft_mask")?;
        let rg = self.any_grad(&[probs]);
        let op = Op::SoftMask {
            probs,
            kinds,
            normalize,
            totals,
        };
        Ok(self.push(out, op, rg))
    }

    /// Multi-head causal self-attention on a packed `[batch·seq × 3d]` q|k|v tensor.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let tq = self.value(qkv);
        let (rows, width) = tq.dims2("attention")?;
        if rows != batch * seq || width % 3 != 0 || (width / 3) % heads != 0 {
            return Err(domain(
                "attention",
                format!(
                    "qkv shape {:?} incompatible with batch={batch} seq={seq} heads={heads}",
                    tq.shape()
                ),
            ));
        }
        let d = width / 3;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let x = tq.data();
        let mut out = vec![T::zero(); rows * d];
        let mut attn = vec![T::zero(); batch * heads * seq * seq];
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let a_base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &x[(b * seq + i) * width + h * dh..][..dh];
                    for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                        let kj = &x[(b * seq + j) * width + d + h * dh..][..dh];
                        let dot = qi.iter().zip(kj).fold(T::zero(), |a, (&p, &q)| a + p * q);
                        *s = dot * scale;
                    }
                    let arow = &mut attn[a_base + i * seq..a_base + i * seq + i + 1];
                    softmax_rows_into(&scores[..=i], arow);
                    let orow = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for (j, &a) in arow.iter().enumerate() {
                        let vj = &x[(b * seq + j) * width + 2 * d + h * dh..][..dh];
                        for (o, &v) in orow.iter_mut().zip(vj) {
                            *o = *o + a * v;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, d], out)?.ensure_finite("attention")?;
        let rg = self.any_grad(&[qkv]);
        let op = Op::CausalAttention {
            qkv,
            batch,
            seq,
            heads,
            attn,
        };
        Ok(self.push(out, op, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum()).ensure_finite("sum")?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::scalar(ta.sum() / T::of(ta.numel() as f64)).ensure_finite("mean")?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Mean(a), rg))
    }

    /// `Σ_j w_j · mean_t x[t, j]` for `x [T×E]`.
    pub fn weighted_col_mean(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2("weighted_col_mean")?;
        if weights.len() != cols || rows == 0 {
            return Err(mismatch("weighted_col_mean", tx.shape(), &[weights.len()]));
        }
        let n = T::of(rows as f64);
        let mut total = T::zero();
        for (j, &w) in weights.iter().enumerate() {
            let col = (0..rows).fold(T::zero(), |a, r| a + tx.data()[r * cols + j]);
            total = total + w * (col / n);
        }
        let out = Tensor::scalar(total).ensure_finite("weighted_col_mean")?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::WeightedColMean { x, weights }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(domain(
                "backward",
                format!("loss must be scalar, got {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        // Leaves not reached from the loss get explicit zeros.
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2("matmul")?;
                let n = tb.shape()[1];
                if rg(a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, false);
                    accumulate(&mut grads[a.0], Tensor::new(vec![m, k], da)?);
                }
                if rg(b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, false);
                    accumulate(&mut grads[b.0], Tensor::new(vec![k, n], db)?);
                }
            }
            Op::MatMulBt(a, b) => {
                // out[m×n] = a[m×k] · b[n×k]ᵀ
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2("matmul_bt")?;
                let n = tb.shape()[0];
                if rg(a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, tb.data(), false, &mut da, false);
                    accumulate(&mut grads[a.0], Tensor::new(vec![m, k], da)?);
                }
                if rg(b) {
                    let mut db = vec![T::zero(); n * k];
                    T::gemm(n, m, k, g.data(), true, ta.data(), false, &mut db, false);
                    accumulate(&mut grads[b.0], Tensor::new(vec![n, k], db)?);
                }
            }
            Op::Add(a, b) => {
                if rg(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if rg(b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if rg(a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::new(g.shape().to_vec(), d)?);
                }
                if rg(b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    accumulate(&mut grads[b.0], Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Scale(a, s) => {
                let d = g.data().iter().map(|&x| x * *s).collect();
                accumulate(&mut grads[a.0], Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Silu(a) => {
                let ta = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(&gy, &x)| {
                        let s = T::one() / (T::one() + (-x).exp());
                        gy * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                accumulate(&mut grads[a.0], Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (rows, cols) = y.dims2("softmax")?;
                let mut d = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot = yr
                        .iter()
                        .zip(gr)
                        .fold(T::zero(), |acc, (&p, &q)| acc + p * q);
                    for j in 0..cols {
                        d[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(&mut grads[a.0], Tensor::new(vec![rows, cols], d)?);
            }
            Op::LayerNorm {
                x,
                scale,
                offset,
                mean,
                rstd,
            } => {
                let tx = self.value(*x);
                let ts = self.value(*scale);
                let (rows, cols) = tx.dims2("layer_norm")?;
                let n = T::of(cols as f64);
                let mut dx = vec![T::zero(); rows * cols];
                let mut dscale = vec![T::zero(); cols];
                let mut doffset = vec![T::zero(); cols];
                let mut xhat = vec![T::zero(); cols];
                let mut dyh = vec![T::zero(); cols];
                for r in 0..rows {
                    let (xr, gr) = (tx.row(r), g.row(r));
                    for j in 0..cols {
                        xhat[j] = (xr[j] - mean[r]) * rstd[r];
                        dyh[j] = gr[j] * ts.data()[j];
                        dscale[j] = dscale[j] + gr[j] * xhat[j];
                        doffset[j] = doffset[j] + gr[j];
                    }
                    let m1 = dyh.iter().fold(T::zero(), |a, &v| a + v) / n;
                    let m2 = dyh
                        .iter()
                        .zip(&xhat)
                        .fold(T::zero(), |a, (&p, &q)| a + p * q)
                        / n;
                    for j in 0..cols {
                        dx[r * cols + j] = rstd[r] * (dyh[j] - m1 - xhat[j] * m2);
                    }
                }
                if rg(x) {
                    accumulate(&mut grads[x.0], Tensor::new(vec![rows, cols], dx)?);
                }
                if rg(scale) {
                    accumulate(&mut grads[scale.0], Tensor::new(vec![cols], dscale)?);
                }
                if rg(offset) {
                    accumulate(&mut grads[offset.0], Tensor::new(vec![cols], doffset)?);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let cols = probs.len() / rows;
                let f = g.item() / T::of(rows as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * f).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * cols + t] = d[r * cols + t] - f;
                }
                accumulate(&mut grads[logits.0], Tensor::new(vec![rows, cols], d)?);
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let (_, d) = tt.dims2("embedding")?;
                let mut dt = Tensor::zeros(tt.shape());
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(g.row(i)) {
                        *o = *o + v;
                    }
                }
                accumulate(&mut grads[table.0], dt);
            }
            Op::GatherRows { x, rows } => {
                let tx = self.value(*x);
                let (_, d) = tx.dims2("gather_rows")?;
                let mut dx = Tensor::zeros(tx.shape());
                for (i, &r) in rows.iter().enumerate() {
                    let dst = &mut dx.data_mut()[r * d..(r + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(g.row(i)) {
                        *o = *o + v;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Pick { x, rows, col } => {
                let tx = self.value(*x);
                let (_, d) = tx.dims2("pick")?;
                let mut dx = Tensor::zeros(tx.shape());
                for (i, &r) in rows.iter().enumerate() {
                    let slot = &mut dx.data_mut()[r * d + col];
                    *slot = *slot + g.data()[i];
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::MulRows(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let (n, d) = tx.dims2("mul_rows")?;
                if rg(x) {
                    let mut dx = g.data().to_vec();
                    for r in 0..n {
                        for v in &mut dx[r * d..(r + 1) * d] {
                            *v = *v * ts.data()[r];
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(vec![n, d], dx)?);
                }
                if rg(s) {
                    let ds = (0..n)
                        .map(|r| {
                            g.row(r)
                                .iter()
                                .zip(tx.row(r))
                                .fold(T::zero(), |a, (&p, &q)| a + p * q)
                        })
                        .collect();
                    accumulate(&mut grads[s.0], Tensor::new(vec![n, 1], ds)?);
                }
            }
            Op::CombineRows { parts } => {
                let d = g.shape()[1];
                for (v, rows) in parts {
                    if !rg(v) {
                        continue;
                    }
                    let mut dv = Vec::with_capacity(rows.len() * d);
                    for &r in rows {
                        dv.extend_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[v.0], Tensor::new(vec![rows.len(), d], dv)?);
                }
            }
            Op::SoftMask {
                probs,
                kinds,
                normalize,
                totals,
            } => {
                let (rows, cols) = node.value.dims2("soft_mask")?;
                let mut dp = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    let (shift, denom) = if *normalize {
                        let gates = node.value.row(r);
                        let dot = gr
                            .iter()
                            .zip(gates)
                            .fold(T::zero(), |a, (&p, &q)| a + p * q);
                        (dot, totals[r])
                    } else {
                        (T::zero(), T::one())
                    };
                    for j in 0..cols {
                        if kinds[r * cols + j] == GateKind::Kept {
                            dp[r * cols + j] = (gr[j] - shift) / denom;
                        }
                    }
                }
                accumulate(&mut grads[probs.0], Tensor::new(vec![rows, cols], dp)?);
            }
            Op::CausalAttention {
                qkv,
                batch,
                seq,
                heads,
                attn,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let tq = self.value(*qkv);
                let width = tq.shape()[1];
                let d = width / 3;
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let x = tq.data();
                let mut dx = vec![T::zero(); x.len()];
                let mut da = vec![T::zero(); seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let a_base = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let gi = &g.data()[(b * seq + i) * d + h * dh..][..dh];
                            let arow = &attn[a_base + i * seq..a_base + i * seq + i + 1];
                            // dA_ij = g_i · v_j ; dV_j += a_ij g_i
                            for j in 0..=i {
                                let vj = (b * seq + j) * width + 2 * d + h * dh;
                                da[j] = gi
                                    .iter()
                                    .zip(&x[vj..vj + dh])
                                    .fold(T::zero(), |a, (&p, &q)| a + p * q);
                                for (o, &gv) in dx[vj..vj + dh].iter_mut().zip(gi) {
                                    *o = *o + arow[j] * gv;
                                }
                            }
                            let dot = arow
                                .iter()
                                .zip(&da[..=i])
                                .fold(T::zero(), |a, (&p, &q)| a + p * q);
                            let qi = (b * seq + i) * width + h * dh;
                            for j in 0..=i {
                                let ds = arow[j] * (da[j] - dot) * scale;
                                let kj = (b * seq + j) * width + d + h * dh;
                                for t in 0..dh {
                                    dx[qi + t] = dx[qi + t] + ds * x[kj + t];
                                    dx[kj + t] = dx[kj + t] + ds * x[qi + t];
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[qkv.0], Tensor::new(tq.shape().to_vec(), dx)?);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                accumulate(&mut grads[a.0], Tensor::full(ta.shape(), g.item()));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let v = g.item() / T::of(ta.numel() as f64);
                accumulate(&mut grads[a.0], Tensor::full(ta.shape(), v));
            }
            Op::WeightedColMean { x, weights } => {
                let tx = self.value(*x);
                let (rows, cols) = tx.dims2("weighted_col_mean")?;
                let f = g.item() / T::of(rows as f64);
                let row: Vec<T> = weights.iter().map(|&w| w * f).collect();
                let mut d = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    d.extend_from_slice(&row);
                }
                accumulate(&mut grads[x.0], Tensor::new(vec![rows, cols], d)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_grad_is_ones_times_bt() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_f64(vec![2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.param(Tensor::from_f64(vec![3, 2], &[1., -1., 0., 2., 3., 1.]).unwrap());
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        // ones[2×2] · Bᵀ: each row = row sums of B.
        assert_eq!(grads.get(a).unwrap().data(), &[0., 2., 4., 0., 2., 4.]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::zeros(&[2, 2]));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::full(&[2], 1.0));
        let b = g.param(Tensor::full(&[3], 2.0));
        let s = g.sum(a).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[2], 1.0));
        let b = g.param(Tensor::full(&[2], 3.0));
        let m = g.mul(a, b).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full(&[2], f32::MAX));
        let e = g.add(a, a).unwrap_err();
        assert_eq!(e, TensorError::NonFinite { op: "add" });
    }

    #[test]
    fn soft_mask_values() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64(vec![1, 4], &[0.5, 0.3, 0.15, 0.05]).unwrap());
        use GateKind::*;
        let m = g
            .soft_mask(p, vec![Kept, Kept, Epsilon, Dropped], 1e-6, false)
            .unwrap();
        assert_eq!(g.value(m).data(), &[0.5, 0.3, 1e-6, 0.0]);
    }
}
