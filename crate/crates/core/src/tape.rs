//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! The tape is a define-by-run computation graph: each operation appends a
//! node holding its output values, and `backward` walks the nodes in exact
//! reverse insertion order (which is a reverse topological order, since an
//! operation can only reference earlier nodes). Gradients accumulate
//! additively at fan-out points.
//!
//! Only the operations the model needs exist here: matrix product with bias,
//! relu, batch-stat normalization, per-channel affine, elementwise
//! arithmetic, cross-domain mean/variance, softmax cross-entropy and
//! batch-hard triplet loss. There is deliberately no general broadcasting
//! engine.

use crate::error::{GdError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// y = x W, x:[m,k] W:[k,n]
    MatMul {
        x: TensorId,
        w: TensorId,
    },
    /// y[r,c] = x[r,c] + bias[c]
    AddBiasRow {
        x: TensorId,
        bias: TensorId,
    },
    Relu {
        x: TensorId,
    },
    /// Elementwise sum of two same-shape tensors.
    Add {
        a: TensorId,
        b: TensorId,
    },
    /// Elementwise difference of two same-shape tensors.
    Sub {
        a: TensorId,
        b: TensorId,
    },
    /// y = c * x for a scalar constant c.
    Scale {
        x: TensorId,
        c: f64,
    },
    /// y = x ⊙ c for a constant vector c (no gradient into c).
    MulConstVec {
        x: TensorId,
        c: Vec<f64>,
    },
    /// Elementwise square root; subgradient at 0 defined as 0.
    Sqrt {
        x: TensorId,
    },
    /// Scalar sum of all elements.
    SumAll {
        x: TensorId,
    },
    /// y[r,c] = a[c] * x[r,c] + b[c]; the linearized-BN forward.
    AffineRows {
        x: TensorId,
        a: TensorId,
        b: TensorId,
    },
    /// Train-mode batch normalization with batch statistics (biased,
    /// divide-by-B variance). Stats are captured at forward time.
    BnTrain {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    /// Elementwise mean over K same-shape inputs.
    MeanOver {
        xs: Vec<TensorId>,
    },
    /// Elementwise divide-by-K variance over K same-shape inputs.
    VarOver {
        xs: Vec<TensorId>,
    },
    /// Mean softmax cross-entropy of logits[b, labels[b]].
    SoftmaxXent {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    /// Batch-hard triplet loss over embeddings with Euclidean distances.
    TripletHard {
        emb: TensorId,
        hardest_pos: Vec<usize>,
        hardest_neg: Vec<usize>,
        dist: Vec<f64>,
        active: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Elementwise mean of K equal-length slices, in ascending input order.
pub(crate) fn mean_over_slices(xs: &[&[f64]]) -> Vec<f64> {
    let k = xs.len() as f64;
    let width = xs[0].len();
    let mut out = vec![0.0; width];
    for x in xs {
        for (o, v) in out.iter_mut().zip(*x) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= k;
    }
    out
}

/// Elementwise divide-by-K variance of K equal-length slices around `mean`.
pub(crate) fn var_over_slices(xs: &[&[f64]], mean: &[f64]) -> Vec<f64> {
    let k = xs.len() as f64;
    let width = xs[0].len();
    let mut out = vec![0.0; width];
    for x in xs {
        for ((o, v), m) in out.iter_mut().zip(*x).zip(mean) {
            let d = v - m;
            *o += d * d;
        }
    }
    for o in &mut out {
        *o /= k;
    }
    out
}

fn matmul(x: &[f64], w: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let xv = x[i * k + p];
            if xv == 0.0 {
                continue;
            }
            let row = &w[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (d, wv) in dst.iter_mut().zip(row) {
                *d += xv * wv;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> TensorId {
        let grad = vec![0.0; values.len()];
        self.nodes.push(Node {
            op,
            shape,
            values,
            grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Record a leaf node from a tensor's current values.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(Op::Leaf, t.shape().to_vec(), t.values().to_vec())
    }

    /// Record a rank-1 leaf from a raw slice.
    pub fn leaf_vec(&mut self, values: &[f64]) -> TensorId {
        self.push(Op::Leaf, vec![values.len()], values.to_vec())
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    /// Scalar value of a rank-0/1 single-element node.
    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    /// Batch statistics captured by a `BnTrain` node at forward time.
    pub fn bn_batch_stats(&self, id: TensorId) -> (&[f64], &[f64]) {
        match &self.nodes[id.0].op {
            Op::BnTrain { mean, var, .. } => (mean, var),
            _ => panic!("bn_batch_stats on a non-BnTrain node"),
        }
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(GdError::dimension(
                op,
                format!("expected rank 2, got {s:?}"),
            ));
        }
        Ok((s[0], s[1]))
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// y = x W + bias, the dense layer.
    pub fn linear(&mut self, x: TensorId, w: TensorId, bias: TensorId) -> Result<TensorId> {
        let prod = self.matmul_op(x, w)?;
        self.add_bias_row(prod, bias)
    }

    pub fn matmul_op(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(x, "matmul")?;
        let (k2, n) = self.dims2(w, "matmul")?;
        if k != k2 {
            return Err(GdError::dimension(
                "matmul",
                format!("inner dims {k} vs {k2}"),
            ));
        }
        let values = matmul(&self.nodes[x.0].values, &self.nodes[w.0].values, m, k, n);
        Ok(self.push(Op::MatMul { x, w }, vec![m, n], values))
    }

    pub fn add_bias_row(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "add_bias_row")?;
        if self.nodes[bias.0].values.len() != n {
            return Err(GdError::dimension(
                "add_bias_row",
                format!("bias width {} vs {n}", self.nodes[bias.0].values.len()),
            ));
        }
        let mut values = self.nodes[x.0].values.clone();
        let b = &self.nodes[bias.0].values;
        for r in 0..m {
            for c in 0..n {
                values[r * n + c] += b[c];
            }
        }
        Ok(self.push(Op::AddBiasRow { x, bias }, vec![m, n], values))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Relu { x }, shape, values)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape_binop(a, b, "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape_binop(a, b, "sub")
    }

    fn same_shape_binop(&mut self, a: TensorId, b: TensorId, op: &'static str) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(GdError::dimension(
                op,
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        let shape = self.nodes[a.0].shape.clone();
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| if op == "add" { x + y } else { x - y })
            .collect();
        let node = if op == "add" {
            Op::Add { a, b }
        } else {
            Op::Sub { a, b }
        };
        Ok(self.push(node, shape, values))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|v| c * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Scale { x, c }, shape, values)
    }

    /// Elementwise product with a constant vector; gradient flows into x only.
    pub fn mul_const_vec(&mut self, x: TensorId, c: &[f64]) -> Result<TensorId> {
        if self.nodes[x.0].values.len() != c.len() {
            return Err(GdError::dimension(
                "mul_const_vec",
                format!("{} vs {}", self.nodes[x.0].values.len(), c.len()),
            ));
        }
        let values: Vec<f64> = self.nodes[x.0]
            .values
            .iter()
            .zip(c)
            .map(|(v, k)| v * k)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::MulConstVec { x, c: c.to_vec() }, shape, values))
    }

    /// Scalar sum of every element.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x.0].values.iter().sum();
        self.push(Op::SumAll { x }, vec![1], vec![s])
    }

    /// Elementwise square root.
    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v.sqrt()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Sqrt { x }, shape, values)
    }

    /// Per-channel affine y = a ⊙ x + b, with gradients into x, a and b.
    pub fn affine_rows(&mut self, x: TensorId, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "affine_rows")?;
        if self.nodes[a.0].values.len() != n || self.nodes[b.0].values.len() != n {
            return Err(GdError::dimension(
                "affine_rows",
                format!(
                    "coefficient widths {}/{} vs {n}",
                    self.nodes[a.0].values.len(),
                    self.nodes[b.0].values.len()
                ),
            ));
        }
        let mut values = vec![0.0; m * n];
        {
            let xs = &self.nodes[x.0].values;
            let av = &self.nodes[a.0].values;
            let bv = &self.nodes[b.0].values;
            for r in 0..m {
                for c in 0..n {
                    values[r * n + c] = av[c] * xs[r * n + c] + bv[c];
                }
            }
        }
        Ok(self.push(Op::AffineRows { x, a, b }, vec![m, n], values))
    }

    /// Train-mode batch normalization over rows: per-channel batch mean and
    /// biased variance, then scale/shift by gamma/beta. Gradients flow into
    /// x, gamma and beta, including through the batch statistics.
    pub fn bn_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (b, c) = self.dims2(x, "bn_train")?;
        if b < 2 {
            return Err(GdError::DegenerateBatch(format!(
                "batch statistics need B >= 2, got B = {b}"
            )));
        }
        if self.nodes[gamma.0].values.len() != c || self.nodes[beta.0].values.len() != c {
            return Err(GdError::dimension(
                "bn_train",
                format!("gamma/beta width vs {c} channels"),
            ));
        }
        let xs = &self.nodes[x.0].values;
        let mut mean = vec![0.0; c];
        for r in 0..b {
            for j in 0..c {
                mean[j] += xs[r * c + j];
            }
        }
        for m in &mut mean {
            *m /= b as f64;
        }
        let mut var = vec![0.0; c];
        for r in 0..b {
            for j in 0..c {
                let d = xs[r * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= b as f64;
        }
        let gv = &self.nodes[gamma.0].values;
        let bv = &self.nodes[beta.0].values;
        let mut values = vec![0.0; b * c];
        for r in 0..b {
            for j in 0..c {
                let xhat = (xs[r * c + j] - mean[j]) / (var[j] + eps).sqrt();
                values[r * c + j] = gv[j] * xhat + bv[j];
            }
        }
        Ok(self.push(
            Op::BnTrain {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
            },
            vec![b, c],
            values,
        ))
    }

    pub fn mean_over(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        self.check_over_inputs(xs, "mean_over")?;
        let slices: Vec<&[f64]> = xs
            .iter()
            .map(|id| self.nodes[id.0].values.as_slice())
            .collect();
        let values = mean_over_slices(&slices);
        let shape = self.nodes[xs[0].0].shape.clone();
        Ok(self.push(Op::MeanOver { xs: xs.to_vec() }, shape, values))
    }

    pub fn var_over(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        self.check_over_inputs(xs, "var_over")?;
        let slices: Vec<&[f64]> = xs
            .iter()
            .map(|id| self.nodes[id.0].values.as_slice())
            .collect();
        let mean = mean_over_slices(&slices);
        let values = var_over_slices(&slices, &mean);
        let shape = self.nodes[xs[0].0].shape.clone();
        Ok(self.push(Op::VarOver { xs: xs.to_vec() }, shape, values))
    }

    fn check_over_inputs(&self, xs: &[TensorId], op: &'static str) -> Result<()> {
        if xs.is_empty() {
            return Err(GdError::contract(format!("{op} over zero inputs")));
        }
        let shape = &self.nodes[xs[0].0].shape;
        if xs.iter().any(|id| &self.nodes[id.0].shape != shape) {
            return Err(GdError::dimension(op, "inputs must share one shape"));
        }
        Ok(())
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_xent(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let (b, n) = self.dims2(logits, "softmax_xent")?;
        if labels.len() != b {
            return Err(GdError::dimension(
                "softmax_xent",
                format!("{} labels for {b} rows", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= n) {
            return Err(GdError::Index(format!(
                "label {bad} out of range for {n} classes"
            )));
        }
        let z = &self.nodes[logits.0].values;
        let mut probs = vec![0.0; b * n];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &z[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                probs[r * n + j] /= denom;
            }
            // lse - z_y, stabilized
            loss += denom.ln() + max - row[labels[r]];
        }
        loss /= b as f64;
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
        ))
    }

    /// Batch-hard triplet loss: for each anchor, the hardest positive is the
    /// farthest same-identity sample (self excluded) and the hardest negative
    /// the closest different-identity sample; hinge at `margin`, mean over
    /// the batch. Ties break toward the lowest index.
    pub fn triplet_hard(
        &mut self,
        emb: TensorId,
        labels: &[usize],
        margin: f64,
    ) -> Result<TensorId> {
        let (b, e) = self.dims2(emb, "triplet_hard")?;
        if labels.len() != b {
            return Err(GdError::dimension(
                "triplet_hard",
                format!("{} labels for {b} rows", labels.len()),
            ));
        }
        // Preconditions: >= 2 identities, every identity with >= 2 instances.
        let mut uniq: Vec<usize> = labels.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() < 2 {
            return Err(GdError::contract(
                "triplet loss needs at least 2 identities in the batch",
            ));
        }
        for id in &uniq {
            if labels.iter().filter(|&&l| l == *id).count() < 2 {
                return Err(GdError::contract(format!(
                    "identity {id} has fewer than 2 instances in the batch"
                )));
            }
        }
        let ev = &self.nodes[emb.0].values;
        let mut dist = vec![0.0; b * b];
        for i in 0..b {
            for j in (i + 1)..b {
                let mut s = 0.0;
                for k in 0..e {
                    let d = ev[i * e + k] - ev[j * e + k];
                    s += d * d;
                }
                let d = s.sqrt();
                dist[i * b + j] = d;
                dist[j * b + i] = d;
            }
        }
        let mut hardest_pos = vec![0usize; b];
        let mut hardest_neg = vec![0usize; b];
        let mut active = vec![false; b];
        let mut loss = 0.0;
        for i in 0..b {
            let mut dp = f64::NEG_INFINITY;
            let mut dn = f64::INFINITY;
            for j in 0..b {
                if j == i {
                    continue;
                }
                let d = dist[i * b + j];
                if labels[j] == labels[i] {
                    if d > dp {
                        dp = d;
                        hardest_pos[i] = j;
                    }
                } else if d < dn {
                    dn = d;
                    hardest_neg[i] = j;
                }
            }
            let hinge = dp - dn + margin;
            if hinge > 0.0 {
                active[i] = true;
                loss += hinge;
            }
        }
        loss /= b as f64;
        Ok(self.push(
            Op::TripletHard {
                emb,
                hardest_pos,
                hardest_neg,
                dist,
                active,
            },
            vec![1],
            vec![loss],
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    fn add_grad(&mut self, id: TensorId, contribution: &[f64]) {
        let g = &mut self.nodes[id.0].grad;
        debug_assert_eq!(g.len(), contribution.len());
        for (gi, ci) in g.iter_mut().zip(contribution) {
            *gi += ci;
        }
    }

    /// Populate gradients of every node reachable from `loss`.
    ///
    /// All gradient buffers are reset first, so calling backward twice on
    /// the same tape produces identical gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(GdError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = self.nodes[i].grad.clone();
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { x, w } => {
                    let (m, k) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let n = self.nodes[w.0].shape[1];
                    // dX = dY W^T
                    let wv = &self.nodes[w.0].values;
                    let mut wt = vec![0.0; n * k];
                    for p in 0..k {
                        for q in 0..n {
                            wt[q * k + p] = wv[p * n + q];
                        }
                    }
                    let dx = matmul(&g, &wt, m, n, k);
                    // dW = X^T dY
                    let xv = &self.nodes[x.0].values;
                    let mut xt = vec![0.0; k * m];
                    for r in 0..m {
                        for p in 0..k {
                            xt[p * m + r] = xv[r * k + p];
                        }
                    }
                    let dw = matmul(&xt, &g, k, m, n);
                    self.add_grad(x, &dx);
                    self.add_grad(w, &dw);
                }
                Op::AddBiasRow { x, bias } => {
                    let (m, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    self.add_grad(x, &g);
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            db[c] += g[r * n + c];
                        }
                    }
                    self.add_grad(bias, &db);
                }
                Op::Relu { x } => {
                    let dx: Vec<f64> = self.nodes[x.0]
                        .values
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                        .collect();
                    self.add_grad(x, &dx);
                }
                Op::Add { a, b } => {
                    self.add_grad(a, &g);
                    self.add_grad(b, &g);
                }
                Op::Sub { a, b } => {
                    self.add_grad(a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.add_grad(b, &neg);
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = g.iter().map(|v| c * v).collect();
                    self.add_grad(x, &dx);
                }
                Op::MulConstVec { x, c } => {
                    let dx: Vec<f64> = g.iter().zip(&c).map(|(gi, ci)| gi * ci).collect();
                    self.add_grad(x, &dx);
                }
                Op::Sqrt { x } => {
                    let dx: Vec<f64> = self.nodes[x.0]
                        .values
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gi)| if v > 0.0 { gi / (2.0 * v.sqrt()) } else { 0.0 })
                        .collect();
                    self.add_grad(x, &dx);
                }
                Op::SumAll { x } => {
                    let dx = vec![g[0]; self.nodes[x.0].values.len()];
                    self.add_grad(x, &dx);
                }
                Op::AffineRows { x, a, b } => {
                    let (m, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let xv = self.nodes[x.0].values.clone();
                    let av = &self.nodes[a.0].values;
                    let mut dx = vec![0.0; m * n];
                    let mut da = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            let gi = g[r * n + c];
                            dx[r * n + c] = gi * av[c];
                            da[c] += gi * xv[r * n + c];
                            db[c] += gi;
                        }
                    }
                    self.add_grad(x, &dx);
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::BnTrain {
                    x,
                    gamma,
                    beta,
                    eps,
                    mean,
                    var,
                } => {
                    let (b, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let xv = self.nodes[x.0].values.clone();
                    let gv = &self.nodes[gamma.0].values;
                    let bf = b as f64;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                    for r in 0..b {
                        for j in 0..c {
                            let gi = g[r * c + j];
                            let xhat = (xv[r * c + j] - mean[j]) * inv_std[j];
                            dgamma[j] += gi * xhat;
                            dbeta[j] += gi;
                            sum_g[j] += gi;
                            sum_gx[j] += gi * xhat;
                        }
                    }
                    let mut dx = vec![0.0; b * c];
                    for r in 0..b {
                        for j in 0..c {
                            let gi = g[r * c + j];
                            let xhat = (xv[r * c + j] - mean[j]) * inv_std[j];
                            dx[r * c + j] =
                                gv[j] * inv_std[j] * (gi - sum_g[j] / bf - xhat * sum_gx[j] / bf);
                        }
                    }
                    self.add_grad(x, &dx);
                    self.add_grad(gamma, &dgamma);
                    self.add_grad(beta, &dbeta);
                }
                Op::MeanOver { xs } => {
                    let k = xs.len() as f64;
                    let dx: Vec<f64> = g.iter().map(|v| v / k).collect();
                    for id in xs {
                        self.add_grad(id, &dx);
                    }
                }
                Op::VarOver { xs } => {
                    // d/dx_j [(1/K) Σ_k (x_k - M)^2] = (2/K)(x_j - M); the
                    // cross term through M vanishes identically because the
                    // deviations sum to zero.
                    let k = xs.len() as f64;
                    let slices: Vec<&[f64]> = xs
                        .iter()
                        .map(|id| self.nodes[id.0].values.as_slice())
                        .collect();
                    let mean = mean_over_slices(&slices);
                    let contributions: Vec<Vec<f64>> = xs
                        .iter()
                        .map(|id| {
                            self.nodes[id.0]
                                .values
                                .iter()
                                .zip(&mean)
                                .zip(&g)
                                .map(|((v, m), gi)| gi * 2.0 / k * (v - m))
                                .collect()
                        })
                        .collect();
                    for (id, dx) in xs.iter().zip(contributions) {
                        self.add_grad(*id, &dx);
                    }
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    probs,
                } => {
                    let (b, n) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                    let g0 = g[0];
                    let mut dz = vec![0.0; b * n];
                    for r in 0..b {
                        for j in 0..n {
                            let onehot = if labels[r] == j { 1.0 } else { 0.0 };
                            dz[r * n + j] = g0 * (probs[r * n + j] - onehot) / b as f64;
                        }
                    }
                    self.add_grad(logits, &dz);
                }
                Op::TripletHard {
                    emb,
                    hardest_pos,
                    hardest_neg,
                    dist,
                    active,
                    ..
                } => {
                    let (b, e) = (self.nodes[emb.0].shape[0], self.nodes[emb.0].shape[1]);
                    let ev = self.nodes[emb.0].values.clone();
                    let g0 = g[0] / b as f64;
                    let mut de = vec![0.0; b * e];
                    let add_pair = |de: &mut Vec<f64>, i: usize, j: usize, coeff: f64| {
                        let d = dist[i * b + j];
                        if d == 0.0 {
                            return; // subgradient 0 at coincident embeddings
                        }
                        for k in 0..e {
                            let diff = (ev[i * e + k] - ev[j * e + k]) / d;
                            de[i * e + k] += coeff * diff;
                            de[j * e + k] -= coeff * diff;
                        }
                    };
                    for i in 0..b {
                        if !active[i] {
                            continue;
                        }
                        add_pair(&mut de, i, hardest_pos[i], g0);
                        add_pair(&mut de, i, hardest_neg[i], -g0);
                    }
                    self.add_grad(emb, &de);
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.grad.iter().any(|v| !v.is_finite()) {
                return Err(GdError::NonFinite(format!("gradient of node {i}")));
            }
        }
        Ok(())
    }

    /// Error unless every value on the tape is finite.
    pub fn check_finite(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.values.iter().any(|v| !v.is_finite()) {
                return Err(GdError::NonFinite(format!("values of node {i}")));
            }
        }
        Ok(())
    }
}
