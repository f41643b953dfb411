use std::borrow::Cow;
use std::fmt;

use super::gemm::{gemm, MatRef};
use super::{check_finite, numel, Result, Tensor, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom`]: receives the output gradient and the
/// input values, returns one gradient buffer per input.
pub type CustomBackward = Box<dyn Fn(&[f64], &[&[f64]]) -> Vec<Vec<f64>>>;

/// Batch layout for multi-head scaled dot-product attention.
///
/// Queries are `batch * q_len` rows and keys/values `batch * k_len` rows, each
/// example padded to the common length. Only the first `q_valid[b]` query rows
/// and `k_valid[b]` key rows of example `b` take part; padded query rows
/// produce zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub q_valid: Vec<usize>,
    pub k_valid: Vec<usize>,
    pub heads: usize,
    pub causal: bool,
}

enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sum(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    LogSoftmax(Var),
    PickNll {
        logp: Var,
        targets: Vec<usize>,
        valid: Vec<bool>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sum(..) => "sum",
            Op::Embedding { .. } => "embedding",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::LogSoftmax(..) => "log_softmax",
            Op::PickNll { .. } => "per_token_nll",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Custom { .. } => "custom",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Tanh(a) | Op::Sum(a) | Op::LogSoftmax(a) => {
                vec![*a]
            }
            Op::Embedding { table, .. } => vec![*table],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::PickNll { logp, .. } => vec![*logp],
            Op::WeightedSum { x, .. } => vec![*x],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Leaves may borrow parameter tensors for the lifetime `'a`, so a tape is
/// typically built, differentiated and dropped within one training step.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl fmt::Debug for Tape<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
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

    /// Adds the gradient of `var` into `tensor`'s grad buffer. A var that
    /// received no gradient contributes zeros.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![0.0; tensor.numel()]),
        }
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True when every node's parents were recorded before it.
    pub fn is_topological(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.op.parents().iter().all(|p| p.0 < i))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a node out as a standalone tensor (no gradient attached).
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("tape values are finite")
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Cow<'a, [f64]>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        check_finite(op.name(), &value)?;
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents_need_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf that borrows `t`. Gradient flows to it iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            Op::Leaf,
            t.requires_grad(),
        )
        .expect("tensors are finite by construction")
    }

    /// Records an owned leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let Tensor { shape, data, .. } = t;
        self.push(shape, Cow::Owned(data), Op::Leaf, rg)
            .expect("tensors are finite by construction")
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        self.push(shape, Cow::Owned(data), Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = sa.to_vec();
        let ng = self.parents_need_grad(&[a, b]);
        self.push(shape, Cow::Owned(out), Op::Add(a, b), ng)
    }

    /// `x[..., n] + b[n]`, broadcasting `b` over leading dimensions.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let n = last_dim(sx);
        if sb.len() != 1 || sb[0] != n {
            return Err(shape_err("add_bias", sx, sb));
        }
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(v, c)| v + c))
            .collect();
        let shape = sx.to_vec();
        let ng = self.parents_need_grad(&[x, b]);
        self.push(shape, Cow::Owned(out), Op::AddBias(x, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = sa.to_vec();
        let ng = self.parents_need_grad(&[a, b]);
        self.push(shape, Cow::Owned(out), Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.parents_need_grad(&[a]);
        self.push(shape, Cow::Owned(out), Op::Scale(a, c), ng)
    }

    /// `[m x k] * [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a), m, k),
            MatRef::new(self.value(b), k, n),
            0.0,
            &mut out,
        );
        let ng = self.parents_need_grad(&[a, b]);
        self.push(vec![m, n], Cow::Owned(out), Op::MatMul(a, b), ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.parents_need_grad(&[a]);
        self.push(shape, Cow::Owned(out), Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.parents_need_grad(&[a]);
        self.push(shape, Cow::Owned(out), Op::Tanh(a), ng)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).iter().sum();
        let ng = self.parents_need_grad(&[a]);
        self.push(Vec::new(), Cow::Owned(vec![s]), Op::Sum(a), ng)
    }

    /// Row lookup: `table[V x d]` gathered by `ids` into `[ids.len() x d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(shape_err("embedding", st, &[ids.len()]));
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Index {
                op: "embedding",
                index: bad,
                bound: vocab,
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.parents_need_grad(&[table]);
        self.push(
            vec![ids.len(), d],
            Cow::Owned(out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = last_dim(&sx);
        for p in [gain, bias] {
            let sp = self.shape(p);
            if sp.len() != 1 || sp[0] != n {
                return Err(shape_err("layer_norm", &sx, sp));
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let ng = self.parents_need_grad(&[x, gain, bias]);
        self.push(
            sx,
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention without projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        let d = last_dim(sq);
        let ok = sq.len() == 2
            && sk.len() == 2
            && sk == sv
            && sk[1] == d
            && layout.heads > 0
            && d % layout.heads == 0
            && sq[0] == layout.batch * layout.q_len
            && sk[0] == layout.batch * layout.k_len
            && layout.q_valid.len() == layout.batch
            && layout.k_valid.len() == layout.batch
            && layout.q_valid.iter().all(|&n| n <= layout.q_len)
            && layout.k_valid.iter().all(|&n| n >= 1 && n <= layout.k_len);
        if !ok {
            return Err(shape_err("attention", sq, sk));
        }
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let h = layout.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk) = (layout.q_len, layout.k_len);
        let mut probs = vec![0.0; layout.batch * h * tq * tk];
        let mut out = vec![0.0; layout.batch * tq * d];
        let mut scores = vec![0.0; tk];
        for b in 0..layout.batch {
            for head in 0..h {
                let off = head * dh;
                for i in 0..layout.q_valid[b] {
                    let qrow = &qv[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                    let kmax = key_limit(&layout, b, i);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..kmax {
                        let krow = &kv[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                        let s = dot(qrow, krow) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for s in &mut scores[..kmax] {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let pbase = ((b * h + head) * tq + i) * tk;
                    let orow = (b * tq + i) * d + off;
                    for j in 0..kmax {
                        let p = scores[j] / z;
                        probs[pbase + j] = p;
                        let vrow = &vv[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                        for c in 0..dh {
                            out[orow + c] += p * vrow[c];
                        }
                    }
                }
            }
        }
        let shape = vec![layout.batch * tq, d];
        let ng = self.parents_need_grad(&[q, k, v]);
        self.push(
            shape,
            Cow::Owned(out),
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            ng,
        )
    }

    /// Max-subtracted log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = last_dim(&shape);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for (row, orow) in xv.chunks(n).zip(out.chunks_mut(n)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in orow.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let ng = self.parents_need_grad(&[x]);
        self.push(shape, Cow::Owned(out), Op::LogSoftmax(x), ng)
    }

    /// Negative log-likelihood of `targets` under `log_probs[T x V]`.
    /// Positions with `valid[t] == false` yield 0 and receive no gradient.
    pub fn pick_nll(&mut self, log_probs: Var, targets: &[usize], valid: &[bool]) -> Result<Var> {
        let s = self.shape(log_probs);
        if s.len() != 2 || s[0] != targets.len() || valid.len() != targets.len() {
            return Err(shape_err("per_token_nll", s, &[targets.len(), valid.len()]));
        }
        let v = s[1];
        let lp = self.value(log_probs);
        let mut out = vec![0.0; targets.len()];
        for (t, (&id, &ok)) in targets.iter().zip(valid).enumerate() {
            if !ok {
                continue;
            }
            if id >= v {
                return Err(TensorError::Index {
                    op: "per_token_nll",
                    index: id,
                    bound: v,
                });
            }
            // -(-0.0) would print oddly; keep exact zeros positive.
            out[t] = 0.0 - lp[t * v + id];
        }
        let ng = self.parents_need_grad(&[log_probs]);
        self.push(
            vec![targets.len()],
            Cow::Owned(out),
            Op::PickNll {
                logp: log_probs,
                targets: targets.to_vec(),
                valid: valid.to_vec(),
            },
            ng,
        )
    }

    /// Per-token negative log-likelihood `l_j = -log_softmax(logits_j)[target_j]`.
    pub fn per_token_nll(&mut self, logits: Var, targets: &[usize], valid: &[bool]) -> Result<Var> {
        let lp = self.log_softmax(logits)?;
        self.pick_nll(lp, targets, valid)
    }

    /// Scalar `sum_i w_i * x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let sx = self.shape(x);
        if numel(sx) != weights.len() {
            return Err(shape_err("weighted_sum", sx, &[weights.len()]));
        }
        check_finite("weighted_sum", weights)?;
        let s: f64 = self.value(x).iter().zip(weights).map(|(a, w)| a * w).sum();
        let ng = self.parents_need_grad(&[x]);
        self.push(
            Vec::new(),
            Cow::Owned(vec![s]),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            ng,
        )
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<f64>,
        backward: CustomBackward,
    ) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(TensorError::DataLength {
                shape,
                len: value.len(),
            });
        }
        let ng = self.parents_need_grad(inputs);
        self.push(
            shape,
            Cow::Owned(value),
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar `loss`. Each node is visited once, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if numel(self.shape(loss)) != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for g in grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        // Returns the gradient slot for `v` if it participates in backprop.
        fn slot<'g>(
            nodes: &[Node<'_>],
            grads: &'g mut [Option<Vec<f64>>],
            v: Var,
        ) -> Option<&'g mut Vec<f64>> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            let n = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
        }
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = slot(nodes, grads, v) {
                        add_into(s, g);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    add_into(s, g);
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    let n = s.len();
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(s) = slot(nodes, grads, *a) {
                    for ((d, gi), bi) in s.iter_mut().zip(g).zip(bv.iter()) {
                        *d += gi * bi;
                    }
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    for ((d, gi), ai) in s.iter_mut().zip(g).zip(av.iter()) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = slot(nodes, grads, *a) {
                    for (d, gi) in s.iter_mut().zip(g) {
                        *d += gi * c;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(s) = slot(nodes, grads, *a) {
                    // dA += dC * B^T
                    gemm(
                        MatRef::new(g, m, n),
                        MatRef::transposed(bv, k, n),
                        1.0,
                        s,
                    );
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    // dB += A^T * dC
                    gemm(
                        MatRef::transposed(av, m, k),
                        MatRef::new(g, m, n),
                        1.0,
                        s,
                    );
                }
            }
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                if let Some(s) = slot(nodes, grads, *a) {
                    for ((d, gi), x) in s.iter_mut().zip(g).zip(av.iter()) {
                        if *x > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                let out = &node.value;
                if let Some(s) = slot(nodes, grads, *a) {
                    for ((d, gi), y) in s.iter_mut().zip(g).zip(out.iter()) {
                        *d += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(s) = slot(nodes, grads, *a) {
                    s.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(s) = slot(nodes, grads, *table) {
                    let d = nodes[table.0].shape[1];
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = nodes[gain.0].value.len();
                let gv = &nodes[gain.0].value;
                if let Some(s) = slot(nodes, grads, *gain) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            s[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if let Some(s) = slot(nodes, grads, *bias) {
                    for grow in g.chunks(n) {
                        add_into(s, grow);
                    }
                }
                if let Some(s) = slot(nodes, grads, *x) {
                    let nf = n as f64;
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..n {
                            let dh = grow[c] * gv[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[c];
                        }
                        mean_dh /= nf;
                        mean_dh_h /= nf;
                        let srow = &mut s[r * n..(r + 1) * n];
                        for c in 0..n {
                            let dh = grow[c] * gv[c];
                            srow[c] += rstd[r] * (dh - mean_dh - hrow[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                self.attention_backward(g, *q, *k, *v, layout, probs, grads);
            }
            Op::LogSoftmax(x) => {
                let n = last_dim(&node.shape);
                let y = &node.value;
                if let Some(s) = slot(nodes, grads, *x) {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let total: f64 = grow.iter().sum();
                        for c in 0..n {
                            srow[c] += grow[c] - yrow[c].exp() * total;
                        }
                    }
                }
            }
            Op::PickNll {
                logp,
                targets,
                valid,
            } => {
                let v = nodes[logp.0].shape[1];
                if let Some(s) = slot(nodes, grads, *logp) {
                    for (t, (&id, &ok)) in targets.iter().zip(valid).enumerate() {
                        if ok {
                            s[t * v + id] -= g[t];
                        }
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    for (d, w) in s.iter_mut().zip(weights) {
                        *d += g[0] * w;
                    }
                }
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&[f64]> = inputs.iter().map(|v| &*nodes[v.0].value).collect();
                let gs = backward(g, &values);
                if gs.len() != inputs.len() {
                    return Err(TensorError::Contract(
                        "custom backward returned wrong number of gradients".into(),
                    ));
                }
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(s) = slot(nodes, grads, *v) {
                        if gi.len() != s.len() {
                            return Err(TensorError::Contract(
                                "custom backward returned gradient of wrong size".into(),
                            ));
                        }
                        add_into(s, &gi);
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let d = nodes[q.0].shape[1];
        let h = layout.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk) = (layout.q_len, layout.k_len);
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; tk];
        for b in 0..layout.batch {
            for head in 0..h {
                let off = head * dh;
                for i in 0..layout.q_valid[b] {
                    let kmax = key_limit(layout, b, i);
                    let pbase = ((b * h + head) * tq + i) * tk;
                    let p = &probs[pbase..pbase + kmax];
                    let grow = &g[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                    let mut pdp = 0.0;
                    for j in 0..kmax {
                        let vrow = (b * tk + j) * d + off;
                        dp[j] = dot(grow, &vv[vrow..vrow + dh]);
                        pdp += p[j] * dp[j];
                        for c in 0..dh {
                            dv[vrow + c] += p[j] * grow[c];
                        }
                    }
                    let qrow = (b * tq + i) * d + off;
                    for j in 0..kmax {
                        let ds = p[j] * (dp[j] - pdp) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = (b * tk + j) * d + off;
                        for c in 0..dh {
                            dq[qrow + c] += ds * kv[krow + c];
                            dk[krow + c] += ds * qv[qrow + c];
                        }
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if nodes[var.0].needs_grad {
                let n = nodes[var.0].value.len();
                add_into(grads[var.0].get_or_insert_with(|| vec![0.0; n]), &delta);
            }
        }
    }
}

fn key_limit(layout: &AttnLayout, b: usize, i: usize) -> usize {
    if layout.causal {
        layout.k_valid[b].min(i + 1)
    } else {
        layout.k_valid[b]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let a = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
        let c = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_fn(vec![3, 4], |i| i as f64 * 0.37 - 1.0).unwrap();
        let eye = Tensor::from_fn(vec![4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }).unwrap();
        let mut tape = Tape::new();
        let (va, vi) = (tape.leaf(&a), tape.leaf(&eye));
        let c = tape.matmul(va, vi).unwrap();
        assert_eq!(tape.value(c), a.data());
    }

    #[test]
    fn matmul_dimension_error_names_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(&a), tape.leaf(&a));
        let err = tape.matmul(va, vb).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn log_softmax_uniform_and_stable() {
        let x = t(vec![2, 4], vec![0.0, 0.0, 0.0, 0.0, 1000.0, 0.0, 0.0, 0.0]);
        let mut tape = Tape::new();
        let vx = tape.leaf(&x);
        let y = tape.log_softmax(vx).unwrap();
        let out = tape.value(y);
        for v in &out[..4] {
            assert!((v - (0.25f64).ln()).abs() < 1e-15);
        }
        assert_eq!(out[4], 0.0);
        assert!((out[5] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn log_softmax_two_entry_stability() {
        let x = t(vec![1, 2], vec![1000.0, 0.0]);
        let mut tape = Tape::new();
        let vx = tape.leaf(&x);
        let y = tape.log_softmax(vx).unwrap();
        assert!(tape.value(y)[0].abs() < 1e-300);
        assert!((tape.value(y)[1] + 1000.0).abs() < 1e-12);
    }

    #[test]
    fn nll_uniform_and_index_error() {
        let x = Tensor::zeros(vec![3, 10]);
        let mut tape = Tape::new();
        let vx = tape.leaf(&x);
        let l = tape
            .per_token_nll(vx, &[1, 4, 0], &[true, true, false])
            .unwrap();
        let v = tape.value(l);
        assert!((v[0] - 10f64.ln()).abs() < 1e-15);
        assert!((v[1] - 10f64.ln()).abs() < 1e-15);
        assert_eq!(v[2], 0.0);
        let err = tape.per_token_nll(vx, &[1, 10, 0], &[true; 3]).unwrap_err();
        assert!(matches!(err, TensorError::Index { index: 10, .. }));
    }

    #[test]
    fn nll_certainty_limit() {
        let x = t(vec![1, 3], vec![-800.0, 800.0, -800.0]);
        let mut tape = Tape::new();
        let vx = tape.leaf(&x);
        let l = tape.per_token_nll(vx, &[1], &[true]).unwrap();
        assert!(tape.value(l)[0] >= 0.0 && tape.value(l)[0] < 1e-300);
    }

    #[test]
    fn backward_linear_and_square() {
        let w = t(vec![3], vec![1.0, 2.0, 3.0]).with_grad();
        let mut tape = Tape::new();
        let vw = tape.leaf(&w);
        let s = tape.sum(vw).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(vw).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let vw = tape.leaf(&w);
        let sq = tape.mul(vw, vw).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(vw).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let w = t(vec![3], vec![1.0, 2.0, 3.0]).with_grad();
        let mut tape = Tape::new();
        let vw = tape.leaf(&w);
        assert!(matches!(
            tape.backward(vw),
            Err(TensorError::Contract(_))
        ));
    }

    #[test]
    fn repeated_backward_accumulates_into_leaf() {
        let mut w = t(vec![2], vec![1.5, -2.0]).with_grad();
        let grads = {
            let mut tape = Tape::new();
            let vw = tape.leaf(&w);
            let sq = tape.mul(vw, vw).unwrap();
            let s = tape.sum(sq).unwrap();
            let g = tape.backward(s).unwrap();
            g.get(vw).unwrap().to_vec()
        };
        w.accumulate_grad(&grads).unwrap();
        w.accumulate_grad(&grads).unwrap();
        assert_eq!(w.grad().unwrap(), &[6.0, -8.0]);
    }

    #[test]
    fn non_finite_is_reported() {
        let x = t(vec![1], vec![1e308]);
        let mut tape = Tape::new();
        let vx = tape.leaf(&x);
        let err = tape.scale(vx, 10.0).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "scale" });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let w = t(vec![2], vec![1.0, 2.0]).with_grad();
        let mut tape = Tape::new();
        let vw = tape.leaf(&w);
        let c = tape.constant(vec![2], vec![3.0, 4.0]).unwrap();
        let p = tape.mul(vw, c).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(vw).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn causal_attention_first_row_copies_first_value() {
        let q = Tensor::from_fn(vec![3, 4], |i| (i as f64).sin()).unwrap();
        let k = Tensor::from_fn(vec![3, 4], |i| (i as f64).cos()).unwrap();
        let v = Tensor::from_fn(vec![3, 4], |i| i as f64).unwrap();
        let mut tape = Tape::new();
        let (vq, vk, vv) = (tape.leaf(&q), tape.leaf(&k), tape.leaf(&v));
        let layout = AttnLayout {
            batch: 1,
            q_len: 3,
            k_len: 3,
            q_valid: vec![3],
            k_valid: vec![3],
            heads: 2,
            causal: true,
        };
        let o = tape.attention(vq, vk, vv, layout).unwrap();
        assert_eq!(&tape.value(o)[..4], &v.data()[..4]);
    }
}
