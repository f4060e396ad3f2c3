//! Dynamic compute graph with reverse-mode differentiation.
//!
//! A [`Graph`] records one forward pass and is dropped afterwards; node
//! values are immutable `Arc<Tensor>`s so model parameters enter a graph
//! without being copied. Node gradients are held in f64 and accumulate in
//! reverse recorded order, each op's internal reductions running in
//! ascending index order, so backward is deterministic and repeated
//! [`Graph::backward`] calls accumulate.

use std::sync::Arc;

use super::kernels;
use super::Tensor;
use crate::error::Error;
use crate::Result;

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Constant attention prefix: already-computed K/V slots that queries may
/// attend to but that receive no gradient. Keys and values are stored per
/// head so new slots can be appended in place during decoding.
#[derive(Debug, Clone)]
pub struct AttentionPrefix {
    pub n_heads: usize,
    pub head_dim: usize,
    /// Number of slots.
    pub len: usize,
    /// Per head, `len * head_dim` rotated key floats.
    pub k: Vec<Vec<f32>>,
    /// Per head, `len * head_dim` value floats.
    pub v: Vec<Vec<f32>>,
    /// Slots with `valid == false` (padding) are masked out of attention.
    pub valid: Vec<bool>,
}

impl AttentionPrefix {
    pub fn empty(n_heads: usize, head_dim: usize) -> Self {
        AttentionPrefix {
            n_heads,
            head_dim,
            len: 0,
            k: vec![Vec::new(); n_heads],
            v: vec![Vec::new(); n_heads],
            valid: Vec::new(),
        }
    }

    /// Append `extra` slots taken from `[H, T, D]` key/value tensors.
    pub fn append(&mut self, k: &Tensor, v: &Tensor, valid: &[bool]) {
        let (h, t, d) = (self.n_heads, valid.len(), self.head_dim);
        debug_assert_eq!(k.shape(), &[h, t, d]);
        debug_assert_eq!(v.shape(), &[h, t, d]);
        for head in 0..h {
            let base = head * t * d;
            self.k[head].extend_from_slice(&k.data()[base..base + t * d]);
            self.v[head].extend_from_slice(&v.data()[base..base + t * d]);
        }
        self.valid.extend_from_slice(valid);
        self.len += t;
    }
}

enum Op {
    Leaf,
    Embed {
        table: NodeId,
        tokens: Vec<u32>,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Silu {
        x: NodeId,
    },
    RmsNorm {
        x: NodeId,
        weight: NodeId,
        inv_rms: Vec<f64>,
    },
    Rope {
        x: NodeId,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    SplitHeads {
        x: NodeId,
        n_heads: usize,
    },
    MergeHeads {
        x: NodeId,
    },
    Transpose2D {
        x: NodeId,
    },
    SoftmaxLastDim {
        x: NodeId,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        prefix: Option<Arc<AttentionPrefix>>,
        scale: f64,
        /// Saved probabilities, `[H, T, prefix_len + T]`.
        weights: Vec<f32>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        mask: Vec<bool>,
    },
    Sum {
        x: NodeId,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// One recorded forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn ensure_grad(nodes: &mut [Node], id: NodeId) -> &mut Vec<f64> {
    let numel = nodes[id.0].value.numel();
    nodes[id.0]
        .grad
        .get_or_insert_with(|| vec![0.0f64; numel])
}

fn add_into(buf: &mut [f64], contribution: &[f64]) {
    debug_assert_eq!(buf.len(), contribution.len());
    for (b, c) in buf.iter_mut().zip(contribution) {
        *b += *c;
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Shared handle to a node's value (cheap clone).
    pub fn value_arc(&self, id: NodeId) -> Arc<Tensor> {
        self.nodes[id.0].value.clone()
    }

    /// Accumulated f64 gradient of a node, if backward reached it.
    pub fn grad_f64(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradient rounded to f32.
    pub fn grad(&self, id: NodeId) -> Option<Vec<f32>> {
        self.grad_f64(id)
            .map(|g| g.iter().map(|&v| v as f32).collect())
    }

    /// Add this graph's gradient for `id` into `tensor.grad`.
    pub fn accumulate_grad_into(&self, id: NodeId, tensor: &mut Tensor) {
        if let Some(g) = self.grad(id) {
            tensor.add_grad(&g);
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        #[cfg(debug_assertions)]
        value
            .assert_finite("graph op output")
            .expect("op produced non-finite values");
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
            grad: None,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert an owned tensor as a leaf; `requires_grad` is taken from it.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Insert a constant leaf (no gradient).
    pub fn constant(&mut self, mut t: Tensor) -> NodeId {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    /// Insert a shared parameter tensor without copying its data.
    pub fn param(&mut self, t: &Arc<Tensor>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: t.clone(),
            op: Op::Leaf,
            needs_grad: t.requires_grad,
            grad: None,
        });
        id
    }

    /// Row gather: `table[V, H]` indexed by `tokens` gives `[T, H]`.
    pub fn embed(&mut self, table: NodeId, tokens: &[u32]) -> Result<NodeId> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::shapes("embed", tv.shape(), &[tokens.len()]));
        }
        let (vocab, hidden) = (tv.shape()[0], tv.shape()[1]);
        for &tok in tokens {
            if tok as usize >= vocab {
                return Err(Error::Vocabulary {
                    id: tok,
                    vocab_size: vocab,
                });
            }
        }
        let mut data = vec![0.0f32; tokens.len() * hidden];
        for (t, &tok) in tokens.iter().enumerate() {
            let row = &tv.data()[tok as usize * hidden..(tok as usize + 1) * hidden];
            data[t * hidden..(t + 1) * hidden].copy_from_slice(row);
        }
        let needs = self.needs(table);
        let value = Tensor::new(vec![tokens.len(), hidden], data)?;
        Ok(self.push(
            value,
            Op::Embed {
                table,
                tokens: tokens.to_vec(),
            },
            needs,
        ))
    }

    /// Matrix product with the documented batch rules: `[M,K] @ [K,P]`,
    /// `[B,M,K] @ [B,K,P]`, or `[B,M,K] @ [K,P]`. Anything else is a shape
    /// error naming both shapes.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ashape, bshape) = (
            self.value(a).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        let (batch, m, k, p, out_shape) = match (ashape.len(), bshape.len()) {
            (2, 2) if ashape[1] == bshape[0] => (
                1,
                ashape[0],
                ashape[1],
                bshape[1],
                vec![ashape[0], bshape[1]],
            ),
            (3, 3) if ashape[0] == bshape[0] && ashape[2] == bshape[1] => (
                ashape[0],
                ashape[1],
                ashape[2],
                bshape[2],
                vec![ashape[0], ashape[1], bshape[2]],
            ),
            (3, 2) if ashape[2] == bshape[0] => (
                ashape[0],
                ashape[1],
                ashape[2],
                bshape[1],
                vec![ashape[0], ashape[1], bshape[1]],
            ),
            _ => return Err(Error::shapes("matmul", &ashape, &bshape)),
        };
        let (av, bv) = (self.value_arc(a), self.value_arc(b));
        let b_batched = bshape.len() == 3;
        let mut out = vec![0.0f32; batch * m * p];
        for bi in 0..batch {
            let a_sl = &av.data()[bi * m * k..(bi + 1) * m * k];
            let b_sl = if b_batched {
                &bv.data()[bi * k * p..(bi + 1) * k * p]
            } else {
                bv.data()
            };
            kernels::matmul_2d(a_sl, b_sl, m, k, p, &mut out[bi * m * p..(bi + 1) * m * p]);
        }
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Matmul { a, b }, needs))
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shapes(
                "add",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, needs))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shapes(
                "mul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, needs))
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let data: Vec<f32> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                let v = v as f64;
                (v / (1.0 + (-v).exp())) as f32
            })
            .collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Silu { x }, needs))
    }

    /// `x * weight / sqrt(mean(x^2) + eps)` over the last dimension.
    pub fn rms_norm(&mut self, x: NodeId, weight: NodeId, eps: f64) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let d = *xs.last().ok_or_else(|| {
            Error::Contract("rms_norm requires at least one dimension".into())
        })?;
        if self.value(weight).shape() != [d] {
            return Err(Error::shapes("rms_norm", &xs, self.value(weight).shape()));
        }
        if eps <= 0.0 && d == 0 {
            return Err(Error::Contract("rms_norm needs d >= 1".into()));
        }
        let rows = self.value(x).numel() / d;
        let xd = self.value_arc(x);
        let wd = self.value_arc(weight);
        let mut out = vec![0.0f32; rows * d];
        let mut inv_rms = vec![0.0f64; rows];
        for r in 0..rows {
            let row = &xd.data()[r * d..(r + 1) * d];
            let mut ss = 0.0f64;
            for &v in row {
                let v = v as f64;
                ss += v * v;
            }
            let inv = 1.0 / (ss / d as f64 + eps).sqrt();
            inv_rms[r] = inv;
            for (j, (&v, &w)) in row.iter().zip(wd.data()).enumerate() {
                out[r * d + j] = (v as f64 * inv * w as f64) as f32;
            }
        }
        let needs = self.needs(x) || self.needs(weight);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::RmsNorm {
                x,
                weight,
                inv_rms,
            },
            needs,
        ))
    }

    /// Rotate adjacent coordinate pairs of a `[H, T, D]` tensor by
    /// `position * base^(-2i/D)` radians. Position 0 is the identity.
    pub fn rope(&mut self, x: NodeId, positions: &[usize], base: f64) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 || xs[2] % 2 != 0 {
            return Err(Error::Contract(format!(
                "rope expects [H, T, D] with even D, got {xs:?}"
            )));
        }
        if xs[1] != positions.len() {
            return Err(Error::Contract(format!(
                "rope got {} positions for sequence length {}",
                positions.len(),
                xs[1]
            )));
        }
        let (h, t, d) = (xs[0], xs[1], xs[2]);
        let (cos, sin) = kernels::rope_tables(positions, d, base);
        let xd = self.value_arc(x);
        let mut out = vec![0.0f32; xd.numel()];
        kernels::rope_apply(xd.data(), h, t, d, &cos, &sin, false, &mut out);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(xs, out)?, Op::Rope { x, cos, sin }, needs))
    }

    /// `[T, H*D] -> [H, T, D]`.
    pub fn split_heads(&mut self, x: NodeId, n_heads: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] % n_heads != 0 {
            return Err(Error::Contract(format!(
                "split_heads expects [T, H*D] divisible by {n_heads} heads, got {xs:?}"
            )));
        }
        let (t, d) = (xs[0], xs[1] / n_heads);
        let xd = self.value_arc(x);
        let mut out = vec![0.0f32; xd.numel()];
        for tt in 0..t {
            for h in 0..n_heads {
                let src = tt * n_heads * d + h * d;
                let dst = (h * t + tt) * d;
                out[dst..dst + d].copy_from_slice(&xd.data()[src..src + d]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![n_heads, t, d], out)?,
            Op::SplitHeads { x, n_heads },
            needs,
        ))
    }

    /// `[H, T, D] -> [T, H*D]`; inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::Contract(format!(
                "merge_heads expects [H, T, D], got {xs:?}"
            )));
        }
        let (h, t, d) = (xs[0], xs[1], xs[2]);
        let xd = self.value_arc(x);
        let mut out = vec![0.0f32; xd.numel()];
        for hh in 0..h {
            for tt in 0..t {
                let src = (hh * t + tt) * d;
                let dst = tt * h * d + hh * d;
                out[dst..dst + d].copy_from_slice(&xd.data()[src..src + d]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![t, h * d], out)?,
            Op::MergeHeads { x },
            needs,
        ))
    }

    pub fn transpose_2d(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Contract(format!(
                "transpose_2d expects [R, C], got {xs:?}"
            )));
        }
        let xd = self.value_arc(x);
        let mut out = vec![0.0f32; xd.numel()];
        kernels::transpose_2d(xd.data(), xs[0], xs[1], &mut out);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![xs[1], xs[0]], out)?,
            Op::Transpose2D { x },
            needs,
        ))
    }

    /// Max-subtracted softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let d = *xs.last().ok_or_else(|| {
            Error::Contract("softmax_lastdim requires at least one dimension".into())
        })?;
        if d == 0 {
            return Err(Error::Contract(
                "softmax_lastdim needs last dimension >= 1".into(),
            ));
        }
        let rows = self.value(x).numel() / d;
        let xd = self.value_arc(x);
        let mut out = vec![0.0f32; xd.numel()];
        let allowed = vec![true; d];
        let mut scores = vec![0.0f64; d];
        for r in 0..rows {
            for (s, &v) in scores.iter_mut().zip(&xd.data()[r * d..(r + 1) * d]) {
                *s = v as f64;
            }
            kernels::masked_softmax_row(&scores, &allowed, &mut out[r * d..(r + 1) * d]);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(xs, out)?, Op::SoftmaxLastDim { x }, needs))
    }

    /// Causal multi-head attention with an optional constant prefix.
    ///
    /// `q`, `k`, `v` are `[H, T, D]` (queries/keys already rotated). Row `t`
    /// attends to every valid prefix slot plus self slots `0..=t` that are
    /// valid under `self_valid` (all valid when `None`). Masked scores are
    /// forced to -1e30 before the softmax. Scores are scaled by `scale`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        prefix: Option<Arc<AttentionPrefix>>,
        self_valid: Option<Vec<bool>>,
        scale: f64,
    ) -> Result<NodeId> {
        let qs = self.value(q).shape().to_vec();
        if qs.len() != 3 {
            return Err(Error::Contract(format!(
                "attention expects [H, T, D] inputs, got {qs:?}"
            )));
        }
        if self.value(k).shape() != qs.as_slice() || self.value(v).shape() != qs.as_slice() {
            return Err(Error::shapes("attention", &qs, self.value(k).shape()));
        }
        let (h, t, d) = (qs[0], qs[1], qs[2]);
        if let Some(p) = &prefix {
            if p.n_heads != h || p.head_dim != d {
                return Err(Error::Contract(format!(
                    "attention prefix has {}x{} head layout, model has {h}x{d}",
                    p.n_heads, p.head_dim
                )));
            }
        }
        if let Some(sv) = &self_valid {
            if sv.len() != t {
                return Err(Error::Contract(format!(
                    "attention self_valid length {} != sequence length {t}",
                    sv.len()
                )));
            }
        }
        let p_len = prefix.as_ref().map_or(0, |p| p.len);
        let s_total = p_len + t;
        let (qd, kd, vd) = (self.value_arc(q), self.value_arc(k), self.value_arc(v));
        let mut out = vec![0.0f32; h * t * d];
        let mut weights = vec![0.0f32; h * t * s_total];

        let mut kt = vec![0.0f32; d * s_total];
        let mut scores = vec![0.0f64; s_total];
        let mut allowed = vec![false; s_total];
        let mut acc = vec![0.0f64; d];
        for head in 0..h {
            // Keys transposed to [D, S] so the score loop is contiguous.
            if let Some(p) = &prefix {
                let pk = &p.k[head];
                for s in 0..p_len {
                    for dd in 0..d {
                        kt[dd * s_total + s] = pk[s * d + dd];
                    }
                }
            }
            let k_self = &kd.data()[head * t * d..(head + 1) * t * d];
            for s in 0..t {
                for dd in 0..d {
                    kt[dd * s_total + p_len + s] = k_self[s * d + dd];
                }
            }
            // Prefix validity is shared by every row; self slots switch on
            // one at a time as the causal horizon advances.
            for s in 0..s_total {
                allowed[s] = if s < p_len {
                    prefix.as_ref().unwrap().valid[s]
                } else {
                    false
                };
            }
            for tt in 0..t {
                allowed[p_len + tt] = self_valid.as_ref().map_or(true, |sv| sv[tt]);
                scores.iter_mut().for_each(|s| *s = 0.0);
                let q_row = &qd.data()[(head * t + tt) * d..(head * t + tt + 1) * d];
                for (dd, &qv) in q_row.iter().enumerate() {
                    let qv = qv as f64;
                    let kt_row = &kt[dd * s_total..(dd + 1) * s_total];
                    for (sc, &kv) in scores.iter_mut().zip(kt_row) {
                        *sc += qv * kv as f64;
                    }
                }
                for (sc, &ok) in scores.iter_mut().zip(allowed.iter()) {
                    *sc = if ok { *sc * scale } else { -1e30 };
                }
                let w_row = &mut weights[(head * t + tt) * s_total..(head * t + tt + 1) * s_total];
                kernels::masked_softmax_row(&scores, &allowed, w_row);
                // Weighted value sum, ascending slot order (prefix, then self).
                acc.iter_mut().for_each(|a| *a = 0.0);
                for s in 0..p_len {
                    let pv = w_row[s] as f64;
                    let v_row = &prefix.as_ref().unwrap().v[head][s * d..(s + 1) * d];
                    for (a, &vv) in acc.iter_mut().zip(v_row) {
                        *a += pv * vv as f64;
                    }
                }
                let v_self = &vd.data()[head * t * d..(head + 1) * t * d];
                for s in 0..t {
                    let pv = w_row[p_len + s] as f64;
                    let v_row = &v_self[s * d..(s + 1) * d];
                    for (a, &vv) in acc.iter_mut().zip(v_row) {
                        *a += pv * vv as f64;
                    }
                }
                for (o, &a) in out[(head * t + tt) * d..(head * t + tt + 1) * d]
                    .iter_mut()
                    .zip(acc.iter())
                {
                    *o = a as f32;
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::new(vec![h, t, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                prefix,
                scale,
                weights,
            },
            needs,
        ))
    }

    /// Saved attention probabilities of an attention node, `[H, T, S]`.
    pub fn attention_weights(&self, id: NodeId) -> Option<Tensor> {
        match &self.nodes[id.0].op {
            Op::Attention { q, weights, .. } => {
                let qs = self.value(*q).shape();
                let (h, t) = (qs[0], qs[1]);
                let s = weights.len() / (h * t);
                Some(Tensor::new(vec![h, t, s], weights.clone()).expect("weights shape"))
            }
            _ => None,
        }
    }

    /// Mean of `-log softmax(logits)[target]` over masked-in positions;
    /// 0 when the mask is all-false. Masked-out positions are skipped
    /// entirely, so their targets can never influence the value.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<NodeId> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || ls[0] != targets.len() || ls[0] != mask.len() {
            return Err(Error::Contract(format!(
                "cross_entropy got logits {:?}, {} targets, {} mask entries",
                ls,
                targets.len(),
                mask.len()
            )));
        }
        let (t, vocab) = (ls[0], ls[1]);
        for (tok, &m) in targets.iter().zip(mask) {
            if m && *tok as usize >= vocab {
                return Err(Error::Vocabulary {
                    id: *tok,
                    vocab_size: vocab,
                });
            }
        }
        let ld = self.value_arc(logits);
        let count = mask.iter().filter(|&&m| m).count();
        let mut total = 0.0f64;
        if count > 0 {
            for tt in 0..t {
                if !mask[tt] {
                    continue;
                }
                let row = &ld.data()[tt * vocab..(tt + 1) * vocab];
                let mut max = f64::NEG_INFINITY;
                for &v in row {
                    max = max.max(v as f64);
                }
                let mut sum = 0.0f64;
                for &v in row {
                    sum += (v as f64 - max).exp();
                }
                total += max + sum.ln() - row[targets[tt] as usize] as f64;
            }
            total /= count as f64;
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total as f32),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            needs,
        ))
    }

    /// Full sum to a scalar, ascending index order in f64.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let mut total = 0.0f64;
        for &v in self.value(x).data() {
            total += v as f64;
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(total as f32), Op::Sum { x }, needs))
    }

    /// Reverse-mode sweep from a scalar loss. Gradients land in f64 buffers
    /// on every node on the path to a grad-requiring leaf; repeated calls
    /// accumulate on leaves (intermediate buffers are reset per sweep).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                if let Some(g) = node.grad.as_mut() {
                    g.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        ensure_grad(&mut self.nodes, loss)[0] += 1.0;
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            let gout = node.grad.as_deref().expect("grad present");
            match &node.op {
                Op::Leaf => {}

                Op::Embed { table, tokens } => {
                    if head[table.0].needs_grad {
                        let hidden = node.value.numel() / tokens.len();
                        let tg = ensure_grad(head, *table);
                        for (tt, &tok) in tokens.iter().enumerate() {
                            let dst =
                                &mut tg[tok as usize * hidden..(tok as usize + 1) * hidden];
                            let src = &gout[tt * hidden..(tt + 1) * hidden];
                            add_into(dst, src);
                        }
                    }
                }

                Op::Matmul { a, b } => {
                    let (av, bv) = (head[a.0].value.clone(), head[b.0].value.clone());
                    let (ashape, bshape) = (av.shape(), bv.shape());
                    let (batch, m, k, p) = if ashape.len() == 2 {
                        (1, ashape[0], ashape[1], bshape[bshape.len() - 1])
                    } else {
                        (ashape[0], ashape[1], ashape[2], bshape[bshape.len() - 1])
                    };
                    let b_batched = bshape.len() == 3;
                    if head[a.0].needs_grad {
                        let ga = ensure_grad(head, *a);
                        for bi in 0..batch {
                            let b_sl = if b_batched {
                                &bv.data()[bi * k * p..(bi + 1) * k * p]
                            } else {
                                bv.data()
                            };
                            kernels::matmul_grad_a(
                                &gout[bi * m * p..(bi + 1) * m * p],
                                b_sl,
                                m,
                                k,
                                p,
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                    }
                    if head[b.0].needs_grad {
                        let gb = ensure_grad(head, *b);
                        for bi in 0..batch {
                            let a_sl = &av.data()[bi * m * k..(bi + 1) * m * k];
                            let gb_sl = if b_batched {
                                &mut gb[bi * k * p..(bi + 1) * k * p]
                            } else {
                                &mut gb[..]
                            };
                            kernels::matmul_grad_b(
                                &gout[bi * m * p..(bi + 1) * m * p],
                                a_sl,
                                m,
                                k,
                                p,
                                gb_sl,
                            );
                        }
                    }
                }

                Op::Add { a, b } => {
                    for input in [a, b] {
                        if head[input.0].needs_grad {
                            add_into(ensure_grad(head, *input), gout);
                        }
                    }
                }

                Op::Mul { a, b } => {
                    let (av, bv) = (head[a.0].value.clone(), head[b.0].value.clone());
                    if head[a.0].needs_grad {
                        let ga = ensure_grad(head, *a);
                        for ((g, &o), &bvv) in ga.iter_mut().zip(gout).zip(bv.data()) {
                            *g += o * bvv as f64;
                        }
                    }
                    if head[b.0].needs_grad {
                        let gb = ensure_grad(head, *b);
                        for ((g, &o), &avv) in gb.iter_mut().zip(gout).zip(av.data()) {
                            *g += o * avv as f64;
                        }
                    }
                }

                Op::Silu { x } => {
                    if head[x.0].needs_grad {
                        let xv = head[x.0].value.clone();
                        let gx = ensure_grad(head, *x);
                        for ((g, &o), &v) in gx.iter_mut().zip(gout).zip(xv.data()) {
                            let v = v as f64;
                            let sig = 1.0 / (1.0 + (-v).exp());
                            *g += o * sig * (1.0 + v * (1.0 - sig));
                        }
                    }
                }

                Op::RmsNorm {
                    x,
                    weight,
                    inv_rms,
                } => {
                    let xv = head[x.0].value.clone();
                    let wv = head[weight.0].value.clone();
                    let d = wv.numel();
                    let rows = xv.numel() / d;
                    if head[x.0].needs_grad {
                        let gx = ensure_grad(head, *x);
                        for r in 0..rows {
                            let inv = inv_rms[r];
                            let xr = &xv.data()[r * d..(r + 1) * d];
                            let gr = &gout[r * d..(r + 1) * d];
                            let mut dot = 0.0f64;
                            for j in 0..d {
                                dot += gr[j] * wv.data()[j] as f64 * xr[j] as f64;
                            }
                            let coef = inv * inv * inv * dot / d as f64;
                            let gxr = &mut gx[r * d..(r + 1) * d];
                            for j in 0..d {
                                gxr[j] +=
                                    inv * wv.data()[j] as f64 * gr[j] - xr[j] as f64 * coef;
                            }
                        }
                    }
                    if head[weight.0].needs_grad {
                        let gw = ensure_grad(head, *weight);
                        for r in 0..rows {
                            let inv = inv_rms[r];
                            let xr = &xv.data()[r * d..(r + 1) * d];
                            let gr = &gout[r * d..(r + 1) * d];
                            for j in 0..d {
                                gw[j] += gr[j] * xr[j] as f64 * inv;
                            }
                        }
                    }
                }

                Op::Rope { x, cos, sin } => {
                    if head[x.0].needs_grad {
                        let shape = node.value.shape();
                        let (h, t, d) = (shape[0], shape[1], shape[2]);
                        let mut dx = vec![0.0f64; gout.len()];
                        kernels::rope_apply_f64(gout, h, t, d, cos, sin, true, &mut dx);
                        add_into(ensure_grad(head, *x), &dx);
                    }
                }

                Op::SplitHeads { x, n_heads } => {
                    if head[x.0].needs_grad {
                        let shape = node.value.shape();
                        let (h, t, d) = (shape[0], shape[1], shape[2]);
                        debug_assert_eq!(h, *n_heads);
                        let gx = ensure_grad(head, *x);
                        for hh in 0..h {
                            for tt in 0..t {
                                let src = (hh * t + tt) * d;
                                let dst = tt * h * d + hh * d;
                                add_into(&mut gx[dst..dst + d], &gout[src..src + d]);
                            }
                        }
                    }
                }

                Op::MergeHeads { x } => {
                    if head[x.0].needs_grad {
                        let shape = head[x.0].value.shape().to_vec();
                        let (h, t, d) = (shape[0], shape[1], shape[2]);
                        let gx = ensure_grad(head, *x);
                        for hh in 0..h {
                            for tt in 0..t {
                                let src = tt * h * d + hh * d;
                                let dst = (hh * t + tt) * d;
                                add_into(&mut gx[dst..dst + d], &gout[src..src + d]);
                            }
                        }
                    }
                }

                Op::Transpose2D { x } => {
                    if head[x.0].needs_grad {
                        let shape = node.value.shape();
                        let (r, c) = (shape[0], shape[1]);
                        let gx = ensure_grad(head, *x);
                        for i in 0..r {
                            for j in 0..c {
                                gx[j * r + i] += gout[i * c + j];
                            }
                        }
                    }
                }

                Op::SoftmaxLastDim { x } => {
                    if head[x.0].needs_grad {
                        let out = node.value.clone();
                        let shape = out.shape();
                        let d = *shape.last().unwrap();
                        let rows = out.numel() / d;
                        let gx = ensure_grad(head, *x);
                        for r in 0..rows {
                            let p = &out.data()[r * d..(r + 1) * d];
                            let g = &gout[r * d..(r + 1) * d];
                            let mut dot = 0.0f64;
                            for j in 0..d {
                                dot += p[j] as f64 * g[j];
                            }
                            for j in 0..d {
                                gx[r * d + j] += p[j] as f64 * (g[j] - dot);
                            }
                        }
                    }
                }

                Op::Attention {
                    q,
                    k,
                    v,
                    prefix,
                    scale,
                    weights,
                } => {
                    let (qv, kv, vv) = (
                        head[q.0].value.clone(),
                        head[k.0].value.clone(),
                        head[v.0].value.clone(),
                    );
                    let shape = qv.shape();
                    let (h, t, d) = (shape[0], shape[1], shape[2]);
                    let p_len = prefix.as_ref().map_or(0, |p| p.len);
                    let s_total = p_len + t;
                    let mut dq = vec![0.0f64; h * t * d];
                    let mut dk = vec![0.0f64; h * t * d];
                    let mut dv = vec![0.0f64; h * t * d];
                    let mut vt = vec![0.0f32; d * s_total];
                    let mut dp = vec![0.0f64; s_total];
                    let mut ds = vec![0.0f64; s_total];
                    let mut acc = vec![0.0f64; d];
                    for hh in 0..h {
                        // Values transposed to [D, S] for the dP loop.
                        if let Some(p) = prefix {
                            let pv = &p.v[hh];
                            for s in 0..p_len {
                                for dd in 0..d {
                                    vt[dd * s_total + s] = pv[s * d + dd];
                                }
                            }
                        }
                        let v_self = &vv.data()[hh * t * d..(hh + 1) * t * d];
                        for s in 0..t {
                            for dd in 0..d {
                                vt[dd * s_total + p_len + s] = v_self[s * d + dd];
                            }
                        }
                        let k_self = &kv.data()[hh * t * d..(hh + 1) * t * d];
                        for tt in 0..t {
                            let go = &gout[(hh * t + tt) * d..(hh * t + tt + 1) * d];
                            let w_row =
                                &weights[(hh * t + tt) * s_total..(hh * t + tt + 1) * s_total];
                            // dP[s] = sum_d dOut[d] * V[s][d]
                            dp.iter_mut().for_each(|x| *x = 0.0);
                            for (dd, &gv) in go.iter().enumerate() {
                                let vt_row = &vt[dd * s_total..(dd + 1) * s_total];
                                for (o, &vvv) in dp.iter_mut().zip(vt_row) {
                                    *o += gv * vvv as f64;
                                }
                            }
                            // Softmax backward, then score scaling.
                            let mut dot = 0.0f64;
                            for s in 0..s_total {
                                dot += w_row[s] as f64 * dp[s];
                            }
                            for s in 0..s_total {
                                ds[s] = w_row[s] as f64 * (dp[s] - dot) * scale;
                            }
                            // dQ[t] = sum_s dS[s] * K[s]
                            acc.iter_mut().for_each(|x| *x = 0.0);
                            for s in 0..p_len {
                                let dsv = ds[s];
                                let k_row =
                                    &prefix.as_ref().unwrap().k[hh][s * d..(s + 1) * d];
                                for (a, &kvv) in acc.iter_mut().zip(k_row) {
                                    *a += dsv * kvv as f64;
                                }
                            }
                            for s in 0..t {
                                let dsv = ds[p_len + s];
                                let k_row = &k_self[s * d..(s + 1) * d];
                                for (a, &kvv) in acc.iter_mut().zip(k_row) {
                                    *a += dsv * kvv as f64;
                                }
                            }
                            add_into(&mut dq[(hh * t + tt) * d..(hh * t + tt + 1) * d], &acc);
                            // Self-slot K and V grads; prefix slots are constant.
                            let q_row = &qv.data()[(hh * t + tt) * d..(hh * t + tt + 1) * d];
                            for s in 0..t {
                                let dsv = ds[p_len + s];
                                let wv_ = w_row[p_len + s] as f64;
                                let dk_row = &mut dk[(hh * t + s) * d..(hh * t + s + 1) * d];
                                for (o, &qvv) in dk_row.iter_mut().zip(q_row) {
                                    *o += dsv * qvv as f64;
                                }
                                let dv_row = &mut dv[(hh * t + s) * d..(hh * t + s + 1) * d];
                                for (o, &gvv) in dv_row.iter_mut().zip(go) {
                                    *o += wv_ * gvv;
                                }
                            }
                        }
                    }
                    if head[q.0].needs_grad {
                        add_into(ensure_grad(head, *q), &dq);
                    }
                    if head[k.0].needs_grad {
                        add_into(ensure_grad(head, *k), &dk);
                    }
                    if head[v.0].needs_grad {
                        add_into(ensure_grad(head, *v), &dv);
                    }
                }

                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                } => {
                    if head[logits.0].needs_grad {
                        let lv = head[logits.0].value.clone();
                        let vocab = lv.shape()[1];
                        let count = mask.iter().filter(|&&m| m).count();
                        if count > 0 {
                            let g = gout[0] / count as f64;
                            let gl = ensure_grad(head, *logits);
                            for (tt, (&tok, &m)) in targets.iter().zip(mask).enumerate() {
                                if !m {
                                    continue;
                                }
                                let row = &lv.data()[tt * vocab..(tt + 1) * vocab];
                                let mut max = f64::NEG_INFINITY;
                                for &v in row {
                                    max = max.max(v as f64);
                                }
                                let mut sum = 0.0f64;
                                for &v in row {
                                    sum += (v as f64 - max).exp();
                                }
                                let gr = &mut gl[tt * vocab..(tt + 1) * vocab];
                                for c in 0..vocab {
                                    let p = (row[c] as f64 - max).exp() / sum;
                                    let ind = if c == tok as usize { 1.0 } else { 0.0 };
                                    gr[c] += g * (p - ind);
                                }
                            }
                        }
                    }
                }

                Op::Sum { x } => {
                    if head[x.0].needs_grad {
                        let g = gout[0];
                        let gx = ensure_grad(head, *x);
                        for o in gx.iter_mut() {
                            *o += g;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
