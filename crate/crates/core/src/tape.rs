//! Reverse-mode autodiff on a linear tape.
//!
//! A `Tape` records one forward pass; `backward` replays it in reverse and
//! populates the gradient of every reachable tensor. A tape is single-use:
//! after `backward` it no longer accepts ops and a second `backward` is a
//! state error. No operation broadcasts — every shape mismatch is reported.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type ValueId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Sum(ValueId),
    Matmul(ValueId, ValueId),
    Transpose(ValueId),
    Reshape(ValueId),
    EmbeddingLookup { table: ValueId, ids: Vec<u32> },
    RmsNorm { x: ValueId, gain: ValueId, inv_rms: Vec<f64> },
    Rope { x: ValueId, n_heads: usize, base: f64 },
    Silu(ValueId),
    AttnScores { q: ValueId, k: ValueId, n_heads: usize },
    AttnWeighted { probs: ValueId, v: ValueId, n_heads: usize },
    Nll { logits: ValueId, targets: Vec<(usize, usize)>, mean: bool },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

const RMS_EPS: f64 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), spent: false }
    }

    fn push(&mut self, value: Tensor, op: Op) -> ValueId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    fn ensure_live(&self) -> Result<()> {
        if self.spent {
            return Err(Error::State(
                "tape already consumed by backward; build a fresh tape".into(),
            ));
        }
        Ok(())
    }

    fn tensor(&self, id: ValueId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        self.tensor(id)
    }

    /// Gradient of a node after `backward`; `None` if unreachable from the loss.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.nodes[id].value.grad()
    }

    pub fn leaf(&mut self, t: Tensor) -> ValueId {
        self.push(t, Op::Leaf)
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.ensure_live()?;
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.ensure_live()?;
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn silu(&mut self, a: ValueId) -> Result<ValueId> {
        self.ensure_live()?;
        let ta = self.tensor(a);
        let data = ta.data().iter().map(|&x| x * sigmoid(x)).collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Silu(a)))
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, a: ValueId) -> Result<ValueId> {
        self.ensure_live()?;
        let total: f64 = self.tensor(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum(a)))
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.ensure_live()?;
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs matrices: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut data = vec![0.0; m * n];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let crow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += aip * brow[j];
                }
            }
        }
        let out = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: ValueId) -> Result<ValueId> {
        self.ensure_live()?;
        let ta = self.tensor(a);
        if ta.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "transpose needs a matrix, got {:?}",
                ta.shape()
            )));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let src = ta.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::from_vec(vec![n, m], data)?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    /// Same data, new shape; element count must be preserved.
    pub fn reshape(&mut self, a: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        self.ensure_live()?;
        let ta = self.tensor(a);
        let numel: usize = shape.iter().product();
        if numel != ta.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                ta.shape(),
                shape
            )));
        }
        let out = Tensor::from_vec(shape, ta.data().to_vec())?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    // ── model ops ────────────────────────────────────────────────────

    /// Gather rows of `table` ([V, d]) by token id.
    pub fn embedding_lookup(&mut self, table: ValueId, ids: &[u32]) -> Result<ValueId> {
        self.ensure_live()?;
        let tt = self.tensor(table);
        if tt.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "embedding table must be a matrix, got {:?}",
                tt.shape()
            )));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if ids.is_empty() {
            return Err(Error::Data("embedding lookup on empty id sequence".into()));
        }
        for &id in ids {
            if id as usize >= v {
                return Err(Error::Index(format!(
                    "token id {id} outside table with {v} rows"
                )));
            }
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&tt.data()[id as usize * d..(id as usize + 1) * d]);
        }
        let out = Tensor::from_vec(vec![ids.len(), d], data)?;
        Ok(self.push(out, Op::EmbeddingLookup { table, ids: ids.to_vec() }))
    }

    /// Root-mean-square normalization over the last axis of a matrix,
    /// scaled by a learned gain vector.
    pub fn rms_norm(&mut self, x: ValueId, gain: ValueId) -> Result<ValueId> {
        self.ensure_live()?;
        let (tx, tg) = (self.tensor(x), self.tensor(gain));
        if tx.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "rms_norm input must be a matrix, got {:?}",
                tx.shape()
            )));
        }
        let (n, d) = (tx.shape()[0], tx.shape()[1]);
        if tg.shape() != [d] {
            return Err(Error::Shape(format!(
                "rms_norm gain {:?} does not match row width {d}",
                tg.shape()
            )));
        }
        let mut data = vec![0.0; n * d];
        let mut inv_rms = vec![0.0; n];
        for i in 0..n {
            let row = &tx.data()[i * d..(i + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms[i] = inv;
            for j in 0..d {
                data[i * d + j] = tg.data()[j] * row[j] * inv;
            }
        }
        let out = Tensor::from_vec(vec![n, d], data)?;
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Rotary position encoding over a [T, d] activation, d = n_heads * head_dim,
    /// head_dim even. Position t rotates adjacent pairs within each head by
    /// angles t * base^(-2p/head_dim).
    pub fn rotary_position_encode(
        &mut self,
        x: ValueId,
        n_heads: usize,
        base: f64,
    ) -> Result<ValueId> {
        self.ensure_live()?;
        let tx = self.tensor(x);
        let (t_len, d, dh) = check_heads("rotary_position_encode", tx.shape(), n_heads)?;
        if dh % 2 != 0 {
            return Err(Error::Shape(format!(
                "rotary_position_encode needs even head dim, got {dh}"
            )));
        }
        let mut data = tx.data().to_vec();
        rope_apply(&mut data, t_len, d, n_heads, dh, base, false);
        let out = Tensor::from_vec(vec![t_len, d], data)?;
        Ok(self.push(out, Op::Rope { x, n_heads, base }))
    }

    /// Causal attention weights: scaled dot products of per-head query/key
    /// rows, masked so position t sees only positions <= t, softmax-normalized.
    /// Output is [n_heads, T, T] with zeros above the diagonal.
    pub fn causal_attention_scores(
        &mut self,
        q: ValueId,
        k: ValueId,
        n_heads: usize,
    ) -> Result<ValueId> {
        self.ensure_live()?;
        let (tq, tk) = (self.tensor(q), self.tensor(k));
        if tq.shape() != tk.shape() {
            return Err(Error::Shape(format!(
                "attention q/k shapes differ: {:?} vs {:?}",
                tq.shape(),
                tk.shape()
            )));
        }
        let (t_len, d, dh) = check_heads("causal_attention_scores", tq.shape(), n_heads)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; n_heads * t_len * t_len];
        let (dq, dk) = (tq.data(), tk.data());
        let mut row = vec![0.0; t_len];
        for h in 0..n_heads {
            let off = h * dh;
            for t in 0..t_len {
                for (s, slot) in row.iter_mut().enumerate().take(t + 1) {
                    let mut dot = 0.0;
                    for j in 0..dh {
                        dot += dq[t * d + off + j] * dk[s * d + off + j];
                    }
                    *slot = dot * scale;
                }
                // softmax over the causal prefix [0..=t]
                let m = row[..=t].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in 0..=t {
                    row[s] = (row[s] - m).exp();
                    z += row[s];
                }
                let out_row = &mut probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                for s in 0..=t {
                    out_row[s] = row[s] / z;
                }
            }
        }
        let out = Tensor::from_vec(vec![n_heads, t_len, t_len], probs)?;
        Ok(self.push(out, Op::AttnScores { q, k, n_heads }))
    }

    /// Mix value rows by attention weights: out[t] = sum_s P[h,t,s] * v[s]
    /// within each head slice.
    pub fn attention_weighted_sum(
        &mut self,
        probs: ValueId,
        v: ValueId,
        n_heads: usize,
    ) -> Result<ValueId> {
        self.ensure_live()?;
        let (tp, tv) = (self.tensor(probs), self.tensor(v));
        let (t_len, d, dh) = check_heads("attention_weighted_sum", tv.shape(), n_heads)?;
        if tp.shape() != [n_heads, t_len, t_len] {
            return Err(Error::Shape(format!(
                "attention weights {:?} do not match [{n_heads}, {t_len}, {t_len}]",
                tp.shape()
            )));
        }
        let mut data = vec![0.0; t_len * d];
        let (dp, dv) = (tp.data(), tv.data());
        for h in 0..n_heads {
            let off = h * dh;
            for t in 0..t_len {
                for s in 0..=t {
                    let p = dp[(h * t_len + t) * t_len + s];
                    if p == 0.0 {
                        continue;
                    }
                    for j in 0..dh {
                        data[t * d + off + j] += p * dv[s * d + off + j];
                    }
                }
            }
        }
        let out = Tensor::from_vec(vec![t_len, d], data)?;
        Ok(self.push(out, Op::AttnWeighted { probs, v, n_heads }))
    }

    // ── losses ───────────────────────────────────────────────────────

    /// Mean negative log-likelihood of one target class per logit row.
    /// Numerically stabilized by max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, targets: &[usize]) -> Result<ValueId> {
        let rows = {
            let tl = self.tensor(logits);
            if tl.shape().len() != 2 {
                return Err(Error::Shape(format!(
                    "cross entropy needs [rows, classes] logits, got {:?}",
                    tl.shape()
                )));
            }
            tl.shape()[0]
        };
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "{} targets for {} logit rows",
                targets.len(),
                rows
            )));
        }
        let pairs: Vec<(usize, usize)> = targets.iter().copied().enumerate().collect();
        self.nll(logits, &pairs, true)
    }

    /// Summed negative log-likelihood over explicit (row, class) pairs.
    /// Rows not named in `pairs` contribute nothing (loss masking).
    pub fn nll_sum(&mut self, logits: ValueId, pairs: &[(usize, usize)]) -> Result<ValueId> {
        self.nll(logits, pairs, false)
    }

    fn nll(&mut self, logits: ValueId, pairs: &[(usize, usize)], mean: bool) -> Result<ValueId> {
        self.ensure_live()?;
        let tl = self.tensor(logits);
        if tl.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "nll needs [rows, classes] logits, got {:?}",
                tl.shape()
            )));
        }
        let (rows, classes) = (tl.shape()[0], tl.shape()[1]);
        if pairs.is_empty() {
            return Err(Error::Data("nll over zero targets".into()));
        }
        for &(r, c) in pairs {
            if r >= rows {
                return Err(Error::Index(format!("target row {r} >= {rows}")));
            }
            if c >= classes {
                return Err(Error::Index(format!(
                    "target class {c} >= vocabulary size {classes}"
                )));
            }
        }
        let mut total = 0.0;
        for &(r, c) in pairs {
            let row = &tl.data()[r * classes..(r + 1) * classes];
            total += log_sum_exp(row) - row[c];
        }
        if mean {
            total /= pairs.len() as f64;
        }
        let out = Tensor::scalar(total);
        Ok(self.push(out, Op::Nll { logits, targets: pairs.to_vec(), mean }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass seeded with d(loss)/d(loss) = 1.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        self.backward_seeded(loss, 1.0)
    }

    /// Reverse pass with an explicit seed gradient on the (scalar) loss node.
    /// Used by the trainer to weight per-sequence losses inside a batch.
    pub fn backward_seeded(&mut self, loss: ValueId, seed: f64) -> Result<()> {
        if self.spent {
            return Err(Error::State("backward called twice on one tape".into()));
        }
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward target must be scalar, got {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        self.spent = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![seed]);

        for id in (0..=loss).rev() {
            let Some(gout) = grads[id].take() else { continue };
            self.propagate(id, &gout, &mut grads)?;
            self.nodes[id].value.set_grad(gout);
        }
        // nodes after the loss node are unreachable by construction
        Ok(())
    }

    fn propagate(
        &self,
        id: ValueId,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let acc = |grads: &mut [Option<Vec<f64>>], target: ValueId, len: usize| -> &mut Vec<f64> {
            grads[target].get_or_insert_with(|| vec![0.0; len])
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (slot, g) in acc(grads, *a, gout.len()).iter_mut().zip(gout) {
                    *slot += g;
                }
                for (slot, g) in acc(grads, *b, gout.len()).iter_mut().zip(gout) {
                    *slot += g;
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.tensor(*a).data().to_vec(), self.tensor(*b).data().to_vec());
                let ga = acc(grads, *a, gout.len());
                for i in 0..gout.len() {
                    ga[i] += gout[i] * db[i];
                }
                let gb = acc(grads, *b, gout.len());
                for i in 0..gout.len() {
                    gb[i] += gout[i] * da[i];
                }
            }
            Op::Sum(a) => {
                let n = self.tensor(*a).numel();
                let ga = acc(grads, *a, n);
                for slot in ga.iter_mut() {
                    *slot += gout[0];
                }
            }
            Op::Matmul(a, b) => {
                let ta = self.tensor(*a);
                let tb = self.tensor(*b);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let (da, db) = (ta.data(), tb.data());
                {
                    // dA = dC * B^T
                    let ga = acc(grads, *a, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gout[i * n + j] * db[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                {
                    // dB = A^T * dC
                    let gb = acc(grads, *b, k * n);
                    for p in 0..k {
                        for i in 0..m {
                            let aip = da[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += aip * gout[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let ta = self.tensor(*a);
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                let ga = acc(grads, *a, m * n);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += gout[j * m + i];
                    }
                }
            }
            Op::Reshape(a) => {
                let ga = acc(grads, *a, gout.len());
                for i in 0..gout.len() {
                    ga[i] += gout[i];
                }
            }
            Op::EmbeddingLookup { table, ids } => {
                let tt = self.tensor(*table);
                let d = tt.shape()[1];
                let gt = acc(grads, *table, tt.numel());
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id as usize * d + j] += gout[row * d + j];
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let tx = self.tensor(*x);
                let tg = self.tensor(*gain);
                let (n, d) = (tx.shape()[0], tx.shape()[1]);
                let (dx_src, dg_src) = (tx.data(), tg.data());
                {
                    let gg = acc(grads, *gain, d);
                    for i in 0..n {
                        let inv = inv_rms[i];
                        for j in 0..d {
                            gg[j] += gout[i * d + j] * dx_src[i * d + j] * inv;
                        }
                    }
                }
                {
                    let gx = acc(grads, *x, n * d);
                    for i in 0..n {
                        let inv = inv_rms[i];
                        let row = &dx_src[i * d..(i + 1) * d];
                        let gout_row = &gout[i * d..(i + 1) * d];
                        let mut dot = 0.0;
                        for j in 0..d {
                            dot += dg_src[j] * gout_row[j] * row[j];
                        }
                        let coeff = dot * inv * inv * inv / d as f64;
                        for j in 0..d {
                            gx[i * d + j] += dg_src[j] * gout_row[j] * inv - row[j] * coeff;
                        }
                    }
                }
            }
            Op::Rope { x, n_heads, base } => {
                let tx = self.tensor(*x);
                let (t_len, d) = (tx.shape()[0], tx.shape()[1]);
                let dh = d / n_heads;
                let mut gx_new = gout.to_vec();
                // inverse rotation = transpose
                rope_apply(&mut gx_new, t_len, d, *n_heads, dh, *base, true);
                let gx = acc(grads, *x, t_len * d);
                for i in 0..gx_new.len() {
                    gx[i] += gx_new[i];
                }
            }
            Op::Silu(a) => {
                let da = self.tensor(*a).data();
                let ga = acc(grads, *a, gout.len());
                for i in 0..gout.len() {
                    let s = sigmoid(da[i]);
                    ga[i] += gout[i] * s * (1.0 + da[i] * (1.0 - s));
                }
            }
            Op::AttnScores { q, k, n_heads } => {
                let tq = self.tensor(*q);
                let tk = self.tensor(*k);
                let probs = self.tensor(id).data();
                let (t_len, d) = (tq.shape()[0], tq.shape()[1]);
                let dh = d / n_heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (dq_src, dk_src) = (tq.data(), tk.data());
                let mut dz = vec![0.0; t_len];
                let mut gq_acc = vec![0.0; t_len * d];
                let mut gk_acc = vec![0.0; t_len * d];
                for h in 0..*n_heads {
                    let off = h * dh;
                    for t in 0..t_len {
                        let base_idx = (h * t_len + t) * t_len;
                        let mut dot = 0.0;
                        for s in 0..=t {
                            dot += probs[base_idx + s] * gout[base_idx + s];
                        }
                        for s in 0..=t {
                            dz[s] = probs[base_idx + s] * (gout[base_idx + s] - dot);
                        }
                        for s in 0..=t {
                            let w = dz[s] * scale;
                            if w == 0.0 {
                                continue;
                            }
                            for j in 0..dh {
                                gq_acc[t * d + off + j] += w * dk_src[s * d + off + j];
                                gk_acc[s * d + off + j] += w * dq_src[t * d + off + j];
                            }
                        }
                    }
                }
                let gq = acc(grads, *q, t_len * d);
                for i in 0..gq_acc.len() {
                    gq[i] += gq_acc[i];
                }
                let gk = acc(grads, *k, t_len * d);
                for i in 0..gk_acc.len() {
                    gk[i] += gk_acc[i];
                }
            }
            Op::AttnWeighted { probs, v, n_heads } => {
                let tp = self.tensor(*probs);
                let tv = self.tensor(*v);
                let (t_len, d) = (tv.shape()[0], tv.shape()[1]);
                let dh = d / n_heads;
                let (dp_src, dv_src) = (tp.data(), tv.data());
                let mut gp_acc = vec![0.0; tp.numel()];
                let mut gv_acc = vec![0.0; t_len * d];
                for h in 0..*n_heads {
                    let off = h * dh;
                    for t in 0..t_len {
                        for s in 0..=t {
                            let mut dp = 0.0;
                            for j in 0..dh {
                                dp += gout[t * d + off + j] * dv_src[s * d + off + j];
                            }
                            gp_acc[(h * t_len + t) * t_len + s] += dp;
                            let p = dp_src[(h * t_len + t) * t_len + s];
                            if p != 0.0 {
                                for j in 0..dh {
                                    gv_acc[s * d + off + j] += p * gout[t * d + off + j];
                                }
                            }
                        }
                    }
                }
                let gp = acc(grads, *probs, gp_acc.len());
                for i in 0..gp_acc.len() {
                    gp[i] += gp_acc[i];
                }
                let gv = acc(grads, *v, gv_acc.len());
                for i in 0..gv_acc.len() {
                    gv[i] += gv_acc[i];
                }
            }
            Op::Nll { logits, targets, mean } => {
                let tl = self.tensor(*logits);
                let (rows, classes) = (tl.shape()[0], tl.shape()[1]);
                let w = if *mean {
                    gout[0] / targets.len() as f64
                } else {
                    gout[0]
                };
                let src = tl.data();
                let gl = acc(grads, *logits, rows * classes);
                for &(r, c) in targets {
                    let row = &src[r * classes..(r + 1) * classes];
                    let lse = log_sum_exp(row);
                    for j in 0..classes {
                        gl[r * classes + j] += w * (row[j] - lse).exp();
                    }
                    gl[r * classes + c] -= w;
                }
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

fn check_heads(op: &str, shape: &[usize], n_heads: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 2 {
        return Err(Error::Shape(format!("{op} needs a [T, d] matrix, got {shape:?}")));
    }
    let (t_len, d) = (shape[0], shape[1]);
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Shape(format!(
            "{op}: width {d} not divisible into {n_heads} heads"
        )));
    }
    Ok((t_len, d, d / n_heads))
}

/// In-place rotary transform; `inverse` applies the transposed rotation.
fn rope_apply(
    data: &mut [f64],
    t_len: usize,
    d: usize,
    n_heads: usize,
    dh: usize,
    base: f64,
    inverse: bool,
) {
    for t in 0..t_len {
        for h in 0..n_heads {
            let off = t * d + h * dh;
            for p in 0..dh / 2 {
                let theta = t as f64 * base.powf(-2.0 * p as f64 / dh as f64);
                let (sin, cos) = theta.sin_cos();
                let sin = if inverse { -sin } else { sin };
                let a = data[off + 2 * p];
                let b = data[off + 2 * p + 1];
                data[off + 2 * p] = a * cos - b * sin;
                data[off + 2 * p + 1] = a * sin + b * cos;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn matmul_identity_left() {
        let mut tape = Tape::new();
        let i = tape.leaf(Tensor::identity(3));
        let x = tape.leaf(t2(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_identity_right() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let i = tape.leaf(Tensor::identity(2));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_product() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t2(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 8]));
        let loss = tape.softmax_cross_entropy(logits, &[3]).unwrap();
        let expected = (8f64).ln(); // 2.0794...
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_correct_class() {
        let mut tape = Tape::new();
        let mut logits = Tensor::zeros(vec![1, 8]);
        logits.data_mut()[2] = 50.0;
        let id = tape.leaf(logits);
        let loss = tape.softmax_cross_entropy(id, &[2]).unwrap();
        assert!(tape.value(loss).item() < 1e-10);
        assert!(tape.value(loss).item() >= 0.0);
    }

    #[test]
    fn cross_entropy_two_class_formula() {
        // logits [1, 2], target 1 -> -ln(e^2 / (e^1 + e^2)) = ln(1 + e^-1)
        let mut tape = Tape::new();
        let logits = tape.leaf(t2(1, 2, vec![1.0, 2.0]));
        let loss = tape.softmax_cross_entropy(logits, &[1]).unwrap();
        let expected = (1f64 + (-1f64).exp()).ln(); // 0.31326...
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
        assert!((tape.value(loss).item() - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_out_of_range_target() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 4]));
        let err = tape.softmax_cross_entropy(logits, &[4]).unwrap_err();
        assert_eq!(err.class(), "index");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_twice_is_state_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        let err = tape.backward(loss).unwrap_err();
        assert_eq!(err.class(), "state");
    }

    #[test]
    fn ops_after_backward_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.sum(x).unwrap_err().class(), "state");
    }

    #[test]
    fn add_rejects_shape_mismatch_without_broadcast() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![3]));
        assert_eq!(tape.add(a, b).unwrap_err().class(), "shape");
    }

    #[test]
    fn embedding_lookup_rejects_bad_id() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::zeros(vec![10, 4]));
        let err = tape.embedding_lookup(table, &[3, 10]).unwrap_err();
        assert_eq!(err.class(), "index");
    }

    #[test]
    fn causality_of_attention_scores() {
        // upper triangle of every head slice must be exactly zero
        let mut rng = Rng::new(5);
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::randn(vec![5, 8], 1.0, &mut rng));
        let k = tape.leaf(Tensor::randn(vec![5, 8], 1.0, &mut rng));
        let p = tape.causal_attention_scores(q, k, 2).unwrap();
        let probs = tape.value(p).data();
        for h in 0..2 {
            for t in 0..5 {
                let mut row_sum = 0.0;
                for s in 0..5 {
                    let val = probs[(h * 5 + t) * 5 + s];
                    if s > t {
                        assert_eq!(val, 0.0);
                    }
                    row_sum += val;
                }
                assert!((row_sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut rng = Rng::new(9);
        let x = Tensor::randn(vec![1, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let y = tape.rotary_position_encode(xid, 2, 10_000.0).unwrap();
        assert!(tape.value(y).bits_eq(&x));
    }

    #[test]
    fn rope_preserves_norms() {
        let mut rng = Rng::new(10);
        let x = Tensor::randn(vec![6, 8], 1.0, &mut rng);
        let norm_before: f64 = x.data().iter().map(|v| v * v).sum();
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let y = tape.rotary_position_encode(xid, 2, 10_000.0).unwrap();
        let norm_after: f64 = tape.value(y).data().iter().map(|v| v * v).sum();
        assert!((norm_before - norm_after).abs() < 1e-9);
    }

    #[test]
    fn rope_relative_dot_products() {
        // dot(rope(q at t), rope(k at s)) depends only on t - s for equal inputs
        let mut rng = Rng::new(11);
        let row: Vec<f64> = (0..8).map(|_| rng.next_normal()).collect();
        let reps = 5;
        let data: Vec<f64> = (0..reps).flat_map(|_| row.clone()).collect();
        let x = Tensor::from_vec(vec![reps, 8], data).unwrap();
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let y = tape.rotary_position_encode(xid, 1, 10_000.0).unwrap();
        let out = tape.value(y).data();
        let dot = |a: usize, b: usize| -> f64 {
            (0..8).map(|j| out[a * 8 + j] * out[b * 8 + j]).sum()
        };
        assert!((dot(0, 1) - dot(2, 3)).abs() < 1e-9);
        assert!((dot(1, 3) - dot(2, 4)).abs() < 1e-9);
    }

    #[test]
    fn transpose_then_reshape_round_trip() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let t = tape.transpose(a).unwrap();
        assert_eq!(tape.value(t).shape(), &[3, 2]);
        assert_eq!(tape.value(t).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let r = tape.reshape(t, vec![6]).unwrap();
        assert_eq!(tape.value(r).shape(), &[6]);
    }

    #[test]
    fn finite_outputs_on_finite_inputs() {
        let mut rng = Rng::new(77);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(vec![4, 8], 30.0, &mut rng));
        let g = tape.leaf(Tensor::full(vec![8], 1.0));
        let n = tape.rms_norm(x, g).unwrap();
        let s = tape.silu(n).unwrap();
        let p = tape.causal_attention_scores(s, s, 2).unwrap();
        assert!(tape.value(p).is_finite());
    }
}
