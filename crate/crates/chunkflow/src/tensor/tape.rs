//! Wengert tape: operations recorded in forward order, gradients by
//! reverse traversal.
//!
//! Values live in an arena indexed by [`ValId`]. `backward` never mutates
//! forward activations; it allocates fresh gradient buffers, so repeated
//! calls on the same tape give identical results.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Index of a value in the tape arena.
pub type ValId = usize;

#[derive(Debug, Clone)]
enum Op {
    /// Source value (constant input or parameter snapshot).
    Leaf,
    Add { a: ValId, b: ValId },
    Sub { a: ValId, b: ValId },
    Mul { a: ValId, b: ValId },
    Scale { x: ValId, c: f64 },
    /// out[r, c] = x[r, c] + bias[c]
    AddBias { x: ValId, bias: ValId, rows: usize, cols: usize },
    /// out[b, g, c] = x[b, g, c] + t[b, c]
    AddTokenBias { x: ValId, t: ValId, b: usize, g: usize, c: usize },
    Gelu { x: ValId },
    /// out = a @ b with a: [m, k], b: [k, n]
    Matmul { a: ValId, b: ValId, m: usize, k: usize, n: usize },
    /// x: [B, T, Cin], w: [k, Cin, Cout]; zero padding `pad` on both sides.
    Conv1d { x: ValId, w: ValId, b: usize, t: usize, c_in: usize, c_out: usize, ksize: usize, stride: usize, pad: usize },
    /// Transposed counterpart: T_out = (T-1)*stride - 2*pad + ksize.
    ConvT1d { x: ValId, w: ValId, b: usize, t: usize, c_in: usize, c_out: usize, ksize: usize, stride: usize, pad: usize },
    /// Row-wise layer norm over `cols`; saved per-row (mean, rstd).
    LayerNorm { x: ValId, gamma: ValId, beta: ValId, rows: usize, cols: usize, eps: f64, saved: ValId },
    /// Grouped-query attention. q: [B,Tq,Hq,Dh], k/v: [B,Tk,Hkv,Dh].
    /// Query head h attends kv head h*Hkv/Hq. `saved` holds softmax probs
    /// laid out [B,Hq,Tq,Tk].
    Gqa { q: ValId, k: ValId, v: ValId, b: usize, t_q: usize, t_k: usize, h_q: usize, h_kv: usize, d_h: usize, causal: bool, saved: ValId },
    SumSquares { x: ValId },
    Sum { x: ValId },
    /// out = x[:, start..start+len, :] for x: [B, T, C].
    SliceTime { x: ValId, b: usize, t: usize, c: usize, start: usize, len: usize },
    /// out[b, c] = mean_t x[b, t, c] for x: [B, T, C].
    MeanTime { x: ValId, b: usize, t: usize, c: usize },
    /// Row gather: out[i, :] = table[ids[i], :].
    EmbedRows { table: ValId, ids: Vec<usize>, dim: usize },
    /// Mean NLL of softmax(logits) at `targets`; saved probs [n, k].
    CrossEntropy { logits: ValId, targets: Vec<usize>, n: usize, k: usize, saved: ValId },
}

struct Slot {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
}

/// Recorded forward computation.
pub struct Tape {
    slots: Vec<Slot>,
    /// Which parameter (if any) a leaf mirrors; used to bucket gradients.
    param_of: Vec<Option<ParamId>>,
    registered: HashMap<ParamId, ValId>,
}

/// Gradients of a scalar loss with respect to every tape value.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, id: ValId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    /// Gradient of a value, zeros if it was not on the loss path.
    pub fn wrt_or_zero(&self, tape: &Tape, id: ValId) -> Tensor {
        match &self.grads[id] {
            Some(g) => Tensor { shape: tape.slots[id].shape.clone(), data: g.clone() },
            None => Tensor::zeros(&tape.slots[id].shape),
        }
    }

    /// Collect per-parameter gradients (zeros for off-path parameters).
    pub fn by_param(&self, tape: &Tape, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .iter()
            .map(|p| Tensor::zeros(&p.value.shape))
            .collect();
        for (pid, vid) in &tape.registered {
            if let Some(g) = &self.grads[*vid] {
                let dst = &mut out[pid.index()].data;
                for (d, s) in dst.iter_mut().zip(g.iter()) {
                    *d += *s;
                }
            }
        }
        out
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { slots: Vec::new(), param_of: Vec::new(), registered: HashMap::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> ValId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.slots.push(Slot { shape, data, op });
        self.param_of.push(None);
        self.slots.len() - 1
    }

    /// Record a constant input (no gradient will be requested for it).
    pub fn constant(&mut self, t: &Tensor) -> ValId {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf)
    }

    /// Snapshot a parameter onto the tape. Registering the same parameter
    /// twice returns the original value id.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> ValId {
        if let Some(v) = self.registered.get(&id) {
            return *v;
        }
        let p = store.get(id);
        let v = self.push(p.value.shape.clone(), p.value.data.clone(), Op::Leaf);
        self.param_of[v] = Some(id);
        self.registered.insert(id, v);
        v
    }

    /// Snapshot a parameter as a frozen constant: no gradient flows to it.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> ValId {
        let p = store.get(id);
        self.push(p.value.shape.clone(), p.value.data.clone(), Op::Leaf)
    }

    pub fn shape(&self, id: ValId) -> &[usize] {
        &self.slots[id].shape
    }

    pub fn data(&self, id: ValId) -> &[f64] {
        &self.slots[id].data
    }

    pub fn tensor(&self, id: ValId) -> Tensor {
        Tensor { shape: self.slots[id].shape.clone(), data: self.slots[id].data.clone() }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    // ── forward ops ──────────────────────────────────────────────────

    fn check_same_shape(&self, a: ValId, b: ValId, what: &str) -> Result<()> {
        if self.slots[a].shape != self.slots[b].shape {
            return Err(Error::dim(format!(
                "{what}: {:?} vs {:?}",
                self.slots[a].shape, self.slots[b].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.check_same_shape(a, b, "add")?;
        let data: Vec<f64> = self.slots[a]
            .data
            .iter()
            .zip(&self.slots[b].data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.slots[a].shape.clone(), data, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.check_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.slots[a]
            .data
            .iter()
            .zip(&self.slots[b].data)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.slots[a].shape.clone(), data, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.check_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.slots[a]
            .data
            .iter()
            .zip(&self.slots[b].data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.slots[a].shape.clone(), data, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: ValId, c: f64) -> ValId {
        let data: Vec<f64> = self.slots[x].data.iter().map(|v| v * c).collect();
        self.push(self.slots[x].shape.clone(), data, Op::Scale { x, c })
    }

    /// Broadcast-add `bias` (len = cols) over every row of `x` viewed as [rows, cols].
    pub fn add_bias(&mut self, x: ValId, bias: ValId, rows: usize, cols: usize) -> Result<ValId> {
        if self.slots[x].data.len() != rows * cols {
            return Err(Error::dim("add_bias: x numel != rows*cols"));
        }
        if self.slots[bias].data.len() != cols {
            return Err(Error::dim("add_bias: bias len != cols"));
        }
        let mut data = self.slots[x].data.clone();
        let b = &self.slots[bias].data;
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            for (d, s) in row.iter_mut().zip(b.iter()) {
                *d += *s;
            }
        }
        Ok(self.push(self.slots[x].shape.clone(), data, Op::AddBias { x, bias, rows, cols }))
    }

    /// x: [B, G, C] plus t: [B, C] broadcast over the middle axis.
    pub fn add_token_bias(&mut self, x: ValId, t: ValId, b: usize, g: usize, c: usize) -> Result<ValId> {
        if self.slots[x].data.len() != b * g * c || self.slots[t].data.len() != b * c {
            return Err(Error::dim("add_token_bias shape mismatch"));
        }
        let mut data = self.slots[x].data.clone();
        let tv = &self.slots[t].data;
        for bi in 0..b {
            for gi in 0..g {
                let base = (bi * g + gi) * c;
                for ci in 0..c {
                    data[base + ci] += tv[bi * c + ci];
                }
            }
        }
        Ok(self.push(self.slots[x].shape.clone(), data, Op::AddTokenBias { x, t, b, g, c }))
    }

    pub fn gelu(&mut self, x: ValId) -> ValId {
        let data: Vec<f64> = self.slots[x].data.iter().map(|&v| super::gelu(v)).collect();
        self.push(self.slots[x].shape.clone(), data, Op::Gelu { x })
    }

    pub fn matmul(&mut self, a: ValId, b: ValId, m: usize, k: usize, n: usize) -> Result<ValId> {
        if self.slots[a].data.len() != m * k || self.slots[b].data.len() != k * n {
            return Err(Error::dim(format!(
                "matmul: a has {} elements (need {}), b has {} (need {})",
                self.slots[a].data.len(),
                m * k,
                self.slots[b].data.len(),
                k * n
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.slots[a].data, &self.slots[b].data, &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b, m, k, n }))
    }

    pub fn conv1d(
        &mut self,
        x: ValId,
        w: ValId,
        b: usize,
        t: usize,
        c_in: usize,
        c_out: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
    ) -> Result<ValId> {
        if self.slots[x].data.len() != b * t * c_in {
            return Err(Error::dim("conv1d: bad input size"));
        }
        if self.slots[w].data.len() != ksize * c_in * c_out {
            return Err(Error::dim("conv1d: bad kernel size"));
        }
        if stride == 0 {
            return Err(Error::config("conv1d: stride must be >= 1"));
        }
        if t + 2 * pad < ksize {
            return Err(Error::dim(format!(
                "conv1d: kernel {ksize} wider than padded input {}",
                t + 2 * pad
            )));
        }
        let t_out = (t + 2 * pad - ksize) / stride + 1;
        let xv = &self.slots[x].data;
        let wv = &self.slots[w].data;
        let mut out = vec![0.0; b * t_out * c_out];
        for bi in 0..b {
            for to in 0..t_out {
                let dst = &mut out[(bi * t_out + to) * c_out..(bi * t_out + to + 1) * c_out];
                for kk in 0..ksize {
                    let ti = (to * stride + kk) as isize - pad as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    let xrow = &xv[(bi * t + ti as usize) * c_in..(bi * t + ti as usize + 1) * c_in];
                    for (ci, &xval) in xrow.iter().enumerate() {
                        let wrow = &wv[(kk * c_in + ci) * c_out..(kk * c_in + ci + 1) * c_out];
                        for (d, &wval) in dst.iter_mut().zip(wrow.iter()) {
                            *d += xval * wval;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            vec![b, t_out, c_out],
            out,
            Op::Conv1d { x, w, b, t, c_in, c_out, ksize, stride, pad },
        ))
    }

    pub fn conv1d_transpose(
        &mut self,
        x: ValId,
        w: ValId,
        b: usize,
        t: usize,
        c_in: usize,
        c_out: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
    ) -> Result<ValId> {
        if self.slots[x].data.len() != b * t * c_in {
            return Err(Error::dim("conv1d_transpose: bad input size"));
        }
        if self.slots[w].data.len() != ksize * c_in * c_out {
            return Err(Error::dim("conv1d_transpose: bad kernel size"));
        }
        let t_full = (t - 1) * stride + ksize;
        if t_full < 2 * pad + 1 {
            return Err(Error::dim("conv1d_transpose: padding exceeds output"));
        }
        let t_out = t_full - 2 * pad;
        let xv = &self.slots[x].data;
        let wv = &self.slots[w].data;
        let mut out = vec![0.0; b * t_out * c_out];
        for bi in 0..b {
            for ti in 0..t {
                let xrow = &xv[(bi * t + ti) * c_in..(bi * t + ti + 1) * c_in];
                for kk in 0..ksize {
                    let to = (ti * stride + kk) as isize - pad as isize;
                    if to < 0 || to >= t_out as isize {
                        continue;
                    }
                    let dst = &mut out
                        [(bi * t_out + to as usize) * c_out..(bi * t_out + to as usize + 1) * c_out];
                    for (ci, &xval) in xrow.iter().enumerate() {
                        let wrow = &wv[(kk * c_in + ci) * c_out..(kk * c_in + ci + 1) * c_out];
                        for (d, &wval) in dst.iter_mut().zip(wrow.iter()) {
                            *d += xval * wval;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            vec![b, t_out, c_out],
            out,
            Op::ConvT1d { x, w, b, t, c_in, c_out, ksize, stride, pad },
        ))
    }

    pub fn layer_norm(
        &mut self,
        x: ValId,
        gamma: ValId,
        beta: ValId,
        rows: usize,
        cols: usize,
        eps: f64,
    ) -> Result<ValId> {
        if self.slots[x].data.len() != rows * cols {
            return Err(Error::dim("layer_norm: x numel != rows*cols"));
        }
        if self.slots[gamma].data.len() != cols || self.slots[beta].data.len() != cols {
            return Err(Error::dim("layer_norm: gamma/beta len != cols"));
        }
        let xv = &self.slots[x].data;
        let gv = &self.slots[gamma].data;
        let bv = &self.slots[beta].data;
        let mut out = vec![0.0; rows * cols];
        let mut saved = vec![0.0; rows * 2];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            saved[r * 2] = mean;
            saved[r * 2 + 1] = rstd;
            let dst = &mut out[r * cols..(r + 1) * cols];
            for c in 0..cols {
                dst[c] = gv[c] * (row[c] - mean) * rstd + bv[c];
            }
        }
        let saved_id = self.push(vec![rows, 2], saved, Op::Leaf);
        Ok(self.push(
            self.slots[x].shape.clone(),
            out,
            Op::LayerNorm { x, gamma, beta, rows, cols, eps, saved: saved_id },
        ))
    }

    /// Grouped-query attention. Self-attention when `t_q == t_k` and the
    /// same source produced q/k/v; cross-attention otherwise.
    #[allow(clippy::too_many_arguments)]
    pub fn gqa_attention(
        &mut self,
        q: ValId,
        k: ValId,
        v: ValId,
        b: usize,
        t_q: usize,
        t_k: usize,
        h_q: usize,
        h_kv: usize,
        d_h: usize,
        causal: bool,
    ) -> Result<ValId> {
        if h_kv == 0 || h_q % h_kv != 0 {
            return Err(Error::config(format!(
                "gqa: query heads {h_q} not divisible by kv heads {h_kv}"
            )));
        }
        if self.slots[q].data.len() != b * t_q * h_q * d_h {
            return Err(Error::dim("gqa: bad q size"));
        }
        if self.slots[k].data.len() != b * t_k * h_kv * d_h
            || self.slots[v].data.len() != b * t_k * h_kv * d_h
        {
            return Err(Error::dim("gqa: bad k/v size"));
        }
        if causal && t_q != t_k {
            return Err(Error::contract("gqa: causal mask needs t_q == t_k"));
        }
        let qv = &self.slots[q].data;
        let kv = &self.slots[k].data;
        let vv = &self.slots[v].data;
        let scale = 1.0 / (d_h as f64).sqrt();
        let mut out = vec![0.0; b * t_q * h_q * d_h];
        let mut probs = vec![0.0; b * h_q * t_q * t_k];
        let qidx = |bi: usize, t: usize, h: usize| ((bi * t_q + t) * h_q + h) * d_h;
        let kidx = |bi: usize, t: usize, h: usize| ((bi * t_k + t) * h_kv + h) * d_h;
        for bi in 0..b {
            for hq in 0..h_q {
                let hk = hq * h_kv / h_q;
                for ti in 0..t_q {
                    let prow =
                        &mut probs[((bi * h_q + hq) * t_q + ti) * t_k..((bi * h_q + hq) * t_q + ti + 1) * t_k];
                    let qrow = &qv[qidx(bi, ti, hq)..qidx(bi, ti, hq) + d_h];
                    let limit = if causal { ti + 1 } else { t_k };
                    let mut maxs = f64::NEG_INFINITY;
                    for tj in 0..limit {
                        let krow = &kv[kidx(bi, tj, hk)..kidx(bi, tj, hk) + d_h];
                        let s: f64 =
                            qrow.iter().zip(krow.iter()).map(|(a, b)| a * b).sum::<f64>() * scale;
                        prow[tj] = s;
                        if s > maxs {
                            maxs = s;
                        }
                    }
                    let mut denom = 0.0;
                    for item in prow.iter_mut().take(limit) {
                        *item = (*item - maxs).exp();
                        denom += *item;
                    }
                    for item in prow.iter_mut().take(limit) {
                        *item /= denom;
                    }
                    for item in prow.iter_mut().skip(limit) {
                        *item = 0.0;
                    }
                    let orow = &mut out[qidx(bi, ti, hq)..qidx(bi, ti, hq) + d_h];
                    for tj in 0..limit {
                        let p = prow[tj];
                        let vrow = &vv[kidx(bi, tj, hk)..kidx(bi, tj, hk) + d_h];
                        for (o, &vd) in orow.iter_mut().zip(vrow.iter()) {
                            *o += p * vd;
                        }
                    }
                }
            }
        }
        let saved = self.push(vec![b, h_q, t_q, t_k], probs, Op::Leaf);
        Ok(self.push(
            vec![b, t_q, h_q, d_h],
            out,
            Op::Gqa { q, k, v, b, t_q, t_k, h_q, h_kv, d_h, causal, saved },
        ))
    }

    pub fn sum_squares(&mut self, x: ValId) -> ValId {
        let s: f64 = self.slots[x].data.iter().map(|v| v * v).sum();
        self.push(vec![], vec![s], Op::SumSquares { x })
    }

    pub fn sum(&mut self, x: ValId) -> ValId {
        let s: f64 = self.slots[x].data.iter().sum();
        self.push(vec![], vec![s], Op::Sum { x })
    }

    pub fn slice_time(&mut self, x: ValId, b: usize, t: usize, c: usize, start: usize, len: usize) -> Result<ValId> {
        if self.slots[x].data.len() != b * t * c || start + len > t {
            return Err(Error::dim("slice_time out of range"));
        }
        let xv = &self.slots[x].data;
        let mut out = vec![0.0; b * len * c];
        for bi in 0..b {
            let src = &xv[(bi * t + start) * c..(bi * t + start + len) * c];
            out[bi * len * c..(bi + 1) * len * c].copy_from_slice(src);
        }
        Ok(self.push(vec![b, len, c], out, Op::SliceTime { x, b, t, c, start, len }))
    }

    pub fn mean_time(&mut self, x: ValId, b: usize, t: usize, c: usize) -> Result<ValId> {
        if self.slots[x].data.len() != b * t * c {
            return Err(Error::dim("mean_time shape mismatch"));
        }
        let xv = &self.slots[x].data;
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for ti in 0..t {
                let src = &xv[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                let dst = &mut out[bi * c..(bi + 1) * c];
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d += *s;
                }
            }
        }
        let inv = 1.0 / t as f64;
        for v in out.iter_mut() {
            *v *= inv;
        }
        Ok(self.push(vec![b, c], out, Op::MeanTime { x, b, t, c }))
    }

    pub fn embed_rows(&mut self, table: ValId, ids: &[usize]) -> Result<ValId> {
        let shape = self.slots[table].shape.clone();
        if shape.len() != 2 {
            return Err(Error::dim("embed_rows: table must be 2-D"));
        }
        let (vocab, dim) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Decode(format!("embedding id {bad} out of range {vocab}")));
        }
        let tv = &self.slots[table].data;
        let mut out = vec![0.0; ids.len() * dim];
        for (i, &id) in ids.iter().enumerate() {
            out[i * dim..(i + 1) * dim].copy_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            Op::EmbedRows { table, ids: ids.to_vec(), dim },
        ))
    }

    /// Mean negative log-likelihood over rows; `logits`: [n, k].
    pub fn cross_entropy(&mut self, logits: ValId, targets: &[usize], n: usize, k: usize) -> Result<ValId> {
        if self.slots[logits].data.len() != n * k || targets.len() != n {
            return Err(Error::dim("cross_entropy shape mismatch"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::contract(format!("cross_entropy target {bad} >= {k}")));
        }
        let lv = &self.slots[logits].data;
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let prow = &mut probs[i * k..(i + 1) * k];
            let mut denom = 0.0;
            for (p, &x) in prow.iter_mut().zip(row.iter()) {
                *p = (x - m).exp();
                denom += *p;
            }
            for p in prow.iter_mut() {
                *p /= denom;
            }
            loss -= prow[targets[i]].ln();
        }
        loss /= n as f64;
        let saved = self.push(vec![n, k], probs, Op::Leaf);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), n, k, saved },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar `loss` over the whole tape.
    pub fn backward(&self, loss: ValId) -> Result<Gradients> {
        if self.slots[loss].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.slots[loss].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.slots.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let Some(gout) = grads[id].take() else { continue };
            match &self.slots[id].op {
                Op::Leaf => {
                    grads[id] = Some(gout);
                    continue;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, &gout, self.slots[*a].data.len());
                    accumulate(&mut grads, *b, &gout, self.slots[*b].data.len());
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, *a, &gout, self.slots[*a].data.len());
                    let neg: Vec<f64> = gout.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, &neg, self.slots[*b].data.len());
                }
                Op::Mul { a, b } => {
                    let av = &self.slots[*a].data;
                    let bv = &self.slots[*b].data;
                    let ga: Vec<f64> = gout.iter().zip(bv.iter()).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = gout.iter().zip(av.iter()).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads, *a, &ga, av.len());
                    accumulate(&mut grads, *b, &gb, bv.len());
                }
                Op::Scale { x, c } => {
                    let gx: Vec<f64> = gout.iter().map(|g| g * c).collect();
                    accumulate(&mut grads, *x, &gx, self.slots[*x].data.len());
                }
                Op::AddBias { x, bias, rows, cols } => {
                    accumulate(&mut grads, *x, &gout, rows * cols);
                    let mut gb = vec![0.0; *cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            gb[c] += gout[r * cols + c];
                        }
                    }
                    accumulate(&mut grads, *bias, &gb, *cols);
                }
                Op::AddTokenBias { x, t, b, g, c } => {
                    accumulate(&mut grads, *x, &gout, b * g * c);
                    let mut gt = vec![0.0; b * c];
                    for bi in 0..*b {
                        for gi in 0..*g {
                            let base = (bi * g + gi) * c;
                            for ci in 0..*c {
                                gt[bi * c + ci] += gout[base + ci];
                            }
                        }
                    }
                    accumulate(&mut grads, *t, &gt, b * c);
                }
                Op::Gelu { x } => {
                    let xv = &self.slots[*x].data;
                    let gx: Vec<f64> = gout
                        .iter()
                        .zip(xv.iter())
                        .map(|(g, &v)| g * super::gelu_grad(v))
                        .collect();
                    accumulate(&mut grads, *x, &gx, xv.len());
                }
                Op::Matmul { a, b, m, k, n } => {
                    let av = &self.slots[*a].data;
                    let bv = &self.slots[*b].data;
                    // dA = dOut @ B^T
                    let mut ga = vec![0.0; m * k];
                    for i in 0..*m {
                        for j in 0..*n {
                            let g = gout[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            let brow = &bv[j..];
                            let garow = &mut ga[i * k..(i + 1) * k];
                            for (p, gv) in garow.iter_mut().enumerate() {
                                *gv += g * brow[p * n];
                            }
                        }
                    }
                    // dB = A^T @ dOut
                    let mut gb = vec![0.0; k * n];
                    for i in 0..*m {
                        let arow = &av[i * k..(i + 1) * k];
                        let grow = &gout[i * n..(i + 1) * n];
                        for (p, &apv) in arow.iter().enumerate() {
                            if apv == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            for (gbv, &gv) in gbrow.iter_mut().zip(grow.iter()) {
                                *gbv += apv * gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, &ga, m * k);
                    accumulate(&mut grads, *b, &gb, k * n);
                }
                Op::Conv1d { x, w, b, t, c_in, c_out, ksize, stride, pad } => {
                    let t_out = (t + 2 * pad - ksize) / stride + 1;
                    let xv = &self.slots[*x].data;
                    let wv = &self.slots[*w].data;
                    let mut gx = vec![0.0; b * t * c_in];
                    let mut gw = vec![0.0; ksize * c_in * c_out];
                    for bi in 0..*b {
                        for to in 0..t_out {
                            let grow = &gout[(bi * t_out + to) * c_out..(bi * t_out + to + 1) * c_out];
                            for kk in 0..*ksize {
                                let ti = (to * stride + kk) as isize - *pad as isize;
                                if ti < 0 || ti >= *t as isize {
                                    continue;
                                }
                                let ti = ti as usize;
                                let xrow = &xv[(bi * t + ti) * c_in..(bi * t + ti + 1) * c_in];
                                let gxrow = &mut gx[(bi * t + ti) * c_in..(bi * t + ti + 1) * c_in];
                                for ci in 0..*c_in {
                                    let wrow = &wv[(kk * c_in + ci) * c_out..(kk * c_in + ci + 1) * c_out];
                                    let gwrow =
                                        &mut gw[(kk * c_in + ci) * c_out..(kk * c_in + ci + 1) * c_out];
                                    let mut acc = 0.0;
                                    for co in 0..*c_out {
                                        acc += grow[co] * wrow[co];
                                        gwrow[co] += grow[co] * xrow[ci];
                                    }
                                    gxrow[ci] += acc;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &gx, gx.len());
                    accumulate(&mut grads, *w, &gw, gw.len());
                }
                Op::ConvT1d { x, w, b, t, c_in, c_out, ksize, stride, pad } => {
                    let t_out = (t - 1) * stride + ksize - 2 * pad;
                    let xv = &self.slots[*x].data;
                    let wv = &self.slots[*w].data;
                    let mut gx = vec![0.0; b * t * c_in];
                    let mut gw = vec![0.0; ksize * c_in * c_out];
                    for bi in 0..*b {
                        for ti in 0..*t {
                            let xrow = &xv[(bi * t + ti) * c_in..(bi * t + ti + 1) * c_in];
                            let gxrow = &mut gx[(bi * t + ti) * c_in..(bi * t + ti + 1) * c_in];
                            for kk in 0..*ksize {
                                let to = (ti * stride + kk) as isize - *pad as isize;
                                if to < 0 || to >= t_out as isize {
                                    continue;
                                }
                                let grow = &gout[(bi * t_out + to as usize) * c_out
                                    ..(bi * t_out + to as usize + 1) * c_out];
                                for ci in 0..*c_in {
                                    let wrow = &wv[(kk * c_in + ci) * c_out..(kk * c_in + ci + 1) * c_out];
                                    let gwrow =
                                        &mut gw[(kk * c_in + ci) * c_out..(kk * c_in + ci + 1) * c_out];
                                    let mut acc = 0.0;
                                    for co in 0..*c_out {
                                        acc += grow[co] * wrow[co];
                                        gwrow[co] += grow[co] * xrow[ci];
                                    }
                                    gxrow[ci] += acc;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &gx, gx.len());
                    accumulate(&mut grads, *w, &gw, gw.len());
                }
                Op::LayerNorm { x, gamma, beta, rows, cols, eps: _, saved } => {
                    let xv = &self.slots[*x].data;
                    let gv = &self.slots[*gamma].data;
                    let sv = &self.slots[*saved].data;
                    let mut gx = vec![0.0; rows * cols];
                    let mut gg = vec![0.0; *cols];
                    let mut gb = vec![0.0; *cols];
                    let nc = *cols as f64;
                    for r in 0..*rows {
                        let mean = sv[r * 2];
                        let rstd = sv[r * 2 + 1];
                        let xrow = &xv[r * cols..(r + 1) * cols];
                        let grow = &gout[r * cols..(r + 1) * cols];
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for c in 0..*cols {
                            let xhat = (xrow[c] - mean) * rstd;
                            let dy = grow[c] * gv[c];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                            gg[c] += grow[c] * xhat;
                            gb[c] += grow[c];
                        }
                        let gxrow = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..*cols {
                            let xhat = (xrow[c] - mean) * rstd;
                            let dy = grow[c] * gv[c];
                            gxrow[c] = rstd * (dy - sum_dy / nc - xhat * sum_dy_xhat / nc);
                        }
                    }
                    accumulate(&mut grads, *x, &gx, gx.len());
                    accumulate(&mut grads, *gamma, &gg, gg.len());
                    accumulate(&mut grads, *beta, &gb, gb.len());
                }
                Op::Gqa { q, k, v, b, t_q, t_k, h_q, h_kv, d_h, causal, saved } => {
                    let qv = &self.slots[*q].data;
                    let kvd = &self.slots[*k].data;
                    let vv = &self.slots[*v].data;
                    let probs = &self.slots[*saved].data;
                    let scale = 1.0 / (*d_h as f64).sqrt();
                    let mut gq = vec![0.0; qv.len()];
                    let mut gk = vec![0.0; kvd.len()];
                    let mut gv = vec![0.0; vv.len()];
                    let qidx = |bi: usize, t: usize, h: usize| ((bi * t_q + t) * h_q + h) * d_h;
                    let kidx = |bi: usize, t: usize, h: usize| ((bi * t_k + t) * h_kv + h) * d_h;
                    for bi in 0..*b {
                        for hq in 0..*h_q {
                            let hk = hq * h_kv / h_q;
                            for ti in 0..*t_q {
                                let limit = if *causal { ti + 1 } else { *t_k };
                                let prow = &probs
                                    [((bi * h_q + hq) * t_q + ti) * t_k..((bi * h_q + hq) * t_q + ti + 1) * t_k];
                                let grow = &gout[qidx(bi, ti, hq)..qidx(bi, ti, hq) + d_h];
                                // dp[j] = dOut . v_j ; dv_j += p_j * dOut
                                let mut dp = vec![0.0; limit];
                                for (tj, dpj) in dp.iter_mut().enumerate() {
                                    let vrow = &vv[kidx(bi, tj, hk)..kidx(bi, tj, hk) + d_h];
                                    let gvrow = &mut gv[kidx(bi, tj, hk)..kidx(bi, tj, hk) + d_h];
                                    let p = prow[tj];
                                    let mut acc = 0.0;
                                    for d in 0..*d_h {
                                        acc += grow[d] * vrow[d];
                                        gvrow[d] += p * grow[d];
                                    }
                                    *dpj = acc;
                                }
                                // softmax backward: ds = p * (dp - sum(p*dp))
                                let dot: f64 =
                                    prow.iter().take(limit).zip(dp.iter()).map(|(p, d)| p * d).sum();
                                let qrow = &qv[qidx(bi, ti, hq)..qidx(bi, ti, hq) + d_h];
                                let gqrow_base = qidx(bi, ti, hq);
                                for tj in 0..limit {
                                    let ds = prow[tj] * (dp[tj] - dot) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let krow = &kvd[kidx(bi, tj, hk)..kidx(bi, tj, hk) + d_h];
                                    let gkrow = &mut gk[kidx(bi, tj, hk)..kidx(bi, tj, hk) + d_h];
                                    for d in 0..*d_h {
                                        gq[gqrow_base + d] += ds * krow[d];
                                        gkrow[d] += ds * qrow[d];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *q, &gq, gq.len());
                    accumulate(&mut grads, *k, &gk, gk.len());
                    accumulate(&mut grads, *v, &gv, gv.len());
                }
                Op::SumSquares { x } => {
                    let g = gout[0];
                    let xv = &self.slots[*x].data;
                    let gx: Vec<f64> = xv.iter().map(|&v| 2.0 * v * g).collect();
                    accumulate(&mut grads, *x, &gx, xv.len());
                }
                Op::Sum { x } => {
                    let g = gout[0];
                    let gx = vec![g; self.slots[*x].data.len()];
                    accumulate(&mut grads, *x, &gx, gx.len());
                }
                Op::SliceTime { x, b, t, c, start, len } => {
                    let mut gx = vec![0.0; b * t * c];
                    for bi in 0..*b {
                        let dst = &mut gx[(bi * t + start) * c..(bi * t + start + len) * c];
                        dst.copy_from_slice(&gout[bi * len * c..(bi + 1) * len * c]);
                    }
                    accumulate(&mut grads, *x, &gx, gx.len());
                }
                Op::MeanTime { x, b, t, c } => {
                    let inv = 1.0 / *t as f64;
                    let mut gx = vec![0.0; b * t * c];
                    for bi in 0..*b {
                        for ti in 0..*t {
                            let dst = &mut gx[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                            let src = &gout[bi * c..(bi + 1) * c];
                            for (d, s) in dst.iter_mut().zip(src.iter()) {
                                *d = s * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &gx, gx.len());
                }
                Op::EmbedRows { table, ids, dim } => {
                    let mut gt = vec![0.0; self.slots[*table].data.len()];
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * dim..(id + 1) * dim];
                        let src = &gout[i * dim..(i + 1) * dim];
                        for (d, s) in dst.iter_mut().zip(src.iter()) {
                            *d += *s;
                        }
                    }
                    accumulate(&mut grads, *table, &gt, gt.len());
                }
                Op::CrossEntropy { logits, targets, n, k, saved } => {
                    let g = gout[0] / *n as f64;
                    let probs = &self.slots[*saved].data;
                    let mut gl = probs.iter().map(|p| p * g).collect::<Vec<f64>>();
                    for (i, &t) in targets.iter().enumerate() {
                        gl[i * k + t] -= g;
                    }
                    accumulate(&mut grads, *logits, &gl, gl.len());
                }
            }
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: ValId, delta: &[f64], numel: usize) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; numel]);
    for (d, s) in slot.iter_mut().zip(delta.iter()) {
        *d += *s;
    }
}

/// c += a @ b, row-major, ikj order for cache locality.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &apv) in arow.iter().enumerate() {
            if apv == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += apv * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::params::ParamStore;

    #[test]
    fn linear_identity_case() {
        // x = [[1,2]], W = I, b = 0 -> [[1,2]]
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.constant(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = tape.matmul(x, w, 1, 2, 2).unwrap();
        assert_eq!(tape.data(y), &[1.0, 2.0]);
    }

    #[test]
    fn linear_hand_oracle() {
        // x=[[1,0],[0,1]], W=[[3,4],[5,6]], b=[1,1] -> [[4,5],[6,7]]
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let w = tape.constant(&Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = tape.constant(&Tensor::from_vec(vec![1.0, 1.0]));
        let xw = tape.matmul(x, w, 2, 2, 2).unwrap();
        let y = tape.add_bias(xw, b, 2, 2).unwrap();
        assert_eq!(tape.data(y), &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn linear_zero_input_gives_bias_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[3, 2]));
        let w = tape.constant(&Tensor::new(vec![2, 1], vec![9.0, -2.0]).unwrap());
        let b = tape.constant(&Tensor::from_vec(vec![7.0]));
        let xw = tape.matmul(x, w, 3, 2, 1).unwrap();
        let y = tape.add_bias(xw, b, 3, 1).unwrap();
        assert_eq!(tape.data(y), &[7.0, 7.0, 7.0]);
    }

    #[test]
    fn linear_shape_mismatch_is_dim_error() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[1, 3]));
        let w = tape.constant(&Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.matmul(x, w, 1, 3, 2), Err(Error::Dim(_))));
    }

    #[test]
    fn conv1d_direct_oracle() {
        // T=4, k=2, stride=2, pad=0, x=[1,2,3,4], kernel=[1,1] -> [3,7]
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.constant(&Tensor::new(vec![2, 1, 1], vec![1.0, 1.0]).unwrap());
        let y = tape.conv1d(x, w, 1, 4, 1, 1, 2, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 1]);
        assert_eq!(tape.data(y), &[3.0, 7.0]);
    }

    #[test]
    fn conv1d_k1_identity() {
        let mut tape = Tape::new();
        let xs = vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.5];
        let x = tape.constant(&Tensor::new(vec![1, 3, 2], xs.clone()).unwrap());
        // channel-identity 2x2 kernel
        let w = tape.constant(&Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = tape.conv1d(x, w, 1, 3, 2, 2, 1, 1, 0).unwrap();
        assert_eq!(tape.data(y), xs.as_slice());
    }

    #[test]
    fn conv1d_kernel_wider_than_input_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[1, 2, 1]));
        let w = tape.constant(&Tensor::zeros(&[5, 1, 1]));
        assert!(tape.conv1d(x, w, 1, 2, 1, 1, 5, 1, 1).is_err());
    }

    #[test]
    fn conv_transpose_round_trip_lengths() {
        // transpose_conv(conv(x)) restores T for a grid of (T, k, stride)
        // with symmetric padding pad = (k - stride) / 2 when divisible.
        for &(t, k, s) in &[(8usize, 4usize, 2usize), (16, 4, 2), (12, 3, 1), (32, 2, 2), (6, 3, 1)] {
            if k < s || (k - s) % 2 != 0 {
                continue;
            }
            let pad = (k - s) / 2;
            if t + 2 * pad < k {
                continue;
            }
            let mut tape = Tape::new();
            let x = tape.constant(&Tensor::zeros(&[1, t, 1]));
            let w = tape.constant(&Tensor::zeros(&[k, 1, 1]));
            let mid = tape.conv1d(x, w, 1, t, 1, 1, k, s, pad).unwrap();
            let t_mid = tape.shape(mid)[1];
            let back = tape
                .conv1d_transpose(mid, w, 1, t_mid, 1, 1, k, s, pad)
                .unwrap();
            assert_eq!(tape.shape(back)[1], t, "t={t} k={k} s={s}");
        }
    }

    #[test]
    fn gqa_single_key_returns_v() {
        // T=1: softmax over one key is 1, output equals v.
        let mut tape = Tape::new();
        let q = tape.constant(&Tensor::new(vec![1, 1, 2, 2], vec![0.3, -0.7, 2.0, 1.0]).unwrap());
        let k = tape.constant(&Tensor::new(vec![1, 1, 1, 2], vec![0.5, 0.5]).unwrap());
        let v = tape.constant(&Tensor::new(vec![1, 1, 1, 2], vec![4.0, -3.0]).unwrap());
        let y = tape.gqa_attention(q, k, v, 1, 1, 1, 2, 1, 2, false).unwrap();
        assert_eq!(tape.data(y), &[4.0, -3.0, 4.0, -3.0]);
    }

    #[test]
    fn gqa_uniform_queries_average_values() {
        // equal q,k everywhere -> uniform probabilities -> mean of v.
        let mut tape = Tape::new();
        let t = 4;
        let q = tape.constant(&Tensor::new(vec![1, t, 1, 1], vec![1.0; t]).unwrap());
        let k = tape.constant(&Tensor::new(vec![1, t, 1, 1], vec![1.0; t]).unwrap());
        let vvals = vec![1.0, 2.0, 3.0, 6.0];
        let v = tape.constant(&Tensor::new(vec![1, t, 1, 1], vvals.clone()).unwrap());
        let y = tape.gqa_attention(q, k, v, 1, t, t, 1, 1, 1, false).unwrap();
        let mean = vvals.iter().sum::<f64>() / t as f64;
        for &o in tape.data(y) {
            assert!((o - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn gqa_head_divisibility_enforced() {
        let mut tape = Tape::new();
        let q = tape.constant(&Tensor::zeros(&[1, 1, 3, 2]));
        let k = tape.constant(&Tensor::zeros(&[1, 1, 2, 2]));
        let v = tape.constant(&Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(
            tape.gqa_attention(q, k, v, 1, 1, 1, 3, 2, 2, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let loss = tape.sum(xv);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(xv).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_squares_analytic() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let loss = tape.sum_squares(xv);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(xv).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn off_path_parameters_get_zero_gradient() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::from_vec(vec![2.0]));
        let y = store.register("y", Tensor::from_vec(vec![5.0]));
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let _yv = tape.param(&store, y);
        let loss = tape.sum_squares(xv);
        let grads = tape.backward(loss).unwrap();
        let by_param = grads.by_param(&tape, &store);
        assert_eq!(by_param[x.index()].data, vec![4.0]);
        assert_eq!(by_param[y.index()].data, vec![0.0]);
    }

    #[test]
    fn two_backward_calls_are_identical_and_nonmutating() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::from_vec(vec![0.5, 1.5]));
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let g = tape.gelu(xv);
        let loss = tape.sum_squares(g);
        let fwd = tape.data(g).to_vec();
        let g1 = tape.backward(loss).unwrap().wrt(xv).unwrap().to_vec();
        let g2 = tape.backward(loss).unwrap().wrt(xv).unwrap().to_vec();
        assert_eq!(g1, g2);
        assert_eq!(tape.data(g), fwd.as_slice());
    }
}
