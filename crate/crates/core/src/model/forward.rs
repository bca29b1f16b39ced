//! Forward passes.
//!
//! All passes share one layer routine that works on an arbitrary subset of
//! rows ("active rows") against a per-layer K/V view. Full prefill makes
//! every row active and writes every K/V row. The hybrid pass starts from
//! stitched chunk caches and only writes K/V for rows selected for
//! recomputation plus the query rows.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use super::{detokenize, Model, ModelError};
use crate::cache::{AssembledContext, ChunkCache, SelectionMask};
use crate::digest::Hasher;
use crate::tensor::{matmul, rmsnorm_row, Tensor};

/// Cached keys and values of one layer. `k` carries RoPE at `positions`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub k: Tensor,
    pub v: Tensor,
    pub positions: Vec<usize>,
}

impl LayerKv {
    pub fn empty(n_heads: usize, d_head: usize) -> Self {
        Self {
            k: Tensor::zeros(vec![0, n_heads, d_head]),
            v: Tensor::zeros(vec![0, n_heads, d_head]),
            positions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn write(&mut self, idx: usize, pos: usize, k: &[f32], v: &[f32]) -> Result<(), ModelError> {
        if idx < self.len() {
            self.k.row_mut(idx).copy_from_slice(k);
            self.v.row_mut(idx).copy_from_slice(v);
            self.positions[idx] = pos;
        } else if idx == self.len() {
            self.k.push_row(k)?;
            self.v.push_row(v)?;
            self.positions.push(pos);
        } else {
            return Err(ModelError::PositionOverflow(pos));
        }
        Ok(())
    }

    pub(crate) fn truncate(&mut self, n: usize) {
        if n >= self.len() {
            return;
        }
        let keep_k: Vec<usize> = (0..n).collect();
        self.k = self.k.gather_rows(&keep_k);
        self.v = self.v.gather_rows(&keep_k);
        self.positions.truncate(n);
    }
}

/// APE-style attention reshaping: context-bucket logits are divided by
/// `temperature` and their exponentials multiplied by `scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reshape {
    pub temperature: f32,
    pub scale: f32,
}

/// Attention weights over `logits` where `context[j]` marks the context bucket.
/// Neutral parameters reproduce a plain softmax bit for bit.
pub(crate) fn bucket_softmax(logits: &[f32], context: impl Fn(usize) -> bool, reshape: Option<Reshape>, out: &mut Vec<f64>) {
    let (t, s) = match reshape {
        Some(r) => (f64::from(r.temperature), f64::from(r.scale)),
        None => (1.0, 1.0),
    };
    out.clear();
    out.extend(logits.iter().enumerate().map(|(j, &l)| {
        let l = f64::from(l);
        if context(j) {
            l / t
        } else {
            l
        }
    }));
    let max = out.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for (j, w) in out.iter_mut().enumerate() {
        *w = libm::exp(*w - max);
        if context(j) {
            *w *= s;
        }
        sum += *w;
    }
    for w in out.iter_mut() {
        *w /= sum;
    }
}

/// How decode rows attend after a forward pass: which keys form the context
/// bucket (per layer, unselected context tokens) and whether to reshape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionPolicy {
    pub n_ctx: usize,
    pub mask: SelectionMask,
    pub reshape: Option<Reshape>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Eos,
    MaxTokens,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    /// Generated ids, excluding the EOS that stopped generation.
    pub token_ids: Vec<u32>,
    pub text: Vec<u8>,
    pub logits_last_prefill: Vec<f32>,
    /// SHA-256 of every layer's K/V after prefill.
    pub kv_fingerprint: [u8; 32],
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prefill {
    pub layers: Vec<LayerKv>,
    pub logits: Vec<f32>,
    /// Layer inputs (residual stream before each requested layer), `[n × d_model]`.
    pub layer_inputs: BTreeMap<usize, Tensor>,
}

pub struct HybridOutput {
    pub ctx: AssembledContext,
    pub logits: Vec<f32>,
}

/// Strategy callback consulted by [`Model::hybrid_forward`].
///
/// At each layer returned by `selection_layers` (all `>= 1`) the layer
/// before it runs full width, and `on_layer` receives freshly projected keys
/// for every context token next to the cached ones, both `[n_ctx × H × d_head]`
/// at the same global positions. Returning `Some(indices)` replaces the
/// selection mask from that layer on.
pub trait SelectionHook {
    fn selection_layers(&self) -> Vec<usize>;
    fn on_layer(&mut self, layer: usize, fresh_k: &Tensor, cached_k: &Tensor) -> Result<Option<Vec<usize>>, ModelError>;
}

/// Leaves the context's mask untouched.
pub struct NoSelection;

impl SelectionHook for NoSelection {
    fn selection_layers(&self) -> Vec<usize> {
        Vec::new()
    }
    fn on_layer(&mut self, _: usize, _: &Tensor, _: &Tensor) -> Result<Option<Vec<usize>>, ModelError> {
        Ok(None)
    }
}

/// Active rows of one pass: K/V row index, RoPE position and hidden state.
struct Rows {
    idx: Vec<usize>,
    pos: Vec<usize>,
    hidden: Vec<f32>,
}

impl Rows {
    fn retain(&mut self, keep: &[bool], d: usize) {
        let mut idx = Vec::new();
        let mut pos = Vec::new();
        let mut hidden = Vec::new();
        for (r, &k) in keep.iter().enumerate() {
            if k {
                idx.push(self.idx[r]);
                pos.push(self.pos[r]);
                hidden.extend_from_slice(&self.hidden[r * d..(r + 1) * d]);
            }
        }
        *self = Rows { idx, pos, hidden };
    }
}

struct Qkv {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
}

impl Qkv {
    fn retain(&mut self, keep: &[bool], d: usize) {
        for buf in [&mut self.q, &mut self.k, &mut self.v] {
            let mut out = Vec::new();
            for (r, &k) in keep.iter().enumerate() {
                if k {
                    out.extend_from_slice(&buf[r * d..(r + 1) * d]);
                }
            }
            *buf = out;
        }
    }
}

/// Per-layer attention layout for the active rows.
struct LayerPlan<'a> {
    /// Whether each active row writes its K/V into the view.
    write: &'a [bool],
    /// Whether each active row attends with reshaping.
    reshaped: &'a [bool],
    /// Keys (by view index) in the context bucket.
    context_keys: &'a dyn Fn(usize) -> bool,
    reshape: Option<Reshape>,
}

fn silu(x: f32) -> f32 {
    x / (1.0 + libm::expf(-x))
}

fn mat(rows: usize, cols: usize, data: Vec<f32>) -> Tensor {
    Tensor::new(vec![rows, cols], data).expect("row-major buffer")
}

impl Model {
    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        match tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&t) => Err(ModelError::TokenOutOfRange(t)),
            None => Ok(()),
        }
    }

    fn embed(&self, token: u32) -> &[f32] {
        self.embedding.row(token as usize)
    }

    fn project(&self, l: usize, rows: &Rows) -> Qkv {
        let d = self.config.d_model;
        let lw = &self.layers[l];
        let n = rows.idx.len();
        let mut x = rows.hidden.clone();
        for row in x.chunks_exact_mut(d) {
            rmsnorm_row(row, lw.attn_norm.data(), self.config.norm_eps);
        }
        let x = mat(n, d, x);
        let mut q = matmul(&x, &lw.wq).expect("d_model shapes").into_data();
        let mut k = matmul(&x, &lw.wk).expect("d_model shapes").into_data();
        let v = matmul(&x, &lw.wv).expect("d_model shapes").into_data();
        let dh = self.config.d_head();
        for (r, &p) in rows.pos.iter().enumerate() {
            for head in q[r * d..(r + 1) * d].chunks_exact_mut(dh) {
                self.rope().rotate(head, p as f64);
            }
            for head in k[r * d..(r + 1) * d].chunks_exact_mut(dh) {
                self.rope().rotate(head, p as f64);
            }
        }
        Qkv { q, k, v }
    }

    /// Writes K/V, attends over the view and applies the residual blocks.
    fn attend(&self, l: usize, rows: &mut Rows, qkv: &Qkv, kv: &mut LayerKv, plan: &LayerPlan<'_>) -> Result<(), ModelError> {
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let dh = self.config.d_head();
        let n = rows.idx.len();
        for r in 0..n {
            if plan.write[r] {
                let span = r * d..(r + 1) * d;
                kv.write(rows.idx[r], rows.pos[r], &qkv.k[span.clone()], &qkv.v[span])?;
            }
        }
        let scale = 1.0 / libm::sqrtf(dh as f32);
        let mut attn = vec![0.0f32; n * d];
        let mut logits = Vec::new();
        let mut weights = Vec::new();
        for r in 0..n {
            let keys = rows.idx[r] + 1;
            if keys > kv.len() {
                return Err(ModelError::PositionOverflow(rows.pos[r]));
            }
            let reshape = if plan.reshaped[r] { plan.reshape } else { None };
            for head in 0..h {
                let off = head * dh;
                let q = &qkv.q[r * d + off..r * d + off + dh];
                logits.clear();
                for j in 0..keys {
                    let kr = &kv.k.row(j)[off..off + dh];
                    let dot: f32 = q.iter().zip(kr).map(|(a, b)| a * b).sum();
                    logits.push(dot * scale);
                }
                bucket_softmax(&logits, plan.context_keys, reshape, &mut weights);
                let out = &mut attn[r * d + off..r * d + off + dh];
                for (j, &w) in weights.iter().enumerate() {
                    let w = w as f32;
                    for (o, &vv) in out.iter_mut().zip(&kv.v.row(j)[off..off + dh]) {
                        *o += w * vv;
                    }
                }
            }
        }
        let lw = &self.layers[l];
        let proj = matmul(&mat(n, d, attn), &lw.wo)?;
        for (hv, a) in rows.hidden.iter_mut().zip(proj.data()) {
            *hv += a;
        }
        let mut x = rows.hidden.clone();
        for row in x.chunks_exact_mut(d) {
            rmsnorm_row(row, lw.ffn_norm.data(), self.config.norm_eps);
        }
        let mut up = matmul(&mat(n, d, x), &lw.w_up)?.into_data();
        for u in up.iter_mut() {
            *u = silu(*u);
        }
        let down = matmul(&mat(n, self.config.d_ff(), up), &lw.w_down)?;
        for (hv, a) in rows.hidden.iter_mut().zip(down.data()) {
            *hv += a;
        }
        Ok(())
    }

    fn logits(&self, hidden: &[f32]) -> Vec<f32> {
        let mut x = hidden.to_vec();
        rmsnorm_row(&mut x, self.final_norm.data(), self.config.norm_eps);
        let d = self.config.d_model;
        matmul(&mat(1, d, x), &self.head).expect("head shape").into_data()
    }

    /// Causal prefill of `tokens` at positions `0..n`.
    pub fn full_prefill(&self, tokens: &[u32]) -> Result<Prefill, ModelError> {
        self.prefill_at(tokens, 0, &[])
    }

    /// Causal prefill with the first token at position `start`, recording
    /// the residual stream entering each layer in `input_layers`.
    pub fn prefill_at(&self, tokens: &[u32], start: usize, input_layers: &[usize]) -> Result<Prefill, ModelError> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Err(ModelError::EmptyQuery);
        }
        let n = tokens.len();
        if start + n > self.config.max_positions {
            return Err(ModelError::SequenceTooLong { len: start + n, max: self.config.max_positions });
        }
        let d = self.config.d_model;
        let mut rows = Rows {
            idx: (0..n).collect(),
            pos: (start..start + n).collect(),
            hidden: tokens.iter().flat_map(|&t| self.embed(t).iter().copied()).collect(),
        };
        let write = vec![true; n];
        let plain = vec![false; n];
        let no_ctx = |_: usize| false;
        let mut layers = Vec::with_capacity(self.config.n_layers);
        let mut layer_inputs = BTreeMap::new();
        for l in 0..self.config.n_layers {
            if input_layers.contains(&l) {
                layer_inputs.insert(l, mat(n, d, rows.hidden.clone()));
            }
            let mut kv = LayerKv::empty(self.config.n_heads, self.config.d_head());
            let qkv = self.project(l, &rows);
            let plan = LayerPlan { write: &write, reshaped: &plain, context_keys: &no_ctx, reshape: None };
            self.attend(l, &mut rows, &qkv, &mut kv, &plan)?;
            layers.push(kv);
        }
        let logits = self.logits(&rows.hidden[(n - 1) * d..]);
        Ok(Prefill { layers, logits, layer_inputs })
    }

    /// Mean attention weight from the last `n_query` rows (all heads) of
    /// `layer` onto every earlier position of a full prefill of `tokens`.
    pub fn attention_profile(&self, tokens: &[u32], layer: usize, n_query: usize) -> Result<Vec<f64>, ModelError> {
        let layer = layer.min(self.config.n_layers - 1);
        let mut pre = self.prefill_at(tokens, 0, &[layer])?;
        let n = tokens.len();
        let n_query = n_query.min(n);
        let d = self.config.d_model;
        let dh = self.config.d_head();
        let inputs = pre.layer_inputs.remove(&layer).expect("recorded");
        let rows = Rows {
            idx: (n - n_query..n).collect(),
            pos: (n - n_query..n).collect(),
            hidden: inputs.data()[(n - n_query) * d..].to_vec(),
        };
        let qkv = self.project(layer, &rows);
        let kv = &pre.layers[layer];
        let scale = 1.0 / libm::sqrtf(dh as f32);
        let mut acc = vec![0.0f64; n];
        let mut logits = Vec::new();
        let mut weights = Vec::new();
        for r in 0..n_query {
            for head in 0..self.config.n_heads {
                let off = head * dh;
                let q = &qkv.q[r * d + off..r * d + off + dh];
                logits.clear();
                for j in 0..=rows.idx[r] {
                    let kr = &kv.k.row(j)[off..off + dh];
                    let dot: f32 = q.iter().zip(kr).map(|(a, b)| a * b).sum();
                    logits.push(dot * scale);
                }
                bucket_softmax(&logits, |_| false, None, &mut weights);
                for (a, w) in acc.iter_mut().zip(&weights) {
                    *a += w;
                }
            }
        }
        let denom = (n_query * self.config.n_heads) as f64;
        Ok(acc.into_iter().map(|a| a / denom).collect())
    }

    /// Prefills `chunk` in isolation behind `prefix_len` blank tokens, drops
    /// the prefix rows and re-bases the kept keys to positions `0..n`.
    pub fn build_chunk_cache(&self, chunk: &[u32], prefix_len: usize, activation_layers: &[usize]) -> Result<ChunkCache, ModelError> {
        if chunk.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        if let Some(&l) = activation_layers.iter().find(|&&l| l >= self.config.n_layers) {
            return Err(ModelError::MissingActivations { layer: l });
        }
        let mut tokens = vec![super::PREFIX_TOKEN; prefix_len];
        tokens.extend_from_slice(chunk);
        let pre = self.prefill_at(&tokens, 0, activation_layers)?;
        let n = chunk.len();
        let keep: Vec<usize> = (prefix_len..prefix_len + n).collect();
        let layers = pre
            .layers
            .into_iter()
            .map(|kv| {
                let k = kv.k.gather_rows(&keep);
                let k = crate::tensor::rope_shift(&k, -(prefix_len as i64), self.rope())?;
                Ok(LayerKv { k, v: kv.v.gather_rows(&keep), positions: (0..n).collect() })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let activations = pre.layer_inputs.into_iter().map(|(l, t)| (l, t.gather_rows(&keep))).collect();
        let fingerprint = self.fingerprint();
        Ok(ChunkCache {
            chunk_id: crate::cache::cache_key(chunk, prefix_len, &fingerprint, &self.config),
            tokens: chunk.to_vec(),
            prefix_len,
            layers,
            activations,
            model_fingerprint: fingerprint,
        })
    }

    /// Layer-by-layer pass over stitched caches.
    ///
    /// Layer 0 runs over every context row whenever layer 1 is a selection
    /// layer, reading the cached layer-0 K/V (it depends only on embeddings
    /// and positions). From layer 1 on, only rows selected in the mask and
    /// the query rows propagate; selected rows overwrite their K/V in the
    /// merged view. Rows that enter the mask later take their layer input
    /// from the context's cached activations. Query rows (and, when
    /// reshaping is set, selected rows) attend with the two-bucket softmax,
    /// where selected context tokens count as local keys.
    pub fn hybrid_forward(&self, ctx: &AssembledContext, hook: &mut dyn SelectionHook) -> Result<HybridOutput, ModelError> {
        let n_ctx = ctx.context_tokens.len();
        if n_ctx == 0 {
            return Err(ModelError::EmptyContext);
        }
        if ctx.query_tokens.is_empty() {
            return Err(ModelError::EmptyQuery);
        }
        self.check_tokens(&ctx.context_tokens)?;
        self.check_tokens(&ctx.query_tokens)?;
        let total = n_ctx + ctx.query_tokens.len();
        if total > self.config.max_positions {
            return Err(ModelError::SequenceTooLong { len: total, max: self.config.max_positions });
        }
        ctx.mask.validate(n_ctx)?;
        let n_layers = self.config.n_layers;
        let d = self.config.d_model;
        let mut ctx = ctx.clone();
        for kv in ctx.layers.iter_mut() {
            kv.truncate(n_ctx);
        }
        let sel_layers: BTreeSet<usize> = hook.selection_layers().into_iter().filter(|&l| l >= 1 && l < n_layers).collect();
        let token_at = |i: usize| if i < n_ctx { ctx.context_tokens[i] } else { ctx.query_tokens[i - n_ctx] };

        let mut rows = Rows { idx: Vec::new(), pos: Vec::new(), hidden: Vec::new() };
        for l in 0..n_layers {
            let full_width = sel_layers.contains(&(l + 1)) || sel_layers.contains(&l);
            let needed = self.needed_rows(&ctx.mask, l, n_ctx, full_width);
            rows = self.gather_rows(rows, &needed, n_ctx, total, l, &ctx, &token_at)?;
            let mut qkv = self.project(l, &rows);

            if sel_layers.contains(&l) {
                let fresh = Tensor::new(vec![n_ctx, self.config.n_heads, self.config.d_head()], qkv.k[..n_ctx * d].to_vec())?;
                let cached = ctx.layers[l].k.gather_rows(&(0..n_ctx).collect::<Vec<_>>());
                if let Some(sel) = hook.on_layer(l, &fresh, &cached)? {
                    ctx.mask.replace_from(l, n_layers, sel);
                    ctx.mask.validate(n_ctx)?;
                }
            }

            let mask_l = ctx.mask.flags_at(l, n_ctx);
            if !sel_layers.contains(&(l + 1)) {
                let next = ctx.mask.flags_at(l + 1, n_ctx);
                let keep: Vec<bool> = rows.idx.iter().map(|&i| i >= n_ctx || mask_l[i] || next[i]).collect();
                rows.retain(&keep, d);
                qkv.retain(&keep, d);
            }
            let write: Vec<bool> = rows.idx.iter().map(|&i| i >= n_ctx || mask_l[i]).collect();
            let context_keys = |j: usize| j < n_ctx && !mask_l[j];
            let plan = LayerPlan { write: &write, reshaped: &write, context_keys: &context_keys, reshape: ctx.reshaping };
            self.attend(l, &mut rows, &qkv, &mut ctx.layers[l], &plan)?;
        }
        let last = rows.idx.iter().position(|&i| i == total - 1).expect("query rows always propagate");
        let logits = self.logits(&rows.hidden[last * d..(last + 1) * d]);
        Ok(HybridOutput { ctx, logits })
    }

    fn needed_rows(&self, mask: &SelectionMask, l: usize, n_ctx: usize, full_width: bool) -> Vec<bool> {
        if full_width {
            return vec![true; n_ctx];
        }
        let now = mask.flags_at(l, n_ctx);
        let next = mask.flags_at(l + 1, n_ctx);
        now.iter().zip(&next).map(|(a, b)| *a || *b).collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn gather_rows(
        &self,
        prev: Rows,
        needed: &[bool],
        n_ctx: usize,
        total: usize,
        l: usize,
        ctx: &AssembledContext,
        token_at: &dyn Fn(usize) -> u32,
    ) -> Result<Rows, ModelError> {
        let d = self.config.d_model;
        let mut have: BTreeMap<usize, usize> = BTreeMap::new();
        for (r, &i) in prev.idx.iter().enumerate() {
            have.insert(i, r);
        }
        let wanted = (0..n_ctx).filter(|&i| needed[i]).chain(n_ctx..total);
        let mut out = Rows { idx: Vec::new(), pos: Vec::new(), hidden: Vec::new() };
        for i in wanted {
            out.idx.push(i);
            out.pos.push(i);
            if let Some(&r) = have.get(&i) {
                out.hidden.extend_from_slice(&prev.hidden[r * d..(r + 1) * d]);
            } else if l == 0 {
                out.hidden.extend_from_slice(self.embed(token_at(i)));
            } else if i < n_ctx {
                let act = ctx.activations.get(&l).ok_or(ModelError::MissingActivations { layer: l })?;
                out.hidden.extend_from_slice(act.row(i));
            } else {
                unreachable!("query rows propagate through every layer");
            }
        }
        Ok(out)
    }

    /// Greedy decode continuing from a forward pass. `kv` must hold every
    /// prompt row; generated rows are appended at the following positions.
    /// Argmax ties resolve to the lowest token id.
    pub fn decode_greedy(
        &self,
        kv: &mut [LayerKv],
        policy: &AttentionPolicy,
        first_logits: &[f32],
        max_new_tokens: usize,
        eos: u32,
    ) -> Result<GenerationResult, ModelError> {
        let kv_fingerprint = kv_fingerprint(kv);
        let mut tokens = Vec::new();
        let mut logits = first_logits.to_vec();
        let mut stop_reason = StopReason::MaxTokens;
        let d = self.config.d_model;
        let masks: Vec<Vec<bool>> = (0..self.config.n_layers).map(|l| policy.mask.flags_at(l, policy.n_ctx)).collect();
        while tokens.len() < max_new_tokens {
            let next = argmax(&logits);
            if next == eos {
                stop_reason = StopReason::Eos;
                break;
            }
            tokens.push(next);
            if tokens.len() == max_new_tokens {
                break;
            }
            let pos = kv[0].len();
            if pos >= self.config.max_positions {
                return Err(ModelError::PositionOverflow(pos));
            }
            let mut rows = Rows { idx: vec![pos], pos: vec![pos], hidden: self.embed(next).to_vec() };
            for (l, layer_kv) in kv.iter_mut().enumerate() {
                let mask_l = &masks[l];
                let context_keys = |j: usize| j < policy.n_ctx && !mask_l[j];
                let qkv = self.project(l, &rows);
                let plan = LayerPlan { write: &[true], reshaped: &[true], context_keys: &context_keys, reshape: policy.reshape };
                self.attend(l, &mut rows, &qkv, layer_kv, &plan)?;
            }
            logits = self.logits(&rows.hidden[..d]);
        }
        let text = detokenize(&tokens, self.config.vocab_size)?;
        Ok(GenerationResult { token_ids: tokens, text, logits_last_prefill: first_logits.to_vec(), kv_fingerprint, stop_reason })
    }
}

pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

pub fn kv_fingerprint(kv: &[LayerKv]) -> [u8; 32] {
    let mut h = Hasher::new(b"CLC-kv\0");
    for layer in kv {
        h.u32(layer.len() as u32);
        h.f32s(layer.k.data());
        h.f32s(layer.v.data());
    }
    h.finish()
}
