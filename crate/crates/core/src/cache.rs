//! Chunk caches, content-addressed ids, selection masks and serving-time
//! context assembly.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::digest::Hasher;
use crate::model::{hash_config, LayerKv, ModelConfig, ModelError, Reshape};
use crate::tensor::{rope_shift, Tensor};

/// SHA-256 content address of a chunk cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChunkId(pub [u8; 32]);

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// Hashes, in order: the tag `"CLCC-key\0"`, key version `1` (u32), the
/// model config (`n_layers, n_heads, d_model, vocab_size, max_positions` as
/// u32, `rope_theta, norm_eps` as f32), the 32-byte model fingerprint, the
/// prefix length (u32), the token count (u32) and each token id (u32).
/// Integers and floats are little-endian.
pub fn cache_key(tokens: &[u32], prefix_len: usize, model_fingerprint: &[u8; 32], config: &ModelConfig) -> ChunkId {
    let mut h = Hasher::new(b"CLCC-key\0");
    h.u32(1);
    hash_config(&mut h, config);
    h.bytes(model_fingerprint);
    h.u32(prefix_len as u32);
    h.u32(tokens.len() as u32);
    for &t in tokens {
        h.u32(t);
    }
    ChunkId(h.finish())
}

/// K/V of one chunk prefilled in isolation at base position 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkCache {
    pub chunk_id: ChunkId,
    pub tokens: Vec<u32>,
    pub prefix_len: usize,
    pub layers: Vec<LayerKv>,
    /// Residual stream entering a layer, `[n × d_model]`, for requested layers.
    pub activations: BTreeMap<usize, Tensor>,
    pub model_fingerprint: [u8; 32],
}

impl ChunkCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Context tokens selected for recomputation, per contiguous layer range.
/// Layer 0 is never selected.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectionMask {
    spans: Vec<MaskSpan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpan {
    pub start: usize,
    pub end: usize,
    /// Sorted, deduplicated context-token indices.
    pub indices: Vec<usize>,
}

impl SelectionMask {
    pub fn empty() -> Self {
        Self::default()
    }

    /// One index set for layers `start..end`.
    pub fn uniform(start: usize, end: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut m = Self::default();
        m.replace_from(start, end, indices.into_iter().collect());
        m
    }

    pub fn spans(&self) -> &[MaskSpan] {
        &self.spans
    }

    pub fn is_empty(&self) -> bool {
        self.spans.iter().all(|s| s.indices.is_empty())
    }

    pub fn indices_at(&self, layer: usize) -> &[usize] {
        self.spans
            .iter()
            .find(|s| s.start <= layer && layer < s.end)
            .map(|s| s.indices.as_slice())
            .unwrap_or(&[])
    }

    pub fn flags_at(&self, layer: usize, n_ctx: usize) -> Vec<bool> {
        let mut f = vec![false; n_ctx];
        for &i in self.indices_at(layer) {
            if i < n_ctx {
                f[i] = true;
            }
        }
        f
    }

    /// Replaces the selection for layers `start..end` (clamped to `>= 1`).
    pub fn replace_from(&mut self, start: usize, end: usize, mut indices: Vec<usize>) {
        let start = start.max(1);
        indices.sort_unstable();
        indices.dedup();
        self.spans.retain_mut(|s| {
            if s.start >= start {
                return false;
            }
            s.end = s.end.min(start);
            true
        });
        if start < end {
            self.spans.push(MaskSpan { start, end, indices });
        }
    }

    pub fn validate(&self, n_ctx: usize) -> Result<(), ModelError> {
        for s in &self.spans {
            if let Some(&i) = s.indices.iter().find(|&&i| i >= n_ctx) {
                return Err(ModelError::MaskOutOfRange { index: i, n_ctx });
            }
        }
        Ok(())
    }
}

/// Placement of one chunk in the stitched context.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub chunk_id: ChunkId,
    pub start: usize,
    pub len: usize,
}

/// Serving-time state: chunk caches moved to their global positions,
/// followed by the query tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledContext {
    pub segments: Vec<Segment>,
    pub context_tokens: Vec<u32>,
    pub query_tokens: Vec<u32>,
    /// Merged per-layer view over the context tokens (query rows are
    /// appended by a forward pass).
    pub layers: Vec<LayerKv>,
    /// Stitched activations for layers every chunk carries.
    pub activations: BTreeMap<usize, Tensor>,
    pub mask: SelectionMask,
    pub reshaping: Option<Reshape>,
}

impl AssembledContext {
    pub fn context_len(&self) -> usize {
        self.context_tokens.len()
    }

    pub fn total_len(&self) -> usize {
        self.context_tokens.len() + self.query_tokens.len()
    }

    /// All prompt tokens in serving order.
    pub fn prompt_tokens(&self) -> Vec<u32> {
        let mut t = self.context_tokens.clone();
        t.extend_from_slice(&self.query_tokens);
        t
    }
}

/// Stitches chunk caches in order, shifting each chunk's keys by its start
/// offset. Values are copied unshifted. No separator tokens are inserted.
pub fn assemble(chunks: &[&ChunkCache], query_tokens: &[u32], config: &ModelConfig) -> Result<AssembledContext, ModelError> {
    let rope = config.rope()?;
    let n_ctx: usize = chunks.iter().map(|c| c.len()).sum();
    let total = n_ctx + query_tokens.len();
    if total > config.max_positions {
        return Err(ModelError::SequenceTooLong { len: total, max: config.max_positions });
    }
    let (h, dh) = (config.n_heads, config.d_head());
    let mut layers: Vec<LayerKv> = (0..config.n_layers).map(|_| LayerKv::empty(h, dh)).collect();
    let mut segments = Vec::with_capacity(chunks.len());
    let mut context_tokens = Vec::with_capacity(n_ctx);
    let shared: Vec<usize> = match chunks.first() {
        Some(c) => c.activations.keys().copied().filter(|l| chunks.iter().all(|o| o.activations.contains_key(l))).collect(),
        None => Vec::new(),
    };
    let mut activations: BTreeMap<usize, Vec<f32>> = shared.iter().map(|&l| (l, Vec::new())).collect();
    let mut start = 0;
    for c in chunks {
        if c.layers.len() != config.n_layers || c.layers.iter().any(|kv| kv.len() != c.len()) {
            return Err(ModelError::WeightShape(alloc::format!("chunk {} layer layout", c.chunk_id)));
        }
        for (dst, src) in layers.iter_mut().zip(&c.layers) {
            let k = rope_shift(&src.k, start as i64, &rope)?;
            for i in 0..c.len() {
                dst.k.push_row(k.row(i))?;
                dst.v.push_row(src.v.row(i))?;
                dst.positions.push(start + i);
            }
        }
        for (l, buf) in activations.iter_mut() {
            buf.extend_from_slice(c.activations[l].data());
        }
        segments.push(Segment { chunk_id: c.chunk_id, start, len: c.len() });
        context_tokens.extend_from_slice(&c.tokens);
        start += c.len();
    }
    let activations = activations
        .into_iter()
        .map(|(l, data)| Ok((l, Tensor::new(vec![n_ctx, config.d_model], data)?)))
        .collect::<Result<_, ModelError>>()?;
    Ok(AssembledContext {
        segments,
        context_tokens,
        query_tokens: query_tokens.to_vec(),
        layers,
        activations,
        mask: SelectionMask::empty(),
        reshaping: None,
    })
}
