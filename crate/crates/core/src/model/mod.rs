//! A small deterministic pre-norm decoder: RMSNorm, RoPE attention and a
//! SiLU feed-forward block with a 4x hidden width.
//!
//! Weights are plain row-vector projections (`x · W`). Besides ordinary
//! prefill and greedy decode the model can build isolated chunk caches and
//! run a hybrid pass over stitched caches where only selected rows are
//! recomputed (see [`forward`]).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::digest::Hasher;
use crate::tensor::{RopeParams, Tensor, TensorError};

pub mod forward;

pub use forward::{
    AttentionPolicy, GenerationResult, HybridOutput, LayerKv, NoSelection, Prefill, Reshape,
    SelectionHook, StopReason,
};

/// Token id of the first special after the 256 byte tokens.
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
/// Byte token used for Link0-style blank prefixes.
pub const PREFIX_TOKEN: u32 = b' ' as u32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(&'static str),
    #[error("sequence of {len} tokens exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {0} out of vocabulary range")]
    TokenOutOfRange(u32),
    #[error("no cached activations for layer {layer}")]
    MissingActivations { layer: usize },
    #[error("selection index {index} outside {n_ctx} context tokens")]
    MaskOutOfRange { index: usize, n_ctx: usize },
    #[error("assembled context holds no chunk tokens")]
    EmptyContext,
    #[error("query holds no tokens")]
    EmptyQuery,
    #[error("position {0} exceeds max_positions")]
    PositionOverflow(usize),
    #[error("weight shape mismatch for {0}")]
    WeightShape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub rope_theta: f32,
    pub max_positions: usize,
    pub norm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            vocab_size: 259,
            rope_theta: 10000.0,
            max_positions: 1024,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0 {
            return Err(ModelError::InvalidConfig("n_layers must be positive"));
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig("d_model must be a positive multiple of n_heads"));
        }
        if !self.d_head().is_multiple_of(2) {
            return Err(ModelError::InvalidConfig("d_head must be even"));
        }
        if self.vocab_size < 259 {
            return Err(ModelError::InvalidConfig("vocab_size must cover 256 bytes and 3 specials"));
        }
        if !self.rope_theta.is_finite() || self.rope_theta <= 0.0 {
            return Err(ModelError::InvalidConfig("rope_theta must be positive"));
        }
        if self.max_positions == 0 {
            return Err(ModelError::InvalidConfig("max_positions must be positive"));
        }
        if self.norm_eps.is_nan() || self.norm_eps <= 0.0 {
            return Err(ModelError::InvalidConfig("norm_eps must be positive"));
        }
        Ok(())
    }

    pub fn rope(&self) -> Result<RopeParams, ModelError> {
        Ok(RopeParams::new(self.rope_theta, self.d_head())?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

/// Config plus weights. Immutable during inference; share it by reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub head: Tensor,
    rope: RopeParams,
}

impl Model {
    /// Assembles a model from explicit weights, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        embedding: Tensor,
        layers: Vec<LayerWeights>,
        final_norm: Tensor,
        head: Tensor,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let rope = config.rope()?;
        let m = Self { config, embedding, layers, final_norm, head, rope };
        m.check_shapes()?;
        Ok(m)
    }

    fn check_shapes(&self) -> Result<(), ModelError> {
        if self.layers.len() != self.config.n_layers {
            return Err(ModelError::WeightShape(format!(
                "expected {} layers, got {}",
                self.config.n_layers,
                self.layers.len()
            )));
        }
        for (name, t) in self.named_tensors() {
            if t.shape() != tensor_shape(&self.config, &name).as_slice() {
                return Err(ModelError::WeightShape(name));
            }
            if !t.all_finite() {
                return Err(ModelError::WeightShape(format!("{name} (non-finite)")));
            }
        }
        Ok(())
    }

    pub fn rope(&self) -> &RopeParams {
        &self.rope
    }

    /// All weight tensors in canonical order: embedding, then per layer
    /// `attn_norm, wq, wk, wv, wo, ffn_norm, w_up, w_down`, then
    /// `final_norm, head`. File formats and fingerprints follow this order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(3 + 8 * self.layers.len());
        out.push((String::from("embedding"), &self.embedding));
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ffn_norm", &l.ffn_norm),
                ("w_up", &l.w_up),
                ("w_down", &l.w_down),
            ] {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push((String::from("final_norm"), &self.final_norm));
        out.push((String::from("head"), &self.head));
        out
    }

    /// SHA-256 over the config and every tensor in canonical order.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Hasher::new(b"CLCW-fingerprint\0");
        hash_config(&mut h, &self.config);
        for (_, t) in self.named_tensors() {
            h.f32s(t.data());
        }
        h.finish()
    }
}

pub(crate) fn hash_config(h: &mut Hasher, c: &ModelConfig) {
    for v in [c.n_layers, c.n_heads, c.d_model, c.vocab_size, c.max_positions] {
        h.u32(v as u32);
    }
    h.f32(c.rope_theta);
    h.f32(c.norm_eps);
}

/// Expected shape of a canonical tensor name.
pub fn tensor_shape(c: &ModelConfig, name: &str) -> Vec<usize> {
    let d = c.d_model;
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match leaf {
        "embedding" => alloc::vec![c.vocab_size, d],
        "attn_norm" | "ffn_norm" | "final_norm" => alloc::vec![d],
        "wq" | "wk" | "wv" | "wo" => alloc::vec![d, d],
        "w_up" => alloc::vec![d, c.d_ff()],
        "w_down" => alloc::vec![c.d_ff(), d],
        "head" => alloc::vec![d, c.vocab_size],
        _ => Vec::new(),
    }
}

/// Uniform draw in `[-1, 1)` from the top 24 bits of one `u32`.
fn unit(rng: &mut ChaCha8Rng) -> f32 {
    ((rng.next_u32() >> 8) as f32) * (1.0 / 16_777_216.0) * 2.0 - 1.0
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| unit(rng) * scale).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

fn ones(n: usize) -> Tensor {
    Tensor::new(alloc::vec![n], alloc::vec![1.0; n]).expect("length matches shape")
}

/// Seeded weights. Generator: ChaCha8 seeded with `seed_from_u64(seed)`.
/// Draw order matches [`Model::named_tensors`]; norm weights are fixed at
/// one and consume no draws. Each value is `uniform[-1,1) * scale` with
/// `scale = sqrt(3 / fan_in)` (embedding: scale 1).
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let ff = config.d_ff();
    let proj = libm::sqrtf(3.0 / d as f32);
    let down = libm::sqrtf(3.0 / ff as f32);
    let embedding = random(&mut rng, alloc::vec![config.vocab_size, d], 1.0);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn_norm: ones(d),
            wq: random(&mut rng, alloc::vec![d, d], proj),
            wk: random(&mut rng, alloc::vec![d, d], proj),
            wv: random(&mut rng, alloc::vec![d, d], proj),
            wo: random(&mut rng, alloc::vec![d, d], proj),
            ffn_norm: ones(d),
            w_up: random(&mut rng, alloc::vec![d, ff], proj),
            w_down: random(&mut rng, alloc::vec![ff, d], down),
        })
        .collect();
    let final_norm = ones(d);
    let head = random(&mut rng, alloc::vec![d, config.vocab_size], proj);
    Model::from_parts(config, embedding, layers, final_norm, head)
}

/// Byte-level tokenizer: byte `b` is token `b`.
pub fn tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| u32::from(b)).collect()
}

/// Inverse of [`tokenize`]; special tokens produce no bytes.
pub fn detokenize(ids: &[u32], vocab_size: usize) -> Result<Vec<u8>, ModelError> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        if id as usize >= vocab_size {
            return Err(ModelError::TokenOutOfRange(id));
        }
        if id < 256 {
            out.push(id as u8);
        }
    }
    Ok(out)
}
