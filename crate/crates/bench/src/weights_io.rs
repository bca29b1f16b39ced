//! `CLCW` weight files.
//!
//! Layout, all little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic | `b"CLCW"` |
//! | version | u32 (`1`) |
//! | n_layers, n_heads, d_model, vocab_size, max_positions | u32 each |
//! | rope_theta, norm_eps | f32 each |
//! | tensors | raw f32 in [`Model::named_tensors`] order |
//!
//! Tensor shapes follow from the config, so none are stored.

use std::path::Path;

use clc_core::model::{tensor_shape, LayerWeights};
use clc_core::{Model, ModelConfig, ModelError, Tensor};

use crate::binio::{put_f32s, put_u32, write_atomic, Reader, Truncated};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"CLCW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum WeightsError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a CLCW file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported CLCW version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("weight file truncated in {tensor}")]
    Truncated { tensor: String },
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<Truncated> for WeightsError {
    fn from(t: Truncated) -> Self {
        Self::Truncated { tensor: t.what }
    }
}

pub fn encode_weights(model: &Model) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHTS_MAGIC);
    put_u32(&mut out, WEIGHTS_VERSION);
    for v in [c.n_layers, c.n_heads, c.d_model, c.vocab_size, c.max_positions] {
        put_u32(&mut out, v as u32);
    }
    out.extend_from_slice(&c.rope_theta.to_le_bytes());
    out.extend_from_slice(&c.norm_eps.to_le_bytes());
    for (_, t) in model.named_tensors() {
        put_f32s(&mut out, t.data());
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<Model, WeightsError> {
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.array("magic")?;
    if magic != WEIGHTS_MAGIC {
        return Err(WeightsError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != WEIGHTS_VERSION {
        return Err(WeightsError::Version { found: version, expected: WEIGHTS_VERSION });
    }
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = r.u32("header")? as usize;
    }
    let config = ModelConfig {
        n_layers: dims[0],
        n_heads: dims[1],
        d_model: dims[2],
        vocab_size: dims[3],
        max_positions: dims[4],
        rope_theta: r.f32("header")?,
        norm_eps: r.f32("header")?,
    };
    config.validate()?;
    let mut read = |name: String| -> Result<Tensor, WeightsError> {
        let shape = tensor_shape(&config, &name);
        let data = r.f32s(shape.iter().product(), &name)?;
        Ok(Tensor::new(shape, data).map_err(ModelError::from)?)
    };
    let embedding = read("embedding".into())?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let mut t = |n: &str| read(format!("layers.{i}.{n}"));
        layers.push(LayerWeights {
            attn_norm: t("attn_norm")?,
            wq: t("wq")?,
            wk: t("wk")?,
            wv: t("wv")?,
            wo: t("wo")?,
            ffn_norm: t("ffn_norm")?,
            w_up: t("w_up")?,
            w_down: t("w_down")?,
        });
    }
    let final_norm = read("final_norm".into())?;
    let head = read("head".into())?;
    if r.remaining() > 0 {
        return Err(WeightsError::TrailingBytes(r.remaining()));
    }
    Ok(Model::from_parts(config, embedding, layers, final_norm, head)?)
}

pub fn save_weights(model: &Model, path: &Path) -> Result<(), WeightsError> {
    write_atomic(path, &encode_weights(model)).map_err(|source| WeightsError::Io { path: path.display().to_string(), source })
}

pub fn load_weights(path: &Path) -> Result<Model, WeightsError> {
    let bytes = std::fs::read(path).map_err(|source| WeightsError::Io { path: path.display().to_string(), source })?;
    decode_weights(&bytes)
}
