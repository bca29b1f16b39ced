#![allow(dead_code)]

use std::path::Path;

use clc_bench::ExperimentConfig;
use clc_core::model::LayerWeights;
use clc_core::{Model, ModelConfig, Tensor};

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).unwrap()
}

/// A model that emits `byte` forever, whatever the prompt.
pub fn constant_model(byte: u8) -> Model {
    let c = ModelConfig { n_layers: 2, n_heads: 1, d_model: 2, max_positions: 256, ..ModelConfig::default() };
    let v = c.vocab_size;
    let layer = LayerWeights {
        attn_norm: ones(2),
        wq: Tensor::zeros(vec![2, 2]),
        wk: Tensor::zeros(vec![2, 2]),
        wv: Tensor::zeros(vec![2, 2]),
        wo: Tensor::zeros(vec![2, 2]),
        ffn_norm: ones(2),
        w_up: Tensor::zeros(vec![2, 8]),
        w_down: Tensor::zeros(vec![8, 2]),
    };
    let mut head = vec![0.0; 2 * v];
    head[usize::from(byte)] = 1.0;
    head[v + usize::from(byte)] = 1.0;
    let embedding = Tensor::new(vec![v, 2], vec![1.0; v * 2]).unwrap();
    Model::from_parts(c, embedding, vec![layer.clone(), layer], ones(2), Tensor::new(vec![2, v], head).unwrap()).unwrap()
}

/// Writes `json` as `dir/config.json` and loads it.
pub fn config_in(dir: &Path, json: &str) -> ExperimentConfig {
    let path = dir.join("config.json");
    std::fs::write(&path, json).unwrap();
    ExperimentConfig::load(&path).unwrap()
}

/// A small experiment over synthetic data with the given strategy list.
pub fn synthetic_config(n_items: usize, strategies: &str) -> String {
    format!(
        r#"{{
  "model": {{ "config": {{ "n_layers": 3, "n_heads": 2, "d_model": 32 }}, "seed": 5 }},
  "cache_dir": "cache",
  "dataset": {{ "synthetic": {{ "n_items": {n_items}, "n_chunks": 3, "chunk_len": 48, "seed": 11 }} }},
  "strategies": {strategies},
  "out_dir": "out",
  "seed": 5,
  "max_new_tokens": 6
}}"#
    )
}
