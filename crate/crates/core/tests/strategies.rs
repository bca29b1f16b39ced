use clc_core::cache::SelectionMask;
use clc_core::metrics::ideal_layer_selection;
use clc_core::model::{init_model, tokenize, LayerWeights};
use clc_core::strategies::{run_strategy, select_cacheclip, select_top_r, StrategyConfig, StrategyError, StrategyInputs};
use clc_core::{ChunkCache, Model, ModelConfig, Tensor};

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).unwrap()
}

fn blank_layer(d: usize) -> LayerWeights {
    LayerWeights {
        attn_norm: ones(d),
        wq: Tensor::zeros(vec![d, d]),
        wk: Tensor::zeros(vec![d, d]),
        wv: Tensor::zeros(vec![d, d]),
        wo: Tensor::zeros(vec![d, d]),
        ffn_norm: ones(d),
        w_up: Tensor::zeros(vec![d, 4 * d]),
        w_down: Tensor::zeros(vec![4 * d, d]),
    }
}

fn set(t: &mut Tensor, i: usize, j: usize, v: f32) {
    let cols = t.shape()[1];
    t.data_mut()[i * cols + j] = v;
}

/// One layer whose query rows put almost all attention on `Z`. The signal
/// lives in the slow RoPE pair so position barely matters.
fn spotlight_model() -> Model {
    let c = ModelConfig { n_layers: 1, n_heads: 1, d_model: 4, rope_theta: 1e12, max_positions: 128, ..ModelConfig::default() };
    let mut emb = vec![0.0; c.vocab_size * 4];
    for t in 0..c.vocab_size {
        emb[t * 4 + if t == usize::from(b'Z') { 2 } else { 3 }] = 1.0;
    }
    let mut layer = blank_layer(4);
    set(&mut layer.wq, 3, 2, 5.0);
    set(&mut layer.wk, 2, 2, 1.0);
    let head = Tensor::zeros(vec![4, c.vocab_size]);
    let embedding = Tensor::new(vec![c.vocab_size, 4], emb).unwrap();
    Model::from_parts(c, embedding, vec![layer], ones(4), head).unwrap()
}

#[test]
fn cacheclip_follows_rigged_attention() {
    let aux = spotlight_model();
    let mut prompt = tokenize(b"abcdefZhij");
    prompt.extend(tokenize(b"?\n"));
    assert_eq!(select_cacheclip(&aux, &prompt, 10, 0.1).unwrap(), vec![6]);
    assert_eq!(select_cacheclip(&aux, &prompt, 10, 0.1).unwrap(), select_cacheclip(&aux, &prompt, 10, 0.1).unwrap());
    assert!(select_cacheclip(&aux, &prompt, 10, 0.0).unwrap().is_empty());
    assert!(select_cacheclip(&aux, &prompt, 20, 0.1).is_err());

    let main = init_model(ModelConfig { n_layers: 2, n_heads: 2, d_model: 16, ..ModelConfig::default() }, 1).unwrap();
    let chunks: Vec<ChunkCache> = [&b"abcde"[..], b"fZhij"].iter().map(|c| main.build_chunk_cache(&tokenize(c), 1, &[]).unwrap()).collect();
    let refs: Vec<&ChunkCache> = chunks.iter().collect();
    let query = tokenize(b"?\n");
    let cfg = StrategyConfig::CacheClip { r: 0.1, p: 1, aux_model: "spotlight".into() };
    let inputs = StrategyInputs { model: &main, aux_model: Some(&aux), chunks: &refs, query_tokens: &query, max_new_tokens: 2 };
    let out = run_strategy(&cfg, &inputs).unwrap();
    assert_eq!(out.mask.indices_at(1), &[6]);
    let without = StrategyInputs { aux_model: None, ..inputs };
    assert_eq!(run_strategy(&cfg, &without).unwrap_err(), StrategyError::MissingAuxModel);
}

#[test]
fn prefix_and_activation_preconditions() {
    let m = init_model(ModelConfig { n_layers: 3, n_heads: 2, d_model: 16, ..ModelConfig::default() }, 2).unwrap();
    let c = m.build_chunk_cache(&tokenize(b"chunk text"), 0, &[]).unwrap();
    let query = tokenize(b"q");
    let inputs = StrategyInputs { model: &m, aux_model: None, chunks: &[&c], query_tokens: &query, max_new_tokens: 1 };
    assert_eq!(
        run_strategy(&StrategyConfig::Link0 { p: 2 }, &inputs).unwrap_err(),
        StrategyError::PrefixMismatch { expected: 2, found: 0 }
    );
    assert_eq!(
        run_strategy(&StrategyConfig::DroidspeakAdapted { r: 0.5, reselect_layer: 2 }, &inputs).unwrap_err(),
        StrategyError::MissingActivations { layer: 1 }
    );
    assert!(matches!(
        run_strategy(&StrategyConfig::DroidspeakAdapted { r: 0.5, reselect_layer: 3 }, &inputs),
        Err(StrategyError::InvalidParameter(_))
    ));
}

#[test]
fn ideal_first_layer_matches_runtime_selection() {
    let m = init_model(ModelConfig::default(), 21).unwrap();
    let chunks: Vec<ChunkCache> = [&b"Ravi lives in Porto. "[..], b"Porto is cold in May. "]
        .iter()
        .map(|c| m.build_chunk_cache(&tokenize(c), 0, &[]).unwrap())
        .collect();
    let refs: Vec<&ChunkCache> = chunks.iter().collect();
    let query = tokenize(b"Where does Ravi live?\n");
    let ideal = ideal_layer_selection(&m, &refs, &query, 0.15).unwrap();
    let inputs = StrategyInputs { model: &m, aux_model: None, chunks: &refs, query_tokens: &query, max_new_tokens: 1 };
    let out = run_strategy(&StrategyConfig::CacheBlend { r: 0.15 }, &inputs).unwrap();
    assert_eq!(ideal.per_layer[0].0, 1);
    assert_eq!(ideal.per_layer[0].1, out.mask.indices_at(1));
    assert_eq!(ideal.scores[0].scores, out.scores[0].scores);
    assert_eq!(ideal, ideal_layer_selection(&m, &refs, &query, 0.15).unwrap());
}

#[test]
fn droidspeak_reselect_right_after_first_layer_is_stable_on_a_single_chunk() {
    let m = init_model(ModelConfig::default(), 8).unwrap();
    let c = m.build_chunk_cache(&tokenize(b"one lonely chunk at the origin"), 0, &[1]).unwrap();
    let query = tokenize(b"what?\n");
    let inputs = StrategyInputs { model: &m, aux_model: None, chunks: &[&c], query_tokens: &query, max_new_tokens: 2 };
    let blend = run_strategy(&StrategyConfig::CacheBlend { r: 0.15 }, &inputs).unwrap();
    let droid = run_strategy(&StrategyConfig::DroidspeakAdapted { r: 0.15, reselect_layer: 2 }, &inputs).unwrap();
    assert_eq!(droid.mask.indices_at(1), blend.mask.indices_at(1));
    assert_eq!(droid.mask.indices_at(2), blend.mask.indices_at(2));
    assert!(droid.scores.iter().all(|s| s.scores.iter().all(|&v| v == 0.0)));
    assert_eq!(select_top_r(&droid.scores[1].scores, 0.15), blend.mask.indices_at(1));
    assert_eq!(SelectionMask::uniform(1, 4, blend.mask.indices_at(1).to_vec()), blend.mask);
}
