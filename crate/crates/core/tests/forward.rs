use clc_core::cache::{assemble, SelectionMask};
use clc_core::model::{init_model, tokenize, AttentionPolicy, LayerWeights, NoSelection, StopReason};
use clc_core::strategies::{run_strategy, StrategyConfig, StrategyInputs};
use clc_core::{ChunkCache, Model, ModelConfig, ModelError, Tensor, EOS};

fn small() -> ModelConfig {
    ModelConfig { n_layers: 3, n_heads: 2, d_model: 16, max_positions: 256, ..ModelConfig::default() }
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Straight-line f64 transformer used as an oracle for `full_prefill`.
struct Reference {
    logits: Vec<f64>,
    keys: Vec<Vec<Vec<f64>>>,
}

fn reference_forward(m: &Model, tokens: &[u32]) -> Reference {
    let c = &m.config;
    let (d, h, dh, ff) = (c.d_model, c.n_heads, c.d_head(), c.d_ff());
    let w = |t: &Tensor, i: usize, j: usize, cols: usize| f64::from(t.data()[i * cols + j]);
    let norm = |x: &[f64], g: &Tensor| -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let inv = 1.0 / (ms + f64::from(c.norm_eps)).sqrt();
        x.iter().zip(g.data()).map(|(v, g)| v * inv * f64::from(*g)).collect()
    };
    let proj = |x: &[f64], t: &Tensor, cols: usize| -> Vec<f64> {
        (0..cols).map(|j| (0..x.len()).map(|i| x[i] * w(t, i, j, cols)).sum()).collect()
    };
    let rope = |v: &mut [f64], pos: usize| {
        for head in v.chunks_mut(dh) {
            for i in 0..dh / 2 {
                let freq = f64::from(c.rope_theta).powf(-(2.0 * i as f64) / dh as f64);
                let (s, co) = (pos as f64 * freq).sin_cos();
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * co - b * s;
                head[2 * i + 1] = a * s + b * co;
            }
        }
    };
    let n = tokens.len();
    let mut x: Vec<Vec<f64>> = tokens.iter().map(|&t| m.embedding.row(t as usize).iter().map(|&v| f64::from(v)).collect()).collect();
    let mut keys = Vec::new();
    for lw in &m.layers {
        let normed: Vec<Vec<f64>> = x.iter().map(|r| norm(r, &lw.attn_norm)).collect();
        let mut q: Vec<Vec<f64>> = normed.iter().map(|r| proj(r, &lw.wq, d)).collect();
        let mut k: Vec<Vec<f64>> = normed.iter().map(|r| proj(r, &lw.wk, d)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|r| proj(r, &lw.wv, d)).collect();
        for i in 0..n {
            rope(&mut q[i], i);
            rope(&mut k[i], i);
        }
        for i in 0..n {
            let mut out = vec![0.0; d];
            for head in 0..h {
                let r = head * dh..(head + 1) * dh;
                let logits: Vec<f64> = (0..=i)
                    .map(|j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let sum: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for t in r.clone() {
                        out[t] += ej / sum * v[j][t];
                    }
                }
            }
            let o = proj(&out, &lw.wo, d);
            for t in 0..d {
                x[i][t] += o[t];
            }
        }
        for row in x.iter_mut() {
            let up: Vec<f64> = proj(&norm(row, &lw.ffn_norm), &lw.w_up, ff).into_iter().map(|u| u / (1.0 + (-u).exp())).collect();
            let down = proj(&up, &lw.w_down, d);
            for t in 0..d {
                row[t] += down[t];
            }
        }
        keys.push(k);
    }
    let last = norm(&x[n - 1], &m.final_norm);
    Reference { logits: proj(&last, &m.head, c.vocab_size), keys }
}

#[test]
fn full_prefill_matches_f64_reference() {
    let m = init_model(small(), 3).unwrap();
    let tokens = tokenize(b"The quick brown fox jumps over the lazy dog.");
    let pre = m.full_prefill(&tokens).unwrap();
    let oracle = reference_forward(&m, &tokens);
    let got: Vec<f64> = pre.logits.iter().map(|&v| f64::from(v)).collect();
    let diff = got.iter().zip(&oracle.logits).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-4, "logit diff {diff}");
    for (l, kv) in pre.layers.iter().enumerate() {
        for (i, row) in oracle.keys[l].iter().enumerate() {
            for (a, b) in kv.k.row(i).iter().zip(row) {
                assert!((f64::from(*a) - b).abs() < 1e-4, "layer {l} row {i}");
            }
        }
    }
}

#[test]
fn prefill_is_causal_and_deterministic() {
    let m = init_model(small(), 5).unwrap();
    let a = tokenize(b"alpha beta");
    let mut ab = a.clone();
    ab.extend(tokenize(b" gamma delta"));
    let pa = m.full_prefill(&a).unwrap();
    let pab = m.full_prefill(&ab).unwrap();
    for (x, y) in pa.layers.iter().zip(&pab.layers) {
        assert_eq!(x.k.data(), &y.k.data()[..x.k.len()]);
        assert_eq!(x.v.data(), &y.v.data()[..x.v.len()]);
    }
    assert_eq!(pab, m.full_prefill(&ab).unwrap());
}

#[test]
fn chunk_cache_contracts() {
    let m = init_model(small(), 7).unwrap();
    let chunk = tokenize(b"key 17 is violet");
    let plain = m.build_chunk_cache(&chunk, 0, &[]).unwrap();
    let pre = m.full_prefill(&chunk).unwrap();
    assert_eq!(plain.layers, pre.layers);

    let padded = m.build_chunk_cache(&chunk, 3, &[]).unwrap();
    assert_eq!(padded.len(), chunk.len());
    for kv in &padded.layers {
        assert_eq!(kv.positions, (0..chunk.len()).collect::<Vec<_>>());
    }
    assert_ne!(padded.layers[1].k, plain.layers[1].k);
    assert_ne!(padded.chunk_id, plain.chunk_id);
    // layer-0 keys only see the token and its position, so the blank prefix
    // leaves them unchanged up to re-basing error
    assert!(max_diff(padded.layers[0].k.data(), plain.layers[0].k.data()) < 1e-5);
    assert!(matches!(m.build_chunk_cache(&[], 0, &[]), Err(ModelError::EmptyContext)));
}

#[test]
fn placement_matches_prefill_at_offset() {
    let m = init_model(small(), 9).unwrap();
    let first = m.build_chunk_cache(&tokenize(b"some leading text of length"), 0, &[]).unwrap();
    let second_tokens = tokenize(b"second chunk");
    let second = m.build_chunk_cache(&second_tokens, 0, &[]).unwrap();
    let ctx = assemble(&[&first, &second], &tokenize(b"?"), &m.config).unwrap();
    let delta = first.len();
    let direct = m.prefill_at(&second_tokens, delta, &[]).unwrap();
    for (merged, at) in ctx.layers.iter().zip(&direct.layers) {
        let rows: Vec<usize> = (delta..delta + second.len()).collect();
        let placed = merged.k.gather_rows(&rows);
        assert!(max_diff(placed.data(), at.k.data()) < 1e-5);
        assert_eq!(merged.positions, (0..ctx.context_len()).collect::<Vec<_>>());
    }
}

fn caches(m: &Model, chunks: &[&[u8]], p: usize, act: &[usize]) -> Vec<ChunkCache> {
    chunks.iter().map(|c| m.build_chunk_cache(&tokenize(c), p, act).unwrap()).collect()
}

const CHUNKS: [&[u8]; 3] = [b"The vault code is 4417. ", b"Mira keeps the vault. ", b"Olek owns a red kite. "];

#[test]
fn hybrid_full_mask_tracks_full_prefill() {
    let m = init_model(ModelConfig::default(), 11).unwrap();
    let cs = caches(&m, &CHUNKS, 0, &[]);
    let refs: Vec<&ChunkCache> = cs.iter().collect();
    let query = tokenize(b"Who keeps the vault?\n");
    let mut ctx = assemble(&refs, &query, &m.config).unwrap();
    let n_ctx = ctx.context_len();
    ctx.mask = SelectionMask::uniform(1, m.config.n_layers, 0..n_ctx);
    let out = m.hybrid_forward(&ctx, &mut NoSelection).unwrap();
    let full = m.full_prefill(&ctx.prompt_tokens()).unwrap();
    assert!(max_diff(&out.logits, &full.logits) < 1e-4);
    for (a, b) in out.ctx.layers.iter().zip(&full.layers) {
        assert!(max_diff(a.k.data(), b.k.data()) < 1e-4);
    }
}

#[test]
fn hybrid_masks_are_deterministic_and_empty_mask_is_naive() {
    let m = init_model(small(), 13).unwrap();
    let cs = caches(&m, &CHUNKS, 0, &[]);
    let refs: Vec<&ChunkCache> = cs.iter().collect();
    let query = tokenize(b"Who?\n");
    let mut ctx = assemble(&refs, &query, &m.config).unwrap();
    let naive = m.hybrid_forward(&ctx, &mut NoSelection).unwrap();
    ctx.mask = SelectionMask::uniform(1, m.config.n_layers, [0, 5, 30]);
    let a = m.hybrid_forward(&ctx, &mut NoSelection).unwrap();
    let b = m.hybrid_forward(&ctx, &mut NoSelection).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_ne!(a.logits, naive.logits);

    let inputs = StrategyInputs { model: &m, aux_model: None, chunks: &refs, query_tokens: &query, max_new_tokens: 4 };
    let naive_run = run_strategy(&StrategyConfig::NaiveReuse, &inputs).unwrap();
    let r0 = run_strategy(&StrategyConfig::CacheBlend { r: 0.0 }, &inputs).unwrap();
    assert_eq!(naive_run.generation.logits_last_prefill, naive.logits);
    assert_eq!(r0.generation, naive_run.generation);
}

#[test]
fn hybrid_input_errors() {
    let m = init_model(small(), 1).unwrap();
    let cs = caches(&m, &CHUNKS[..1], 0, &[]);
    let mut ctx = assemble(&[&cs[0]], &tokenize(b"q"), &m.config).unwrap();
    ctx.mask = SelectionMask::uniform(1, 3, [999]);
    assert!(matches!(m.hybrid_forward(&ctx, &mut NoSelection), Err(ModelError::MaskOutOfRange { index: 999, .. })));
    let empty = assemble(&[], &tokenize(b"q"), &m.config).unwrap();
    assert!(matches!(m.hybrid_forward(&empty, &mut NoSelection), Err(ModelError::EmptyContext)));
    let ctx = assemble(&[&cs[0]], &[], &m.config).unwrap();
    assert!(matches!(m.hybrid_forward(&ctx, &mut NoSelection), Err(ModelError::EmptyQuery)));
    let mut ctx = assemble(&[&cs[0]], &tokenize(b"q"), &m.config).unwrap();
    ctx.mask = SelectionMask::uniform(1, 3, [0]);
    ctx.mask.replace_from(2, 3, vec![5]);
    assert!(matches!(m.hybrid_forward(&ctx, &mut NoSelection), Err(ModelError::MissingActivations { layer: 1 })));
}

#[test]
fn decode_with_zero_budget_emits_nothing() {
    let m = init_model(small(), 2).unwrap();
    let mut pre = m.full_prefill(&tokenize(b"hello")).unwrap();
    let g = m.decode_greedy(&mut pre.layers, &AttentionPolicy::default(), &pre.logits, 0, EOS).unwrap();
    assert!(g.token_ids.is_empty());
    assert_eq!(g.stop_reason, StopReason::MaxTokens);
}

#[test]
fn greedy_decode_is_repeatable() {
    let m = init_model(small(), 4).unwrap();
    let run = || {
        let mut pre = m.full_prefill(&tokenize(b"abc")).unwrap();
        m.decode_greedy(&mut pre.layers, &AttentionPolicy::default(), &pre.logits, 6, EOS).unwrap()
    };
    let g = run();
    assert_eq!(g, run());
    assert!(g.token_ids.len() <= 6);
}

fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape.to_vec())
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).unwrap()
}

/// Every hidden state is zero except the embedding, and the head scores EOS
/// highest for any input.
fn eos_model() -> Model {
    let c = ModelConfig { n_layers: 1, n_heads: 1, d_model: 2, max_positions: 64, ..ModelConfig::default() };
    let v = c.vocab_size;
    let embedding = Tensor::new(vec![v, 2], vec![1.0; v * 2]).unwrap();
    let layer = LayerWeights {
        attn_norm: ones(2),
        wq: zeros(&[2, 2]),
        wk: zeros(&[2, 2]),
        wv: zeros(&[2, 2]),
        wo: zeros(&[2, 2]),
        ffn_norm: ones(2),
        w_up: zeros(&[2, 8]),
        w_down: zeros(&[8, 2]),
    };
    let mut head = vec![0.0; 2 * v];
    head[EOS as usize] = 1.0;
    head[v + EOS as usize] = 1.0;
    Model::from_parts(c, embedding, vec![layer], ones(2), Tensor::new(vec![2, v], head).unwrap()).unwrap()
}

#[test]
fn rigged_model_stops_at_eos() {
    let m = eos_model();
    let mut pre = m.full_prefill(&tokenize(b"xy")).unwrap();
    assert_eq!(clc_core::model::forward::argmax(&pre.logits), EOS);
    let g = m.decode_greedy(&mut pre.layers, &AttentionPolicy::default(), &pre.logits, 10, EOS).unwrap();
    assert!(g.token_ids.is_empty());
    assert!(g.text.is_empty());
    assert_eq!(g.stop_reason, StopReason::Eos);
}

#[test]
fn from_parts_rejects_bad_shapes() {
    let m = init_model(small(), 1).unwrap();
    let mut layers = m.layers.clone();
    layers[0].wq = zeros(&[16, 8]);
    let err = Model::from_parts(m.config.clone(), m.embedding.clone(), layers, m.final_norm.clone(), m.head.clone()).unwrap_err();
    assert_eq!(err, ModelError::WeightShape("layers.0.wq".into()));
    assert!(m.full_prefill(&[300]).is_err());
    assert!(m.full_prefill(&vec![1; 300]).is_err());
}
