//! Answer scoring and the ΔK analysis computations.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::cache::{assemble, ChunkCache, Segment, SelectionMask};
use crate::model::{Model, ModelError, SelectionHook};
use crate::strategies::{delta_k, select_top_r, SelectionScores, FIRST_COMPARABLE_LAYER};
use crate::tensor::Tensor;

/// SQuAD-style normalization: lowercase, drop ASCII punctuation, drop the
/// articles `a`, `an`, `the`, split on whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    answer_tokens(text).into_iter().filter(|w| !matches!(w.as_str(), "a" | "an" | "the")).collect()
}

/// Lowercased, punctuation-free whitespace tokens. Articles are kept: F1
/// counts them, so "the cat sat" against "cat sat" scores 0.8.
fn answer_tokens(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let stripped: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    stripped.split_whitespace().map(String::from).collect()
}

fn bag(tokens: &[String]) -> BTreeMap<&str, usize> {
    let mut m = BTreeMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn f1_single(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let (p, g) = (bag(pred), bag(gold));
    let common: usize = p.iter().map(|(w, &c)| c.min(g.get(w).copied().unwrap_or(0))).sum();
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-bag F1 against the best-matching gold answer.
pub fn f1(prediction: &str, gold_answers: &[String]) -> f64 {
    let pred = answer_tokens(prediction);
    gold_answers
        .iter()
        .map(|g| f1_single(&pred, &answer_tokens(g)))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub query_id: String,
    pub strategy: String,
    pub params: String,
    pub prediction: String,
    pub gold: Vec<String>,
    pub f1: f64,
    pub baseline_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub plain_f1_mean: f64,
    /// Mean over records whose baseline scored above zero; `None` when no
    /// such record exists.
    pub adjusted_f1_mean: Option<f64>,
    pub n_total: usize,
    pub n_baseline_nonzero: usize,
}

/// Plain and adjusted F1 means over `records`.
pub fn adjusted_f1(records: Vec<EvalRecord>) -> EvalReport {
    let n_total = records.len();
    let plain_f1_mean = if n_total == 0 { 0.0 } else { records.iter().map(|r| r.f1).sum::<f64>() / n_total as f64 };
    let kept: Vec<f64> = records.iter().filter(|r| r.baseline_f1 > 0.0).map(|r| r.f1).collect();
    let adjusted_f1_mean = (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64);
    EvalReport { n_total, n_baseline_nonzero: kept.len(), plain_f1_mean, adjusted_f1_mean, records }
}

/// Records ΔK at every comparable layer without altering the mask.
struct Probe {
    layers: Vec<usize>,
    scores: Vec<SelectionScores>,
}

impl SelectionHook for Probe {
    fn selection_layers(&self) -> Vec<usize> {
        self.layers.clone()
    }

    fn on_layer(&mut self, layer: usize, fresh_k: &Tensor, cached_k: &Tensor) -> Result<Option<Vec<usize>>, ModelError> {
        let mut s = delta_k(fresh_k, cached_k).map_err(|_| ModelError::WeightShape(String::from("delta_k")))?;
        s.layer = layer;
        self.scores.push(s);
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdealSelection {
    /// `(layer, selected indices)` for every comparable layer.
    pub per_layer: Vec<(usize, Vec<usize>)>,
    pub scores: Vec<SelectionScores>,
    pub segments: Vec<Segment>,
    /// Tokens selected at one layer or more.
    pub union: Vec<usize>,
}

/// For each comparable layer, the top-`r` tokens by ΔK between the cached
/// keys and the keys a full prefill produces up to that layer.
pub fn ideal_layer_selection(model: &Model, chunks: &[&ChunkCache], query: &[u32], r: f64) -> Result<IdealSelection, ModelError> {
    let n_layers = model.config.n_layers;
    let mut ctx = assemble(chunks, query, &model.config)?;
    let n_ctx = ctx.context_len();
    ctx.mask = SelectionMask::uniform(FIRST_COMPARABLE_LAYER, n_layers, 0..n_ctx);
    let mut probe = Probe { layers: (FIRST_COMPARABLE_LAYER..n_layers).collect(), scores: Vec::new() };
    model.hybrid_forward(&ctx, &mut probe)?;
    let per_layer: Vec<(usize, Vec<usize>)> = probe.scores.iter().map(|s| (s.layer, select_top_r(&s.scores, r))).collect();
    let union: BTreeSet<usize> = per_layer.iter().flat_map(|(_, m)| m.iter().copied()).collect();
    Ok(IdealSelection { per_layer, scores: probe.scores, segments: ctx.segments, union: union.into_iter().collect() })
}

/// Percentage of the reference layer's selection also selected at each
/// layer. `None` when the reference selection is empty or missing.
pub fn selection_overlap(masks: &[(usize, Vec<usize>)], reference_layer: usize) -> Option<Vec<(usize, f64)>> {
    let reference: BTreeSet<usize> = masks.iter().find(|(l, _)| *l == reference_layer)?.1.iter().copied().collect();
    if reference.is_empty() {
        return None;
    }
    Some(
        masks
            .iter()
            .map(|(l, m)| {
                let hit = m.iter().filter(|i| reference.contains(i)).count();
                (*l, 100.0 * hit as f64 / reference.len() as f64)
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeCurve {
    /// Running share of total ΔK (percent) after the top-k tokens.
    pub percent: Vec<f64>,
    /// Total ΔK was zero; the curve is flat at zero.
    pub degenerate: bool,
}

/// Sorts scores descending and emits the running sum as a percentage.
pub fn cumulative_delta_k(scores: &[f64]) -> CumulativeCurve {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sorted.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return CumulativeCurve { percent: alloc::vec![0.0; sorted.len()], degenerate: true };
    }
    let mut acc = 0.0;
    let mut percent: Vec<f64> = sorted
        .iter()
        .map(|s| {
            acc += s;
            100.0 * acc / total
        })
        .collect();
    if let Some(last) = percent.last_mut() {
        *last = 100.0;
    }
    CumulativeCurve { percent, degenerate: false }
}

/// Scores with the first `n_sink` tokens of every segment removed.
pub fn without_sink_tokens(scores: &[f64], segments: &[Segment], n_sink: usize) -> Vec<f64> {
    let mut skip = alloc::vec![false; scores.len()];
    for s in segments {
        let end = (s.start + n_sink.min(s.len)).min(scores.len());
        if s.start < end {
            skip[s.start..end].fill(true);
        }
    }
    scores.iter().zip(skip).filter(|(_, k)| !k).map(|(s, _)| *s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn s(v: &str) -> String {
        String::from(v)
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("The Cat!"), vec![s("cat")]);
        assert!(normalize_answer("").is_empty());
        assert_eq!(normalize_answer("A  dog,  a dog"), vec![s("dog"), s("dog")]);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1("Paris", &[s("paris")]), 1.0);
        assert_eq!(f1("london", &[s("paris")]), 0.0);
        assert!((f1("the cat sat", &[s("cat sat")]) - 0.8).abs() < 1e-12);
        assert_eq!(f1("", &[s("")]), 1.0);
        assert_eq!(f1("", &[s("x")]), 0.0);
        assert_eq!(f1("x", &[s("y"), s("x")]), 1.0);
    }

    fn rec(f: f64, base: f64) -> EvalRecord {
        EvalRecord {
            query_id: s("q"),
            strategy: s("s"),
            params: s(""),
            prediction: s(""),
            gold: vec![],
            f1: f,
            baseline_f1: base,
        }
    }

    #[test]
    fn adjusted_examples() {
        let r = adjusted_f1(vec![rec(0.0, 0.0), rec(1.0, 0.5)]);
        assert_eq!(r.plain_f1_mean, 0.5);
        assert_eq!(r.adjusted_f1_mean, Some(1.0));
        assert_eq!(r.n_baseline_nonzero, 1);
        let r = adjusted_f1(vec![rec(0.3, 0.0), rec(0.1, 0.0)]);
        assert_eq!(r.adjusted_f1_mean, None);
        assert_eq!(r.n_baseline_nonzero, 0);
        let r = adjusted_f1(vec![rec(0.25, 0.2), rec(0.75, 1.0)]);
        assert_eq!(r.adjusted_f1_mean, Some(r.plain_f1_mean));
    }

    #[test]
    fn overlap_examples() {
        let same = vec![(1, vec![1, 2]), (2, vec![1, 2])];
        assert_eq!(selection_overlap(&same, 1), Some(vec![(1, 100.0), (2, 100.0)]));
        let masks = vec![(1, vec![0, 1, 2, 3]), (2, vec![2, 3, 4, 5]), (3, vec![6])];
        assert_eq!(selection_overlap(&masks, 1), Some(vec![(1, 100.0), (2, 50.0), (3, 0.0)]));
        assert_eq!(selection_overlap(&[(1, vec![])], 1), None);
    }

    #[test]
    fn cumulative_examples() {
        assert_eq!(cumulative_delta_k(&[4.0, 3.0, 2.0, 1.0]).percent, vec![40.0, 70.0, 90.0, 100.0]);
        assert_eq!(cumulative_delta_k(&[0.0, 5.0, 0.0]).percent, vec![100.0, 100.0, 100.0]);
        let u = cumulative_delta_k(&[2.0; 5]).percent;
        for (k, p) in u.iter().enumerate() {
            assert!((p - 100.0 * (k + 1) as f64 / 5.0).abs() < 1e-12);
        }
        let z = cumulative_delta_k(&[0.0, 0.0]);
        assert!(z.degenerate);
        assert_eq!(z.percent, vec![0.0, 0.0]);
    }

    #[test]
    fn sink_filter_drops_chunk_heads() {
        let segs = [
            Segment { chunk_id: crate::cache::ChunkId([0; 32]), start: 0, len: 3 },
            Segment { chunk_id: crate::cache::ChunkId([1; 32]), start: 3, len: 3 },
        ];
        let scores = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(without_sink_tokens(&scores, &segs, 1), vec![2.0, 3.0, 5.0, 6.0]);
        assert!(without_sink_tokens(&scores, &segs, 10).is_empty());
    }

    proptest! {
        #[test]
        fn f1_is_symmetric(a in "[a-c ]{0,12}", b in "[a-c ]{0,12}") {
            prop_assert_eq!(f1(&a, core::slice::from_ref(&b)), f1(&b, core::slice::from_ref(&a)));
        }

        #[test]
        fn cumulative_is_monotone(v in proptest::collection::vec(0.0f64..10.0, 1..50)) {
            let c = cumulative_delta_k(&v);
            for w in c.percent.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            if !c.degenerate {
                prop_assert_eq!(*c.percent.last().unwrap(), 100.0);
            }
        }

        #[test]
        fn overlap_in_range(a in proptest::collection::btree_set(0usize..20, 1..10), b in proptest::collection::btree_set(0usize..20, 0..10)) {
            let masks = vec![(1, a.into_iter().collect::<Vec<_>>()), (2, b.into_iter().collect())];
            let o = selection_overlap(&masks, 1).unwrap();
            prop_assert_eq!(o[0].1, 100.0);
            prop_assert!((0.0..=100.0).contains(&o[1].1));
        }
    }
}
