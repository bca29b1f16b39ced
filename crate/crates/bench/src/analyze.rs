//! ΔK analyses for one query: per-layer ideal selection heatmap, selection
//! overlap and cumulative ΔK curves.

use clc_core::metrics::{cumulative_delta_k, ideal_layer_selection, selection_overlap, without_sink_tokens, IdealSelection};
use clc_core::model::tokenize;
use clc_core::ChunkCache;

use crate::config::ConfigError;
use crate::error::BenchError;
use crate::report::{csv_bytes, fmt_real};
use crate::store::ChunkStore;
use crate::experiment::Workspace;

pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const OVERLAP_FILE: &str = "overlap.csv";
pub const CUMULATIVE_FILE: &str = "cumulative.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalysisKind {
    Heatmap,
    Overlap,
    Cumulative,
}

impl AnalysisKind {
    pub fn file_name(self) -> &'static str {
        match self {
            Self::Heatmap => HEATMAP_FILE,
            Self::Overlap => OVERLAP_FILE,
            Self::Cumulative => CUMULATIVE_FILE,
        }
    }
}

/// Ideal per-layer selection for the configured analysis query, using
/// chunk caches built without a prefix.
pub fn analysis_selection(ws: &Workspace, store: &ChunkStore, query_id: Option<&str>) -> Result<IdealSelection, BenchError> {
    let wanted = query_id.or(ws.config.analysis.query_id.as_deref());
    let item = match wanted {
        Some(id) => ws.items.iter().find(|i| i.id == id).ok_or_else(|| BenchError::QueryNotFound(id.to_string()))?,
        None => ws.items.first().ok_or_else(|| BenchError::QueryNotFound(String::new()))?,
    };
    let r = ws.config.analysis.r;
    if !(0.0..=1.0).contains(&r) {
        return Err(ConfigError::Invalid(format!("analysis r={r} outside [0,1]")).into());
    }
    let caches = item.chunks.iter().map(|c| store.get_or_build(&ws.model, &tokenize(c.as_bytes()), 0, &[])).collect::<Result<Vec<_>, _>>()?;
    store.persist()?;
    let refs: Vec<&ChunkCache> = caches.iter().map(|c| c.as_ref()).collect();
    Ok(ideal_layer_selection(&ws.model, &refs, &ws.query_tokens(item), r)?)
}

/// `(layer, token_index, selected)` over tokens selected at one layer or more.
pub fn heatmap_csv(sel: &IdealSelection) -> Vec<u8> {
    let rows = sel.per_layer.iter().flat_map(|(layer, mask)| {
        sel.union.iter().map(move |t| vec![layer.to_string(), t.to_string(), u8::from(mask.binary_search(t).is_ok()).to_string()])
    });
    csv_bytes(&["layer", "token_index", "selected"], rows)
}

/// `(reference_layer, layer, percent)` with every comparable layer as a
/// reference. References with an empty selection are skipped.
pub fn overlap_csv(sel: &IdealSelection) -> Vec<u8> {
    let mut rows = Vec::new();
    for (reference, _) in &sel.per_layer {
        for (layer, pct) in selection_overlap(&sel.per_layer, *reference).unwrap_or_default() {
            rows.push(vec![reference.to_string(), layer.to_string(), fmt_real(pct)]);
        }
    }
    csv_bytes(&["reference_layer", "layer", "percent"], rows)
}

/// `(rank, cumulative_percent, variant)` at `layer`, for all tokens
/// (`all`) and without the first `n_sink` tokens of each chunk (`no_sink`).
pub fn cumulative_csv(sel: &IdealSelection, layer: usize, n_sink: usize) -> Result<Vec<u8>, BenchError> {
    let scores = sel
        .scores
        .iter()
        .find(|s| s.layer == layer)
        .ok_or_else(|| ConfigError::Invalid(format!("analysis layer {layer} is not a comparable layer")))?;
    let variants = [("all", scores.scores.clone()), ("no_sink", without_sink_tokens(&scores.scores, &sel.segments, n_sink))];
    let mut rows = Vec::new();
    for (name, v) in variants {
        for (rank, pct) in cumulative_delta_k(&v).percent.into_iter().enumerate() {
            rows.push(vec![(rank + 1).to_string(), fmt_real(pct), name.to_string()]);
        }
    }
    Ok(csv_bytes(&["rank", "cumulative_percent", "variant"], rows))
}

pub fn render(kind: AnalysisKind, ws: &Workspace, sel: &IdealSelection) -> Result<Vec<u8>, BenchError> {
    Ok(match kind {
        AnalysisKind::Heatmap => heatmap_csv(sel),
        AnalysisKind::Overlap => overlap_csv(sel),
        AnalysisKind::Cumulative => cumulative_csv(sel, ws.config.analysis.layer, ws.config.analysis.n_sink)?,
    })
}
