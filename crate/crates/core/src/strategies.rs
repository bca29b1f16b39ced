//! KV-cache reuse policies expressed as selection and reshaping hooks over
//! [`Model::hybrid_forward`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::cache::{assemble, ChunkCache, Segment, SelectionMask};
use crate::model::forward::bucket_softmax;
use crate::model::{AttentionPolicy, GenerationResult, Model, ModelError, NoSelection, Reshape, SelectionHook, EOS};
use crate::tensor::{l2sq_slices, Tensor, TensorError};

/// Recompute fraction used by most CLC systems.
pub const DEFAULT_R: f64 = 0.15;
/// Droidspeak-adapted re-selection layer.
pub const DEFAULT_RESELECT_LAYER: usize = 5;
pub const DEFAULT_PREFIX_GRID: [usize; 5] = [1, 2, 3, 5, 10];
pub const DEFAULT_TEMPERATURE_GRID: [f32; 4] = [0.5, 0.7, 0.9, 1.0];
pub const DEFAULT_SCALE_GRID: [f32; 3] = [0.5, 1.0, 2.0];
/// Layer whose keys drive first-pass selection (the first layer where cached
/// and recomputed keys can differ).
pub const FIRST_COMPARABLE_LAYER: usize = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StrategyError {
    #[error("invalid strategy parameter: {0}")]
    InvalidParameter(String),
    #[error("chunk caches lack activations for layer {layer}")]
    MissingActivations { layer: usize },
    #[error("chunk cache built with prefix {found}, strategy needs {expected}")]
    PrefixMismatch { expected: usize, found: usize },
    #[error("strategy needs an auxiliary model")]
    MissingAuxModel,
    #[error("auxiliary model incompatible: {0}")]
    AuxMismatch(&'static str),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<ModelError> for StrategyError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::MissingActivations { layer } => Self::MissingActivations { layer },
            other => Self::Model(other),
        }
    }
}

/// Components of a PSR ablation point.
#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    /// P: blank prefix tokens when building chunk caches.
    pub prefix: Option<usize>,
    /// S: APE temperature and scale on query rows.
    pub scale: Option<(f32, f32)>,
    /// R: CacheBlend-style recompute fraction.
    pub recompute: Option<f64>,
}

impl Ablation {
    pub fn components(&self) -> String {
        let mut parts = Vec::new();
        if self.prefix.is_some() {
            parts.push("P");
        }
        if self.scale.is_some() {
            parts.push("S");
        }
        if self.recompute.is_some() {
            parts.push("R");
        }
        if parts.is_empty() {
            String::from("none")
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StrategyConfig {
    FullPrefill,
    NaiveReuse,
    CacheBlend { r: f64 },
    Epic { r: f64 },
    Link0 { p: usize },
    Ape { p: usize, t: f32, s: f32 },
    CacheClip { r: f64, p: usize, aux_model: String },
    DroidspeakAdapted { r: f64, reselect_layer: usize },
    Psr { r: f64, p: usize, t: f32, s: f32 },
    Ablation(Ablation),
}

enum Selection {
    None,
    DeltaK { r: f64, reselect: Option<usize> },
    Epic(f64),
    CacheClip(f64),
}

struct Plan {
    prefix: usize,
    reshape: Option<Reshape>,
    selection: Selection,
}

impl StrategyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::FullPrefill => "full_prefill",
            Self::NaiveReuse => "naive_reuse",
            Self::CacheBlend { .. } => "cache_blend",
            Self::Epic { .. } => "epic",
            Self::Link0 { .. } => "link0",
            Self::Ape { .. } => "ape",
            Self::CacheClip { .. } => "cache_clip",
            Self::DroidspeakAdapted { .. } => "droidspeak_adapted",
            Self::Psr { .. } => "psr",
            Self::Ablation(_) => "ablation",
        }
    }

    /// Stable `key=value;...` rendering of the parameters.
    pub fn params(&self) -> String {
        match self {
            Self::FullPrefill | Self::NaiveReuse => String::new(),
            Self::CacheBlend { r } | Self::Epic { r } => format!("r={r}"),
            Self::Link0 { p } => format!("p={p}"),
            Self::Ape { p, t, s } => format!("p={p};t={t};s={s}"),
            Self::CacheClip { r, p, aux_model } => format!("r={r};p={p};aux={aux_model}"),
            Self::DroidspeakAdapted { r, reselect_layer } => format!("r={r};reselect={reselect_layer}"),
            Self::Psr { r, p, t, s } => format!("r={r};p={p};t={t};s={s}"),
            Self::Ablation(a) => {
                let mut out = format!("components={}", a.components());
                if let Some(p) = a.prefix {
                    out.push_str(&format!(";p={p}"));
                }
                if let Some((t, s)) = a.scale {
                    out.push_str(&format!(";t={t};s={s}"));
                }
                if let Some(r) = a.recompute {
                    out.push_str(&format!(";r={r}"));
                }
                out
            }
        }
    }

    pub fn label(&self) -> String {
        let p = self.params();
        if p.is_empty() {
            String::from(self.name())
        } else {
            format!("{}[{p}]", self.name())
        }
    }

    fn plan(&self) -> Plan {
        let reshape = |t: f32, s: f32| Some(Reshape { temperature: t, scale: s });
        let delta = |r: f64| Selection::DeltaK { r, reselect: None };
        match *self {
            Self::FullPrefill | Self::NaiveReuse => Plan { prefix: 0, reshape: None, selection: Selection::None },
            Self::CacheBlend { r } => Plan { prefix: 0, reshape: None, selection: delta(r) },
            Self::Epic { r } => Plan { prefix: 0, reshape: None, selection: Selection::Epic(r) },
            Self::Link0 { p } => Plan { prefix: p, reshape: None, selection: Selection::None },
            Self::Ape { p, t, s } => Plan { prefix: p, reshape: reshape(t, s), selection: Selection::None },
            Self::CacheClip { r, p, .. } => Plan { prefix: p, reshape: None, selection: Selection::CacheClip(r) },
            Self::DroidspeakAdapted { r, reselect_layer } => Plan {
                prefix: 0,
                reshape: None,
                selection: Selection::DeltaK { r, reselect: Some(reselect_layer) },
            },
            Self::Psr { r, p, t, s } => Plan { prefix: p, reshape: reshape(t, s), selection: delta(r) },
            Self::Ablation(ref a) => Plan {
                prefix: a.prefix.unwrap_or(0),
                reshape: a.scale.and_then(|(t, s)| reshape(t, s)),
                selection: a.recompute.map_or(Selection::None, delta),
            },
        }
    }

    /// Blank prefix length the chunk caches must be built with.
    pub fn prefix_len(&self) -> usize {
        self.plan().prefix
    }

    /// Layers whose inputs the chunk caches must carry.
    pub fn activation_layers(&self) -> Vec<usize> {
        match *self {
            Self::DroidspeakAdapted { reselect_layer, .. } if reselect_layer > FIRST_COMPARABLE_LAYER => {
                vec![reselect_layer - 1]
            }
            _ => Vec::new(),
        }
    }

    pub fn needs_aux_model(&self) -> bool {
        matches!(self, Self::CacheClip { .. })
    }

    pub fn validate(&self, n_layers: usize) -> Result<(), StrategyError> {
        let bad = |m: String| Err(StrategyError::InvalidParameter(m));
        let check_r = |r: f64| if (0.0..=1.0).contains(&r) { Ok(()) } else { bad(format!("r={r} outside [0,1]")) };
        let check_ts = |t: f32, s: f32| {
            if t > 0.0 && s > 0.0 && t.is_finite() && s.is_finite() {
                Ok(())
            } else {
                bad(format!("t={t}, s={s} must be positive"))
            }
        };
        match *self {
            Self::FullPrefill | Self::NaiveReuse | Self::Link0 { .. } => Ok(()),
            Self::CacheBlend { r } | Self::Epic { r } | Self::CacheClip { r, .. } => check_r(r),
            Self::Ape { t, s, .. } => check_ts(t, s),
            Self::DroidspeakAdapted { r, reselect_layer } => {
                check_r(r)?;
                if reselect_layer < 1 || reselect_layer >= n_layers {
                    return bad(format!("reselect_layer={reselect_layer} outside [1,{n_layers})"));
                }
                Ok(())
            }
            Self::Psr { r, t, s, .. } => {
                check_r(r)?;
                check_ts(t, s)
            }
            Self::Ablation(ref a) => {
                if let Some(r) = a.recompute {
                    check_r(r)?;
                }
                if let Some((t, s)) = a.scale {
                    check_ts(t, s)?;
                }
                Ok(())
            }
        }
    }
}

/// Per-context-token ΔK values and the layer they were measured at.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionScores {
    pub layer: usize,
    pub scores: Vec<f64>,
}

/// Per token, the squared L2 distance between recomputed and cached keys
/// summed over heads. Both tensors are `[n × H × d_head]`.
pub fn delta_k(k_recomputed: &Tensor, k_cached: &Tensor) -> Result<SelectionScores, StrategyError> {
    if k_recomputed.shape() != k_cached.shape() || k_recomputed.shape().len() != 3 {
        return Err(StrategyError::InvalidParameter(format!(
            "delta_k shapes {:?} vs {:?}",
            k_recomputed.shape(),
            k_cached.shape()
        )));
    }
    let dh = k_recomputed.shape()[2];
    let scores = (0..k_recomputed.rows())
        .map(|t| {
            k_recomputed
                .row(t)
                .chunks_exact(dh)
                .zip(k_cached.row(t).chunks_exact(dh))
                .map(|(a, b)| l2sq_slices(a, b))
                .sum()
        })
        .collect();
    Ok(SelectionScores { layer: 0, scores })
}

/// Number of tokens a fraction `r` selects out of `n` (`round(r·n)`).
pub fn budget(r: f64, n: usize) -> usize {
    (libm::round(r * n as f64) as usize).min(n)
}

/// The `round(r·n)` highest scores, ties to the lower index. Returned sorted.
pub fn select_top_r(scores: &[f64], r: f64) -> Vec<usize> {
    let k = budget(r.clamp(0.0, 1.0), scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out: Vec<usize> = order.into_iter().take(k).collect();
    out.sort_unstable();
    out
}

/// First `floor(r·len)` tokens of every segment (at least one when `r > 0`).
pub fn select_epic(segments: &[Segment], r: f64) -> Vec<usize> {
    let mut out = Vec::new();
    if r <= 0.0 {
        return out;
    }
    for seg in segments {
        if seg.len == 0 {
            continue;
        }
        // small epsilon guards products like 0.15 * 20 landing just under 3
        let n = (libm::floor(r * seg.len as f64 + 1e-9) as usize).clamp(1, seg.len);
        out.extend(seg.start..seg.start + n);
    }
    out
}

/// Ranks context tokens by the auxiliary model's last-layer attention from
/// the query rows (mean over rows and heads) and keeps the top `round(r·n)`.
pub fn select_cacheclip(aux: &Model, prompt: &[u32], n_ctx: usize, r: f64) -> Result<Vec<usize>, StrategyError> {
    if n_ctx > prompt.len() {
        return Err(StrategyError::AuxMismatch("context longer than prompt"));
    }
    if prompt.len() > aux.config.max_positions {
        return Err(StrategyError::AuxMismatch("prompt exceeds auxiliary max_positions"));
    }
    if prompt.iter().any(|&t| t as usize >= aux.config.vocab_size) {
        return Err(StrategyError::AuxMismatch("token outside auxiliary vocabulary"));
    }
    if budget(r, n_ctx) == 0 {
        return Ok(Vec::new());
    }
    let n_query = (prompt.len() - n_ctx).max(1);
    let importance = aux.attention_profile(prompt, aux.config.n_layers - 1, n_query)?;
    Ok(select_top_r(&importance[..n_ctx], r))
}

/// Two-bucket softmax over one query row's attention logits. Context-bucket
/// logits are divided by `t` and their exponentials multiplied by `s`;
/// local logits are untouched; the union is normalized.
pub fn apply_ape_reshaping(logits: &[f32], context: &[bool], t: f32, s: f32) -> Result<Vec<f32>, StrategyError> {
    if !(t > 0.0 && s > 0.0) {
        return Err(StrategyError::InvalidParameter(format!("t={t}, s={s} must be positive")));
    }
    if logits.len() != context.len() {
        return Err(StrategyError::InvalidParameter(String::from("bucket labels must match logits")));
    }
    let mut w = Vec::new();
    bucket_softmax(logits, |j| context[j], Some(Reshape { temperature: t, scale: s }), &mut w);
    Ok(w.into_iter().map(|v| v as f32).collect())
}

/// ΔK-driven selection at the first comparable layer and, optionally, a
/// second re-selection layer.
pub struct DeltaKSelector {
    pub r: f64,
    layers: Vec<usize>,
    pub recorded: Vec<SelectionScores>,
}

impl DeltaKSelector {
    pub fn new(r: f64, reselect: Option<usize>) -> Self {
        let mut layers = vec![FIRST_COMPARABLE_LAYER];
        if let Some(l) = reselect {
            if l != FIRST_COMPARABLE_LAYER {
                layers.push(l);
            }
        }
        Self { r, layers, recorded: Vec::new() }
    }
}

impl SelectionHook for DeltaKSelector {
    fn selection_layers(&self) -> Vec<usize> {
        self.layers.clone()
    }

    fn on_layer(&mut self, layer: usize, fresh_k: &Tensor, cached_k: &Tensor) -> Result<Option<Vec<usize>>, ModelError> {
        let mut scores = delta_k(fresh_k, cached_k).map_err(|_| ModelError::WeightShape(String::from("delta_k")))?;
        scores.layer = layer;
        let sel = select_top_r(&scores.scores, self.r);
        self.recorded.push(scores);
        Ok(Some(sel))
    }
}

pub struct StrategyInputs<'a> {
    pub model: &'a Model,
    pub aux_model: Option<&'a Model>,
    pub chunks: &'a [&'a ChunkCache],
    pub query_tokens: &'a [u32],
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyOutcome {
    pub generation: GenerationResult,
    /// Final selection mask (empty for full prefill and pure reuse).
    pub mask: SelectionMask,
    /// ΔK vectors computed at runtime, in layer order.
    pub scores: Vec<SelectionScores>,
}

/// Full prefill of `prompt` followed by greedy decoding.
pub fn generate_full(model: &Model, prompt: &[u32], max_new_tokens: usize) -> Result<GenerationResult, ModelError> {
    let mut pre = model.full_prefill(prompt)?;
    model.decode_greedy(&mut pre.layers, &AttentionPolicy::default(), &pre.logits, max_new_tokens, EOS)
}

/// Serves one query with the given reuse policy and decodes greedily.
pub fn run_strategy(config: &StrategyConfig, inputs: &StrategyInputs<'_>) -> Result<StrategyOutcome, StrategyError> {
    let model = inputs.model;
    let n_layers = model.config.n_layers;
    config.validate(n_layers)?;
    if matches!(config, StrategyConfig::FullPrefill) {
        let mut prompt: Vec<u32> = inputs.chunks.iter().flat_map(|c| c.tokens.iter().copied()).collect();
        prompt.extend_from_slice(inputs.query_tokens);
        let generation = generate_full(model, &prompt, inputs.max_new_tokens)?;
        return Ok(StrategyOutcome { generation, mask: SelectionMask::empty(), scores: Vec::new() });
    }

    let plan = config.plan();
    if let Some(c) = inputs.chunks.iter().find(|c| c.prefix_len != plan.prefix) {
        return Err(StrategyError::PrefixMismatch { expected: plan.prefix, found: c.prefix_len });
    }
    let mut ctx = assemble(inputs.chunks, inputs.query_tokens, &model.config)?;
    for l in config.activation_layers() {
        if !ctx.activations.contains_key(&l) {
            return Err(StrategyError::MissingActivations { layer: l });
        }
    }
    ctx.reshaping = plan.reshape;
    let n_ctx = ctx.context_len();
    let mut selector = None;
    match plan.selection {
        Selection::None => {}
        Selection::Epic(r) => {
            ctx.mask = SelectionMask::uniform(FIRST_COMPARABLE_LAYER, n_layers, select_epic(&ctx.segments, r));
        }
        Selection::CacheClip(r) => {
            let aux = inputs.aux_model.ok_or(StrategyError::MissingAuxModel)?;
            let sel = select_cacheclip(aux, &ctx.prompt_tokens(), n_ctx, r)?;
            ctx.mask = SelectionMask::uniform(FIRST_COMPARABLE_LAYER, n_layers, sel);
        }
        Selection::DeltaK { r, reselect } => selector = Some(DeltaKSelector::new(r, reselect)),
    }
    let out = match selector.as_mut() {
        Some(s) => model.hybrid_forward(&ctx, s)?,
        None => model.hybrid_forward(&ctx, &mut NoSelection)?,
    };
    let mut ctx = out.ctx;
    let policy = AttentionPolicy { n_ctx, mask: ctx.mask.clone(), reshape: ctx.reshaping };
    let generation = model.decode_greedy(&mut ctx.layers, &policy, &out.logits, inputs.max_new_tokens, EOS)?;
    Ok(StrategyOutcome {
        generation,
        mask: ctx.mask,
        scores: selector.map(|s| s.recorded).unwrap_or_default(),
    })
}
