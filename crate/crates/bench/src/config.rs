//! JSON experiment configuration.
//!
//! ```json
//! {
//!   "model": { "config": { "n_layers": 4 }, "seed": 42 },
//!   "aux_models": { "small": { "config": { "n_layers": 1 }, "seed": 7 } },
//!   "cache_dir": "cache",
//!   "dataset": { "synthetic": { "n_items": 20, "n_chunks": 3, "chunk_len": 96, "seed": 1 } },
//!   "strategies": [
//!     { "kind": "naive_reuse" },
//!     { "kind": "cache_blend", "r": [0.15, 1.0] },
//!     { "kind": "psr", "r": [0.15], "p": [1, 2], "t": [0.7], "s": [2.0] }
//!   ],
//!   "out_dir": "out",
//!   "seed": 42
//! }
//! ```
//!
//! Relative paths resolve against the config file's directory. Omitted
//! grids fall back to the library defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clc_core::strategies::{
    Ablation, DEFAULT_PREFIX_GRID, DEFAULT_R, DEFAULT_RESELECT_LAYER, DEFAULT_SCALE_GRID, DEFAULT_TEMPERATURE_GRID,
};
use clc_core::{ModelConfig, StrategyConfig};
use serde::{Deserialize, Serialize};

use crate::dataset::SyntheticSpec;

pub const DEFAULT_QUERY_TEMPLATE: &str = "{question}\n";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

/// Serializable mirror of [`ModelConfig`]; omitted fields take the toy defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub rope_theta: f32,
    pub max_positions: usize,
    pub norm_eps: f32,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelConfig::default().into()
    }
}

impl From<ModelConfig> for ModelSpec {
    fn from(c: ModelConfig) -> Self {
        Self {
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_model: c.d_model,
            vocab_size: c.vocab_size,
            rope_theta: c.rope_theta,
            max_positions: c.max_positions,
            norm_eps: c.norm_eps,
        }
    }
}

impl From<&ModelSpec> for ModelConfig {
    fn from(s: &ModelSpec) -> Self {
        Self {
            n_layers: s.n_layers,
            n_heads: s.n_heads,
            d_model: s.d_model,
            vocab_size: s.vocab_size,
            rope_theta: s.rope_theta,
            max_positions: s.max_positions,
            norm_eps: s.norm_eps,
        }
    }
}

/// Either a `CLCW` file (`path`) or seeded initialization (`config`,
/// `seed`; the seed defaults to the global seed).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSource {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ModelSource {
    pub fn check(&self) -> Result<(), ConfigError> {
        if self.path.is_some() && (self.config.is_some() || self.seed.is_some()) {
            return Err(ConfigError::Invalid("model source takes either \"path\" or \"config\"/\"seed\"".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

/// One strategy family with parameter grids; the grid product is run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reselect_layer: Option<Vec<usize>>,
    /// CacheClip: key into `aux_models`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_model: Option<String>,
    /// Ablation: subset of `P`, `S`, `R` such as `"P+S"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<String>,
}

fn product<A: Copy, B: Copy>(a: &[A], b: &[B]) -> Vec<(A, B)> {
    a.iter().flat_map(|&x| b.iter().map(move |&y| (x, y))).collect()
}

fn grid_or_off<T: Copy>(on: bool, v: &[T]) -> Vec<Option<T>> {
    if on {
        v.iter().map(|&x| Some(x)).collect()
    } else {
        vec![None]
    }
}

impl StrategySpec {
    /// Every grid point in row-major order (r, p, t, s).
    pub fn expand(&self) -> Result<Vec<StrategyConfig>, ConfigError> {
        let r = self.r.clone().unwrap_or_else(|| vec![DEFAULT_R]);
        let p = self.p.clone().unwrap_or_else(|| DEFAULT_PREFIX_GRID.to_vec());
        let t = self.t.clone().unwrap_or_else(|| DEFAULT_TEMPERATURE_GRID.to_vec());
        let s = self.s.clone().unwrap_or_else(|| DEFAULT_SCALE_GRID.to_vec());
        let ts = product(&t, &s);
        let out: Vec<StrategyConfig> = match self.kind.as_str() {
            "full_prefill" => vec![StrategyConfig::FullPrefill],
            "naive_reuse" => vec![StrategyConfig::NaiveReuse],
            "cache_blend" => r.iter().map(|&r| StrategyConfig::CacheBlend { r }).collect(),
            "epic" => r.iter().map(|&r| StrategyConfig::Epic { r }).collect(),
            "link0" => p.iter().map(|&p| StrategyConfig::Link0 { p }).collect(),
            "ape" => product(&p, &ts).into_iter().map(|(p, (t, s))| StrategyConfig::Ape { p, t, s }).collect(),
            "cache_clip" => {
                let aux = self.aux_model.clone().ok_or_else(|| ConfigError::Invalid("cache_clip needs \"aux_model\"".into()))?;
                product(&r, &p).into_iter().map(|(r, p)| StrategyConfig::CacheClip { r, p, aux_model: aux.clone() }).collect()
            }
            "droidspeak_adapted" => {
                let layers = self.reselect_layer.clone().unwrap_or_else(|| vec![DEFAULT_RESELECT_LAYER]);
                product(&r, &layers).into_iter().map(|(r, reselect_layer)| StrategyConfig::DroidspeakAdapted { r, reselect_layer }).collect()
            }
            "psr" => product(&r, &product(&p, &ts)).into_iter().map(|(r, (p, (t, s)))| StrategyConfig::Psr { r, p, t, s }).collect(),
            "ablation" => self.expand_ablation(&r, &p, &ts)?,
            other => return Err(ConfigError::Invalid(format!("unknown strategy kind {other:?}"))),
        };
        if out.is_empty() {
            return Err(ConfigError::Invalid(format!("strategy {:?} has an empty grid", self.kind)));
        }
        Ok(out)
    }

    fn expand_ablation(&self, r: &[f64], p: &[usize], ts: &[(f32, f32)]) -> Result<Vec<StrategyConfig>, ConfigError> {
        let spec = self.components.as_deref().ok_or_else(|| ConfigError::Invalid("ablation needs \"components\"".into()))?;
        let mut has = [false; 3];
        if spec != "none" {
            for part in spec.split('+') {
                match part.trim() {
                    "P" => has[0] = true,
                    "S" => has[1] = true,
                    "R" => has[2] = true,
                    other => return Err(ConfigError::Invalid(format!("unknown ablation component {other:?}"))),
                }
            }
        }
        let ps = grid_or_off(has[0], p);
        let scales = grid_or_off(has[1], ts);
        let rs = grid_or_off(has[2], r);
        let mut out = Vec::new();
        for &recompute in &rs {
            for &prefix in &ps {
                for &scale in &scales {
                    out.push(StrategyConfig::Ablation(Ablation { prefix, scale, recompute }));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSpec {
    /// Query to analyse; the first dataset item when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    pub r: f64,
    /// Layer whose ΔK feeds the cumulative curve.
    pub layer: usize,
    /// Leading tokens per chunk dropped for the no-sink curve.
    pub n_sink: usize,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self { query_id: None, r: DEFAULT_R, layer: clc_core::strategies::FIRST_COMPARABLE_LAYER, n_sink: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneSpec {
    /// Share of queries (by id hash) in the tuning split.
    pub split_fraction: f64,
}

impl Default for TuneSpec {
    fn default() -> Self {
        Self { split_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    #[serde(default)]
    pub aux_models: BTreeMap<String, ModelSource>,
    pub cache_dir: PathBuf,
    pub dataset: DatasetSource,
    pub strategies: Vec<StrategySpec>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default = "default_template")]
    pub query_template: String,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    #[serde(default)]
    pub tune: TuneSpec,
}

fn default_max_new_tokens() -> usize {
    16
}

fn default_template() -> String {
    DEFAULT_QUERY_TEMPLATE.to_string()
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut cfg = Self::from_json(&text, &path.display().to_string())?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.cache_dir);
        fix(&mut self.out_dir);
        if let DatasetSource::Path(p) = &mut self.dataset {
            fix(p);
        }
        for src in std::iter::once(&mut self.model).chain(self.aux_models.values_mut()) {
            if let Some(path) = &mut src.path {
                fix(path);
            }
        }
    }

    /// Expanded strategy points in config order, validated against `n_layers`.
    pub fn strategy_points(&self, n_layers: usize) -> Result<Vec<StrategyConfig>, ConfigError> {
        self.model.check()?;
        for src in self.aux_models.values() {
            src.check()?;
        }
        if self.strategies.is_empty() {
            return Err(ConfigError::Invalid("no strategies configured".into()));
        }
        let mut out = Vec::new();
        for spec in &self.strategies {
            for point in spec.expand()? {
                point.validate(n_layers).map_err(|e| ConfigError::Invalid(format!("{}: {e}", point.label())))?;
                if let StrategyConfig::CacheClip { aux_model, .. } = &point {
                    if !self.aux_models.contains_key(aux_model) {
                        return Err(ConfigError::Invalid(format!("unknown aux model {aux_model:?}")));
                    }
                }
                if !out.contains(&point) {
                    out.push(point);
                }
            }
        }
        Ok(out)
    }

    pub fn render_query(&self, question: &str) -> String {
        self.query_template.replace("{question}", question)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> &'static str {
        r#"{"model":{"config":{"n_layers":2},"seed":3},"cache_dir":"c","dataset":{"path":"d.jsonl"},
            "strategies":[{"kind":"psr","r":[0.15],"p":[1,2],"t":[0.7],"s":[2.0]}],"out_dir":"o"}"#
    }

    #[test]
    fn parses_and_resolves() {
        let mut c = ExperimentConfig::from_json(base(), "x").unwrap();
        c.resolve_paths(Path::new("/base"));
        assert_eq!(c.cache_dir, PathBuf::from("/base/c"));
        assert_eq!(c.dataset, DatasetSource::Path("/base/d.jsonl".into()));
        assert_eq!(c.model, ModelSource { path: None, config: Some(ModelSpec { n_layers: 2, ..ModelSpec::default() }), seed: Some(3) });
        assert_eq!(c.max_new_tokens, 16);
        assert_eq!(c.render_query("Q?"), "Q?\n");
        let pts = c.strategy_points(2).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1].label(), "psr[r=0.15;p=2;t=0.7;s=2]");
    }

    #[test]
    fn defaults_fill_missing_grids() {
        let spec = StrategySpec { kind: "ape".into(), ..Default::default() };
        assert_eq!(spec.expand().unwrap().len(), 5 * 4 * 3);
        let spec = StrategySpec { kind: "droidspeak_adapted".into(), ..Default::default() };
        assert_eq!(spec.expand().unwrap(), vec![StrategyConfig::DroidspeakAdapted { r: 0.15, reselect_layer: 5 }]);
    }

    #[test]
    fn ablation_components() {
        let spec = StrategySpec { kind: "ablation".into(), components: Some("P+S+R".into()), r: Some(vec![0.15]), p: Some(vec![1]), t: Some(vec![0.7]), s: Some(vec![2.0]), ..Default::default() };
        let pts = spec.expand().unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].params(), "components=P+S+R;p=1;t=0.7;s=2;r=0.15");
        let bad = StrategySpec { components: Some("Q".into()), ..spec };
        assert!(bad.expand().is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let c = ExperimentConfig::from_json(&base().replace("0.15", "1.5"), "x").unwrap();
        assert!(c.strategy_points(2).is_err());
        assert!(ExperimentConfig::from_json(&base().replace("\"seed\":3", "\"sed\":3"), "x").is_err());
        let c = ExperimentConfig::from_json(&base().replace("psr", "teleport"), "x").unwrap();
        assert!(matches!(c.strategy_points(2), Err(ConfigError::Invalid(_))));
        let c = ExperimentConfig::from_json(&base().replace(r#""kind":"psr""#, r#""kind":"cache_clip","aux_model":"nope""#).replace(r#","t":[0.7],"s":[2.0]"#, ""), "x").unwrap();
        assert!(c.strategy_points(2).unwrap_err().to_string().contains("nope"));
    }
}
