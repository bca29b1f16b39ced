//! Strategy-matrix runs over a dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use clc_core::metrics::{adjusted_f1, f1, EvalRecord, EvalReport};
use clc_core::model::{init_model, tokenize};
use clc_core::strategies::{generate_full, run_strategy, StrategyInputs};
use clc_core::{ChunkCache, Model, ModelConfig, StrategyConfig};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{ConfigError, DatasetSource, ExperimentConfig, ModelSource, ModelSpec};
use crate::dataset::{generate_synthetic, load_dataset, to_jsonl, DatasetItem};
use crate::error::BenchError;
use crate::report::{csv_bytes, fmt_opt, fmt_real, sha256_hex, write_file};
use crate::store::{CacheStats, ChunkStore};
use crate::weights_io::load_weights;

pub const PER_QUERY_FILE: &str = "per_query.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Hit/miss counts of the latest run, written into the cache directory.
pub const CACHE_STATS_FILE: &str = "last_run.json";

pub fn load_model(src: &ModelSource, global_seed: u64) -> Result<Model, BenchError> {
    src.check()?;
    match &src.path {
        Some(path) => Ok(load_weights(path)?),
        None => {
            let config: ModelConfig = (&src.config.clone().unwrap_or_default()).into();
            config.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            Ok(init_model(config, src.seed.unwrap_or(global_seed))?)
        }
    }
}

pub fn load_items(cfg: &ExperimentConfig) -> Result<Vec<DatasetItem>, BenchError> {
    let items = match &cfg.dataset {
        DatasetSource::Path(p) => load_dataset(p)?,
        DatasetSource::Synthetic(spec) => generate_synthetic(spec)?,
    };
    let mut ids = BTreeSet::new();
    if let Some(dup) = items.iter().find(|i| !ids.insert(i.id.as_str())) {
        return Err(ConfigError::Invalid(format!("duplicate query id {:?}", dup.id)).into());
    }
    Ok(items)
}

/// Everything a run needs, loaded once.
pub struct Workspace {
    pub config: ExperimentConfig,
    pub model: Model,
    pub aux_models: BTreeMap<String, Model>,
    pub items: Vec<DatasetItem>,
    pub points: Vec<StrategyConfig>,
}

impl Workspace {
    pub fn load(config: ExperimentConfig) -> Result<Self, BenchError> {
        let model = load_model(&config.model, config.seed)?;
        let mut aux_models = BTreeMap::new();
        for (name, src) in &config.aux_models {
            let aux = load_model(src, config.seed)?;
            if aux.config.vocab_size != model.config.vocab_size {
                return Err(ConfigError::Invalid(format!("aux model {name:?} has a different vocabulary")).into());
            }
            aux_models.insert(name.clone(), aux);
        }
        let points = config.strategy_points(model.config.n_layers)?;
        let items = load_items(&config)?;
        Ok(Self { config, model, aux_models, items, points })
    }

    pub fn query_tokens(&self, item: &DatasetItem) -> Vec<u32> {
        tokenize(self.config.render_query(&item.question).as_bytes())
    }
}

pub fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, BenchError> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| BenchError::Invariant(format!("thread pool: {e}")))
}

type CacheKey = (Vec<u32>, usize);

/// Chunk caches for a set of items, keyed by (tokens, prefix length).
pub struct CacheSet {
    map: BTreeMap<CacheKey, Arc<ChunkCache>>,
}

impl CacheSet {
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn chunks_for(&self, item: &DatasetItem, p: usize) -> Vec<Arc<ChunkCache>> {
        item.chunks.iter().map(|c| Arc::clone(&self.map[&(tokenize(c.as_bytes()), p)])).collect()
    }
}

/// Loads or builds every chunk cache the reuse points need, deduplicated
/// by content, then persists the store.
pub fn prepare_caches(
    model: &Model,
    store: &ChunkStore,
    items: &[DatasetItem],
    points: &[StrategyConfig],
    pool: &rayon::ThreadPool,
) -> Result<CacheSet, BenchError> {
    let reuse: Vec<&StrategyConfig> = points.iter().filter(|p| !matches!(p, StrategyConfig::FullPrefill)).collect();
    let prefixes: BTreeSet<usize> = reuse.iter().map(|p| p.prefix_len()).collect();
    let layers: Vec<usize> = reuse.iter().flat_map(|p| p.activation_layers()).collect::<BTreeSet<_>>().into_iter().collect();
    let keys: BTreeSet<CacheKey> =
        items.iter().flat_map(|i| i.chunks.iter()).flat_map(|c| prefixes.iter().map(move |&p| (tokenize(c.as_bytes()), p))).collect();
    let keys: Vec<CacheKey> = keys.into_iter().collect();
    let built = pool.install(|| {
        keys.par_iter().map(|(t, p)| store.get_or_build(model, t, *p, &layers)).collect::<Result<Vec<_>, _>>()
    })?;
    store.persist()?;
    Ok(CacheSet { map: keys.into_iter().zip(built).collect() })
}

/// Output of one strategy point on one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub item: usize,
    pub point: usize,
    pub prediction: String,
    pub f1: f64,
    pub baseline_f1: f64,
}

fn score(item: &DatasetItem, text: &[u8]) -> (String, f64) {
    let prediction = String::from_utf8_lossy(text).into_owned();
    let f1 = f1(&prediction, &item.answers);
    (prediction, f1)
}

fn run_baseline(ws: &Workspace, item: &DatasetItem) -> Result<(String, f64), BenchError> {
    let mut prompt: Vec<u32> = item.chunks.iter().flat_map(|c| tokenize(c.as_bytes())).collect();
    prompt.extend(ws.query_tokens(item));
    let g = generate_full(&ws.model, &prompt, ws.config.max_new_tokens).map_err(|e| BenchError::Strategy {
        context: format!("query {} / full_prefill", item.id),
        source: e.into(),
    })?;
    Ok(score(item, &g.text))
}

fn run_point(ws: &Workspace, caches: &CacheSet, item_idx: usize, point: &StrategyConfig) -> Result<(String, f64), BenchError> {
    let item = &ws.items[item_idx];
    let chunks = caches.chunks_for(item, point.prefix_len());
    let refs: Vec<&ChunkCache> = chunks.iter().map(|c| c.as_ref()).collect();
    let query = ws.query_tokens(item);
    let aux = match point {
        StrategyConfig::CacheClip { aux_model, .. } => ws.aux_models.get(aux_model),
        _ => None,
    };
    let inputs = StrategyInputs { model: &ws.model, aux_model: aux, chunks: &refs, query_tokens: &query, max_new_tokens: ws.config.max_new_tokens };
    let out = run_strategy(point, &inputs).map_err(|source| BenchError::Strategy { context: format!("query {} / {}", item.id, point.label()), source })?;
    Ok(score(item, &out.generation.text))
}

/// Per-point reports over `item_ids`, plus the raw results sorted by
/// (query id, point index). The full-prefill baseline runs first.
pub struct Evaluation {
    pub baseline: Vec<(String, f64)>,
    pub results: Vec<QueryResult>,
    pub reports: Vec<EvalReport>,
}

pub fn evaluate(ws: &Workspace, caches: &CacheSet, items: &[usize], points: &[StrategyConfig], pool: &rayon::ThreadPool) -> Result<Evaluation, BenchError> {
    let baseline: Vec<(String, f64)> = pool.install(|| items.par_iter().map(|&i| run_baseline(ws, &ws.items[i])).collect::<Result<_, _>>())?;
    let base_by_item: BTreeMap<usize, &(String, f64)> = items.iter().copied().zip(baseline.iter()).collect();
    let work: Vec<(usize, usize)> = items.iter().flat_map(|&i| (0..points.len()).map(move |p| (i, p))).collect();
    let mut results: Vec<QueryResult> = pool.install(|| {
        work.par_iter()
            .map(|&(item, point)| {
                let (prediction, f1) = match points[point] {
                    StrategyConfig::FullPrefill => base_by_item[&item].clone(),
                    ref cfg => run_point(ws, caches, item, cfg)?,
                };
                Ok(QueryResult { item, point, prediction, f1, baseline_f1: base_by_item[&item].1 })
            })
            .collect::<Result<Vec<_>, BenchError>>()
    })?;
    results.sort_by(|a, b| ws.items[a.item].id.cmp(&ws.items[b.item].id).then(a.point.cmp(&b.point)));
    let mut reports = Vec::with_capacity(points.len());
    for (pi, point) in points.iter().enumerate() {
        let records = results
            .iter()
            .filter(|r| r.point == pi)
            .map(|r| {
                let item = &ws.items[r.item];
                EvalRecord {
                    query_id: item.id.clone(),
                    strategy: point.name().to_string(),
                    params: point.params(),
                    prediction: r.prediction.clone(),
                    gold: item.answers.clone(),
                    f1: r.f1,
                    baseline_f1: r.baseline_f1,
                }
            })
            .collect();
        reports.push(adjusted_f1(records));
    }
    Ok(Evaluation { baseline, results, reports })
}

pub fn per_query_csv(ws: &Workspace, points: &[StrategyConfig], eval: &Evaluation) -> Vec<u8> {
    let rows = eval.results.iter().map(|r| {
        let p = &points[r.point];
        vec![ws.items[r.item].id.clone(), p.name().to_string(), p.params(), fmt_real(r.f1), fmt_real(r.baseline_f1), r.prediction.clone()]
    });
    csv_bytes(&["query_id", "strategy", "params", "f1", "baseline_f1", "output"], rows)
}

pub fn aggregate_csv(points: &[StrategyConfig], reports: &[EvalReport]) -> Vec<u8> {
    let rows = points.iter().zip(reports).map(|(p, r)| {
        vec![
            p.name().to_string(),
            p.params(),
            fmt_real(r.plain_f1_mean),
            fmt_opt(r.adjusted_f1_mean),
            r.n_total.to_string(),
            r.n_baseline_nonzero.to_string(),
        ]
    });
    csv_bytes(&["strategy", "params", "plain_f1", "adjusted_f1", "n_total", "n_baseline_nonzero"], rows)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub reports: Vec<(StrategyConfig, EvalReport)>,
    pub cache_stats: CacheStats,
    pub n_chunk_caches: usize,
}

/// Full `run`: caches, baseline, every strategy point, then the CSVs and
/// manifest in `out_dir`, and cache hit/miss counts in the cache directory.
pub fn run_experiment(ws: &Workspace, jobs: usize) -> Result<RunSummary, BenchError> {
    let pool = thread_pool(jobs)?;
    let store = ChunkStore::open(&ws.config.cache_dir, &ws.model)?;
    let caches = prepare_caches(&ws.model, &store, &ws.items, &ws.points, &pool)?;
    let stats = store.stats();
    let all: Vec<usize> = (0..ws.items.len()).collect();
    let eval = evaluate(ws, &caches, &all, &ws.points, &pool)?;
    for (p, r) in ws.points.iter().zip(&eval.reports) {
        if matches!(p, StrategyConfig::FullPrefill) && r.records.iter().any(|rec| rec.f1 != rec.baseline_f1) {
            return Err(BenchError::Invariant("full prefill disagrees with its own baseline".into()));
        }
    }
    let out = &ws.config.out_dir;
    let per_query = per_query_csv(ws, &ws.points, &eval);
    let aggregate = aggregate_csv(&ws.points, &eval.reports);
    write_file(&out.join(PER_QUERY_FILE), &per_query)?;
    write_file(&out.join(AGGREGATE_FILE), &aggregate)?;
    let manifest = manifest_json(ws, caches.len(), &[(PER_QUERY_FILE, &per_query), (AGGREGATE_FILE, &aggregate)]);
    write_file(&out.join(MANIFEST_FILE), &manifest)?;
    write_cache_stats(&ws.config.cache_dir, stats)?;
    Ok(RunSummary { reports: ws.points.iter().cloned().zip(eval.reports).collect(), cache_stats: stats, n_chunk_caches: caches.len() })
}

pub fn write_cache_stats(cache_dir: &Path, stats: CacheStats) -> Result<(), BenchError> {
    let body = json!({ "hits": stats.hits, "misses": stats.misses, "hit_rate": stats.hit_rate() });
    write_file(&cache_dir.join(CACHE_STATS_FILE), format!("{:#}\n", body).as_bytes())
}

/// Deterministic run manifest. Path-valued settings that only say where
/// files live (`cache_dir`, `out_dir`) are left out of the config echo.
pub fn manifest_json(ws: &Workspace, n_chunk_caches: usize, outputs: &[(&str, &[u8])]) -> Vec<u8> {
    let mut echo = serde_json::to_value(&ws.config).expect("config serializes");
    if let Some(obj) = echo.as_object_mut() {
        obj.remove("cache_dir");
        obj.remove("out_dir");
    }
    let aux: BTreeMap<&str, String> = ws.aux_models.iter().map(|(k, m)| (k.as_str(), hex::encode(m.fingerprint()))).collect();
    let files: BTreeMap<&str, String> = outputs.iter().map(|(n, b)| (*n, sha256_hex(b))).collect();
    let body = json!({
        "tool": "clc-bench",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": ws.config.seed,
        "model_fingerprint": hex::encode(ws.model.fingerprint()),
        "model_config": ModelSpec::from(ws.model.config.clone()),
        "aux_model_fingerprints": aux,
        "dataset": { "n_items": ws.items.len(), "sha256": sha256_hex(to_jsonl(&ws.items).as_bytes()) },
        "strategies": ws.points.iter().map(|p| p.label()).collect::<Vec<_>>(),
        "n_chunk_caches": n_chunk_caches,
        "outputs": files,
        "config": echo,
    });
    format!("{:#}\n", body).into_bytes()
}
