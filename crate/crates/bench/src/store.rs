//! On-disk chunk-cache store.
//!
//! One `CLCC` file per chunk named `<hex chunk_id>.clcc`, plus
//! `manifest.csv` listing `chunk_id,n_tokens,prefix_len,model_fingerprint`.
//! File layout, little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic | `b"CLCC"` |
//! | version | u32 (`1`) |
//! | model fingerprint | 32 bytes |
//! | chunk id | 32 bytes |
//! | prefix_len, n_layers, n_heads, d_head, d_model, n_tokens | u32 each |
//! | tokens | u32 × n_tokens |
//! | per layer | K then V, f32 × n_tokens·n_heads·d_head each |
//! | n_activations | u32 |
//! | per activation | layer u32, then f32 × n_tokens·d_model |
//!
//! Stored keys sit at positions `0..n_tokens`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use clc_core::cache::cache_key;
use clc_core::{ChunkCache, ChunkId, LayerKv, Model, ModelConfig, ModelError, Tensor};

use crate::binio::{put_f32s, put_u32, write_atomic, Reader, Truncated};

pub const CHUNK_MAGIC: [u8; 4] = *b"CLCC";
pub const CHUNK_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("chunk {0} not found")]
    NotFound(ChunkId),
    #[error("chunk {id} was built by model {found}, store expects {expected}")]
    Incompatible { id: ChunkId, expected: String, found: String },
    #[error("chunk file {path} is corrupt: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("bad store manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.display().to_string(), source }
}

pub fn encode_chunk(c: &ChunkCache, config: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHUNK_MAGIC);
    put_u32(&mut out, CHUNK_VERSION);
    out.extend_from_slice(&c.model_fingerprint);
    out.extend_from_slice(&c.chunk_id.0);
    for v in [c.prefix_len, config.n_layers, config.n_heads, config.d_head(), config.d_model, c.len()] {
        put_u32(&mut out, v as u32);
    }
    for &t in &c.tokens {
        put_u32(&mut out, t);
    }
    for kv in &c.layers {
        put_f32s(&mut out, kv.k.data());
        put_f32s(&mut out, kv.v.data());
    }
    put_u32(&mut out, c.activations.len() as u32);
    for (&l, t) in &c.activations {
        put_u32(&mut out, l as u32);
        put_f32s(&mut out, t.data());
    }
    out
}

/// Parses a chunk file and checks it against `config`, recomputing the
/// content address from the stored tokens.
pub fn decode_chunk(bytes: &[u8], config: &ModelConfig) -> Result<ChunkCache, String> {
    let t = |e: Truncated| e.to_string();
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.array("magic").map_err(t)?;
    if magic != CHUNK_MAGIC {
        return Err(format!("bad magic {magic:?}"));
    }
    let version = r.u32("version").map_err(t)?;
    if version != CHUNK_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let model_fingerprint: [u8; 32] = r.array("model fingerprint").map_err(t)?;
    let id = ChunkId(r.array("chunk id").map_err(t)?);
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u32("header").map_err(t)? as usize;
    }
    let [prefix_len, n_layers, n_heads, d_head, d_model, n] = dims;
    if (n_layers, n_heads, d_head, d_model) != (config.n_layers, config.n_heads, config.d_head(), config.d_model) {
        return Err("dimensions differ from the model config".into());
    }
    let tokens = (0..n).map(|_| r.u32("tokens")).collect::<Result<Vec<_>, _>>().map_err(t)?;
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let k = r.f32s(n * n_heads * d_head, &format!("layers.{l}.k")).map_err(t)?;
        let v = r.f32s(n * n_heads * d_head, &format!("layers.{l}.v")).map_err(t)?;
        layers.push(LayerKv {
            k: Tensor::new(vec![n, n_heads, d_head], k).map_err(|e| e.to_string())?,
            v: Tensor::new(vec![n, n_heads, d_head], v).map_err(|e| e.to_string())?,
            positions: (0..n).collect(),
        });
    }
    let mut activations = BTreeMap::new();
    for _ in 0..r.u32("activation count").map_err(t)? {
        let l = r.u32("activation layer").map_err(t)? as usize;
        let data = r.f32s(n * d_model, &format!("activations.{l}")).map_err(t)?;
        activations.insert(l, Tensor::new(vec![n, d_model], data).map_err(|e| e.to_string())?);
    }
    if r.remaining() > 0 {
        return Err(format!("{} trailing bytes", r.remaining()));
    }
    if cache_key(&tokens, prefix_len, &model_fingerprint, config) != id {
        return Err("content does not match its chunk id".into());
    }
    Ok(ChunkCache { chunk_id: id, tokens, prefix_len, layers, activations, model_fingerprint })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            1.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ManifestRow {
    n_tokens: usize,
    prefix_len: usize,
    fingerprint: String,
}

/// Chunk caches for one model, held in memory and mirrored to a directory.
///
/// Reads take a shared lock; inserting a chunk takes the write lock.
pub struct ChunkStore {
    dir: PathBuf,
    config: ModelConfig,
    fingerprint: [u8; 32],
    entries: RwLock<BTreeMap<ChunkId, Arc<ChunkCache>>>,
    on_disk: RwLock<BTreeMap<ChunkId, ManifestRow>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl ChunkStore {
    /// Opens (creating if needed) the store directory for `model`.
    pub fn open(dir: &Path, model: &Model) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let manifest = dir.join(MANIFEST_FILE);
        let mut on_disk = BTreeMap::new();
        if manifest.exists() {
            let bad = |reason: String| StoreError::Manifest { path: manifest.display().to_string(), reason };
            let mut rdr = csv::Reader::from_path(&manifest).map_err(|e| bad(e.to_string()))?;
            for rec in rdr.records() {
                let rec = rec.map_err(|e| bad(e.to_string()))?;
                let field = |i: usize| rec.get(i).ok_or_else(|| bad(format!("row {rec:?} has too few fields")));
                let id = parse_id(field(0)?).ok_or_else(|| bad(format!("bad chunk id {:?}", &rec[0])))?;
                let num = |i: usize| field(i)?.parse::<usize>().map_err(|e| bad(e.to_string()));
                on_disk.insert(id, ManifestRow { n_tokens: num(1)?, prefix_len: num(2)?, fingerprint: field(3)?.to_string() });
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            config: model.config.clone(),
            fingerprint: model.fingerprint(),
            entries: RwLock::new(BTreeMap::new()),
            on_disk: RwLock::new(on_disk),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_of(&self, id: &ChunkId) -> PathBuf {
        self.dir.join(format!("{id}.clcc"))
    }

    /// Adds `cache` to memory, replacing any entry with the same id.
    pub fn put(&self, cache: ChunkCache) -> Result<Arc<ChunkCache>, StoreError> {
        self.check_fingerprint(&cache.chunk_id, &cache.model_fingerprint)?;
        let cache = Arc::new(cache);
        self.entries.write().expect("store lock").insert(cache.chunk_id, Arc::clone(&cache));
        Ok(cache)
    }

    fn check_fingerprint(&self, id: &ChunkId, fp: &[u8; 32]) -> Result<(), StoreError> {
        if *fp != self.fingerprint {
            return Err(StoreError::Incompatible { id: *id, expected: hex::encode(self.fingerprint), found: hex::encode(fp) });
        }
        Ok(())
    }

    /// Looks `id` up in memory, then on disk.
    pub fn get(&self, id: &ChunkId) -> Result<Arc<ChunkCache>, StoreError> {
        if let Some(c) = self.entries.read().expect("store lock").get(id) {
            return Ok(Arc::clone(c));
        }
        if let Some(row) = self.on_disk.read().expect("store lock").get(id) {
            if row.fingerprint != hex::encode(self.fingerprint) {
                return Err(StoreError::Incompatible { id: *id, expected: hex::encode(self.fingerprint), found: row.fingerprint.clone() });
            }
        }
        let path = self.path_of(id);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::NotFound(*id)),
            Err(e) => return Err(io(&path)(e)),
        };
        let corrupt = |reason: String| StoreError::Corrupt { path: path.display().to_string(), reason };
        if bytes.len() >= 40 && bytes[..4] == CHUNK_MAGIC {
            let fp: [u8; 32] = bytes[8..40].try_into().expect("32 bytes");
            self.check_fingerprint(id, &fp)?;
        }
        let cache = decode_chunk(&bytes, &self.config).map_err(corrupt)?;
        if cache.chunk_id != *id {
            return Err(corrupt(format!("file holds chunk {}", cache.chunk_id)));
        }
        let cache = Arc::new(cache);
        self.entries.write().expect("store lock").entry(*id).or_insert_with(|| Arc::clone(&cache));
        Ok(cache)
    }

    /// Returns the cache for `tokens` built with prefix `p` and carrying at
    /// least `activation_layers`, building it with `model` on a miss.
    pub fn get_or_build(&self, model: &Model, tokens: &[u32], p: usize, activation_layers: &[usize]) -> Result<Arc<ChunkCache>, StoreError> {
        let id = cache_key(tokens, p, &self.fingerprint, &self.config);
        match self.get(&id) {
            Ok(c) if activation_layers.iter().all(|l| c.activations.contains_key(l)) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(c);
            }
            Ok(_) | Err(StoreError::NotFound(_)) => {}
            Err(e) => return Err(e),
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let existing: BTreeSet<usize> = self.entries.read().expect("store lock").get(&id).map(|c| c.activations.keys().copied().collect()).unwrap_or_default();
        let layers: Vec<usize> = existing.into_iter().chain(activation_layers.iter().copied()).collect::<BTreeSet<_>>().into_iter().collect();
        self.put(model.build_chunk_cache(tokens, p, &layers)?)
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats { hits: self.hits.load(Ordering::Relaxed), misses: self.misses.load(Ordering::Relaxed) }
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes every in-memory chunk not yet on disk and rewrites the manifest.
    pub fn persist(&self) -> Result<(), StoreError> {
        let entries = self.entries.read().expect("store lock");
        let mut on_disk = self.on_disk.write().expect("store lock");
        let fp = hex::encode(self.fingerprint);
        for (id, c) in entries.iter() {
            let row = ManifestRow { n_tokens: c.len(), prefix_len: c.prefix_len, fingerprint: fp.clone() };
            let path = self.path_of(id);
            let fresh = on_disk.get(id) != Some(&row) || !path.exists() || self.stale_activations(&path, c);
            if fresh {
                write_atomic(&path, &encode_chunk(c, &self.config)).map_err(io(&path))?;
            }
            on_disk.insert(*id, row);
        }
        let manifest = self.dir.join(MANIFEST_FILE);
        let mut w = csv::Writer::from_writer(Vec::new());
        let bad = |e: csv::Error| StoreError::Manifest { path: manifest.display().to_string(), reason: e.to_string() };
        w.write_record(["chunk_id", "n_tokens", "prefix_len", "model_fingerprint"]).map_err(bad)?;
        for (id, row) in on_disk.iter() {
            w.write_record([id.to_string(), row.n_tokens.to_string(), row.prefix_len.to_string(), row.fingerprint.clone()]).map_err(bad)?;
        }
        let bytes = w.into_inner().map_err(|e| bad(e.into_error().into()))?;
        write_atomic(&manifest, &bytes).map_err(io(&manifest))
    }

    /// Whether the file on disk lacks activation layers held in memory.
    fn stale_activations(&self, path: &Path, c: &ChunkCache) -> bool {
        if c.activations.is_empty() {
            return false;
        }
        match std::fs::read(path).ok().and_then(|b| decode_chunk(&b, &self.config).ok()) {
            Some(disk) => disk.activations.keys().ne(c.activations.keys()),
            None => true,
        }
    }
}

fn parse_id(s: &str) -> Option<ChunkId> {
    let bytes = hex::decode(s).ok()?;
    Some(ChunkId(bytes.try_into().ok()?))
}
