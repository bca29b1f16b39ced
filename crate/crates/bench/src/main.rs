use std::path::{Path, PathBuf};
use std::process;

use clap::{Parser, Subcommand, ValueEnum};
use clc_bench::analyze::{analysis_selection, render, AnalysisKind};
use clc_bench::config::ModelSource;
use clc_bench::dataset::to_jsonl;
use clc_bench::experiment::{load_items, load_model, prepare_caches, thread_pool};
use clc_bench::report::{fmt_opt, fmt_real, write_file};
use clc_bench::tune::tune;
use clc_bench::{run_experiment, save_weights, BenchError, ChunkStore, ConfigError, ExperimentConfig, Workspace};

#[derive(Parser)]
#[command(name = "clc", version, about = "Chunk-level KV-cache reuse benchmark")]
struct Cli {
    /// JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize the configured model and write `<out_dir>/model.clcw`.
    InitModel,
    /// Build or load every chunk cache the configured strategies need.
    BuildCaches,
    /// Run the strategy matrix and write per-query, aggregate and manifest files.
    Run,
    /// ΔK analysis of one query.
    Analyze {
        #[arg(value_enum)]
        kind: Kind,
        /// Query id (default: the config's analysis query, else the first item).
        #[arg(long)]
        query: Option<String>,
    },
    /// Grid search on a held-out split; writes `tuning.csv`.
    Tune,
    /// Write the configured dataset to `<out_dir>/dataset.jsonl`.
    GenDataset,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Heatmap,
    Overlap,
    Cumulative,
}

impl From<Kind> for AnalysisKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Heatmap => Self::Heatmap,
            Kind::Overlap => Self::Overlap,
            Kind::Cumulative => Self::Cumulative,
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, BenchError> {
    let path = cli.config.as_deref().ok_or_else(|| ConfigError::Invalid("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out_dir {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn jobs(cli: &Cli) -> Result<usize, BenchError> {
    match cli.jobs {
        Some(0) => Err(ConfigError::Invalid("--jobs must be positive".into()).into()),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn init_model(cli: &Cli) -> Result<(), BenchError> {
    let (src, seed, out) = match &cli.config {
        Some(_) => {
            let cfg = load_config(cli)?;
            (cfg.model, cfg.seed, cfg.out_dir)
        }
        None => (
            ModelSource { path: None, config: None, seed: None },
            cli.seed.unwrap_or(0),
            cli.out_dir.clone().unwrap_or_else(|| PathBuf::from(".")),
        ),
    };
    let model = load_model(&src, seed)?;
    let path = out.join("model.clcw");
    std::fs::create_dir_all(&out).map_err(|source| BenchError::Output { path: out.display().to_string(), source })?;
    save_weights(&model, &path)?;
    println!("{}  {}", hex(&model.fingerprint()), path.display());
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn print_lines(path: &Path) {
    println!("wrote {}", path.display());
}

fn dispatch(cli: &Cli) -> Result<(), BenchError> {
    match &cli.command {
        Command::InitModel => init_model(cli),
        Command::GenDataset => {
            let cfg = load_config(cli)?;
            let items = load_items(&cfg)?;
            let path = cfg.out_dir.join("dataset.jsonl");
            write_file(&path, to_jsonl(&items).as_bytes())?;
            print_lines(&path);
            Ok(())
        }
        Command::BuildCaches => {
            let ws = Workspace::load(load_config(cli)?)?;
            let pool = thread_pool(jobs(cli)?)?;
            let store = ChunkStore::open(&ws.config.cache_dir, &ws.model)?;
            let caches = prepare_caches(&ws.model, &store, &ws.items, &ws.points, &pool)?;
            let stats = store.stats();
            println!("{} chunk caches ({} hits, {} misses) in {}", caches.len(), stats.hits, stats.misses, ws.config.cache_dir.display());
            Ok(())
        }
        Command::Run => {
            let ws = Workspace::load(load_config(cli)?)?;
            let summary = run_experiment(&ws, jobs(cli)?)?;
            println!("strategy,params,plain_f1,adjusted_f1");
            for (p, r) in &summary.reports {
                println!("{},{},{},{}", p.name(), p.params(), fmt_real(r.plain_f1_mean), fmt_opt(r.adjusted_f1_mean));
            }
            eprintln!("chunk caches: {} ({} hits, {} misses)", summary.n_chunk_caches, summary.cache_stats.hits, summary.cache_stats.misses);
            Ok(())
        }
        Command::Analyze { kind, query } => {
            let ws = Workspace::load(load_config(cli)?)?;
            let store = ChunkStore::open(&ws.config.cache_dir, &ws.model)?;
            let sel = analysis_selection(&ws, &store, query.as_deref())?;
            let kind = AnalysisKind::from(*kind);
            let bytes = render(kind, &ws, &sel)?;
            let path = ws.config.out_dir.join(kind.file_name());
            write_file(&path, &bytes)?;
            print_lines(&path);
            Ok(())
        }
        Command::Tune => {
            let ws = Workspace::load(load_config(cli)?)?;
            let outcome = tune(&ws, jobs(cli)?)?;
            for b in &outcome.best {
                println!("{}", b.label());
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(&cli) {
        eprintln!("error: {e}");
        process::exit(e.exit_code() as i32);
    }
}
