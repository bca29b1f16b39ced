mod common;

use clc_bench::dataset::{to_jsonl, DatasetItem};
use clc_bench::tune::tune;
use clc_bench::{save_weights, BenchError, ExitCode, Workspace};
use clc_core::StrategyConfig;
use common::{config_in, constant_model};

/// Every strategy answers "7777" on every query, so all grid points tie.
fn degenerate_setup(dir: &std::path::Path, strategies: &str, fraction: f64) -> Workspace {
    save_weights(&constant_model(b'7'), &dir.join("model.clcw")).unwrap();
    let items: Vec<DatasetItem> = (0..6)
        .map(|i| DatasetItem {
            id: format!("d{i}"),
            question: format!("code {i}?"),
            chunks: vec![format!("first part {i}. "), "second part. ".into()],
            answers: vec!["7777".into()],
        })
        .collect();
    std::fs::write(dir.join("data.jsonl"), to_jsonl(&items)).unwrap();
    let json = format!(
        r#"{{"model":{{"path":"model.clcw"}},"cache_dir":"cache","dataset":{{"path":"data.jsonl"}},
            "strategies":{strategies},"out_dir":"out","max_new_tokens":4,"tune":{{"split_fraction":{fraction}}}}}"#
    );
    Workspace::load(config_in(dir, &json)).unwrap()
}

#[test]
fn degenerate_prefix_grid_prefers_no_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let ws = degenerate_setup(dir.path(), r#"[{"kind":"link0","p":[1,0]},{"kind":"ape","p":[1,0],"t":[1.0],"s":[1.0]}]"#, 1.0);
    let out = tune(&ws, 2).unwrap();
    assert!(out.reports.iter().all(|(_, r)| r.adjusted_f1_mean == Some(1.0)));
    assert_eq!(out.best, vec![StrategyConfig::Link0 { p: 0 }, StrategyConfig::Ape { p: 0, t: 1.0, s: 1.0 }]);
    let csv = std::fs::read_to_string(dir.path().join("out/tuning.csv")).unwrap();
    assert_eq!(
        csv,
        "strategy,params,plain_f1,adjusted_f1,n_total,n_baseline_nonzero,best\n\
         link0,p=1,1,1,6,6,0\nlink0,p=0,1,1,6,6,1\nape,p=1;t=1;s=1,1,1,6,6,0\nape,p=0;t=1;s=1,1,1,6,6,1\n"
    );
}

#[test]
fn single_point_grid_returns_that_point() {
    let dir = tempfile::tempdir().unwrap();
    let ws = degenerate_setup(dir.path(), r#"[{"kind":"cache_blend","r":[0.3]}]"#, 1.0);
    assert_eq!(tune(&ws, 1).unwrap().best, vec![StrategyConfig::CacheBlend { r: 0.3 }]);
}

#[test]
fn empty_split_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let ws = degenerate_setup(dir.path(), r#"[{"kind":"naive_reuse"}]"#, 1e-12);
    let err = tune(&ws, 1).unwrap_err();
    assert!(matches!(err, BenchError::Config(_)));
    assert_eq!(err.exit_code(), ExitCode::Config);
}
