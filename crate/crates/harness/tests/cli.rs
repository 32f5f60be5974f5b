use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rome_core::data::DatasetSpec;
use rome_core::space::{ArchParams, Genotype};
use rome_harness::artifacts::RunReport;
use rome_harness::config::ExperimentConfig;

fn rome(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rome")).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = ExperimentConfig {
        epochs: 2,
        dataset: DatasetSpec { samples: 300, ..DatasetSpec::default() },
        ..ExperimentConfig::default()
    };
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn search(config: &Path, out: &Path) {
    let o = rome(&["--deterministic", "search", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn search_writes_a_complete_reproducible_run() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    search(&config, &a);
    search(&config, &b);
    for f in [
        "config.json",
        "meta.json",
        "genotype.json",
        "genotype.normal.dot",
        "genotype.reduction.dot",
        "arch_params.json",
        "trace.csv",
        "report.json",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let trace = fs::read_to_string(a.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);
    let params: ArchParams = serde_json::from_str(&fs::read_to_string(a.join("arch_params.json")).unwrap()).unwrap();
    params.validate().unwrap();
}

#[test]
fn derive_reproduces_the_genotype_and_eval_extends_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    search(&small_config(tmp.path()), &run);
    let before = fs::read(run.join("genotype.json")).unwrap();
    fs::remove_file(run.join("genotype.json")).unwrap();

    let o = rome(&["derive", run.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read(run.join("genotype.json")).unwrap(), before);
    let o = rome(&["derive", run.to_str().unwrap()]);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "genotype unchanged");

    let o = rome(&["eval", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: RunReport = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    let eval = report.eval.expect("eval results");
    assert!((0.0..=1.0).contains(&eval.test_accuracy));
}

#[test]
fn export_dot_labels_every_edge() {
    let tmp = tempfile::tempdir().unwrap();
    let text = r#"{
      "version": "rome_v2",
      "cells": [
        {"type": "normal", "nodes": [[[0, "skip"], [1, "lin_small"]], [[1, "avg"], [2, "zero"]]]},
        {"type": "reduction", "nodes": [[[0, "lin_large"], [1, "skip"]], [[0, "avg"], [2, "skip"]]]}
      ]
    }"#;
    let g: Genotype = serde_json::from_str(text).unwrap();
    let path = tmp.path().join("g.json");
    fs::write(&path, serde_json::to_string(&g).unwrap()).unwrap();
    let out = tmp.path().join("dot");
    let o = rome(&["export-dot", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for kind in ["normal", "reduction"] {
        let dot = fs::read_to_string(out.join(format!("g.{kind}.dot"))).unwrap();
        assert!(dot.starts_with(&format!("digraph {kind} {{")));
        assert_eq!(dot.matches("[label=").count(), 4);
    }

    let bad = text.replace("[[1, \"avg\"], [2, \"zero\"]]", "[[1, \"avg\"], [3, \"zero\"]]");
    fs::write(&path, bad).unwrap();
    let o = rome(&["export-dot", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("config.json");
    fs::write(&path, r#"{"epochs": 1, "learning_rate": 0.1}"#).unwrap();
    let o = rome(&["search", path.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn verify_gumbel_passes_and_usage_errors_exit_2() {
    let o = rome(&["--seed", "3", "verify-gumbel", "--n", "4", "--draws", "200000", "--vectors", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(String::from_utf8_lossy(&o.stdout).matches(" ok").count(), 2);
    assert_eq!(rome(&["verify-gumbel", "--n", "12"]).status.code(), Some(1));
    assert_eq!(rome(&["frobnicate"]).status.code(), Some(2));
}
