use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cdt_core::pipeline::{AnalysisReport, RunConfig, ANALYSIS_DIR, ANALYSIS_FILE, REPORT_DIR, SUMMARY_FILE};
use cdt_core::trainer::EpochMetrics;
use serde_json::{json, Value};
use tempfile::TempDir;

fn tiny_config(n_genes: usize, epochs: usize) -> Value {
    json!({
        "seed": 1,
        "world": {"seed": 1, "n_genes": n_genes, "n_bins": 16, "embed_dim": 8, "hub_count": 2,
                  "targets_per_hub": 8, "module_size": 6, "module_upstream": 1, "n_perturbed": 10,
                  "n_holdout": 3, "n_snp_loci": 2, "cells_per_gene": 4, "cells_per_snp": 3, "n_ntc": 20},
        "model": {"n_genes": n_genes, "n_bins": 16, "dna_embed_dim": 8, "model_dim": 8, "heads": 2,
                  "ffn_dim": 16, "dropout_p": 0.1, "n_dna_layers": 1, "n_rna_layers": 1,
                  "vce_pool_heads": 2, "task_hidden_dim": 16},
        "train": {"max_epochs": epochs, "batch_size": 8, "seed": 1},
        "analysis": {"n_perm": 50, "top_n": 5, "attribution_cells": 4, "seed": 1}
    })
}

struct Run {
    _tmp: TempDir,
    dir: PathBuf,
    config: PathBuf,
}

fn setup(cfg: &Value) -> Run {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("run");
    fs::create_dir(&dir).unwrap();
    let config = tmp.path().join("config.json");
    fs::write(&config, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    Run { _tmp: tmp, dir, config }
}

fn cdt(stage: &str, config: &Path, out: &Path, envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cdt"));
    c.arg(stage).arg("--config").arg(config).arg("--out").arg(out);
    c.env_remove("CDT_THREADS");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn ok(stage: &str, run: &Run) {
    let o = cdt(stage, &run.config, &run.dir, &[]);
    assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
}

fn pipeline(run: &Run) {
    for s in ["simulate", "train", "analyze", "report"] {
        ok(s, run);
    }
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn missing_output_dir_exits_2() {
    let run = setup(&tiny_config(40, 1));
    let o = cdt("simulate", &run.config, &run.dir.join("absent"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
}

#[test]
fn invalid_config_exits_2() {
    let mut cfg = tiny_config(40, 1);
    cfg["analysis"]["graph_top_fraction"] = json!(1.5);
    let run = setup(&cfg);
    assert_eq!(cdt("simulate", &run.config, &run.dir, &[]).status.code(), Some(2));
    fs::write(&run.config, "{not json").unwrap();
    assert_eq!(cdt("simulate", &run.config, &run.dir, &[]).status.code(), Some(2));
}

#[test]
fn bad_thread_cap_exits_2() {
    let run = setup(&tiny_config(40, 1));
    let o = cdt("simulate", &run.config, &run.dir, &[("CDT_THREADS", "0")]);
    assert_eq!(o.status.code(), Some(2));
    let o = cdt("simulate", &run.config, &run.dir, &[("CDT_THREADS", "2")]);
    assert!(o.status.success());
}

#[test]
fn simulate_twice_is_byte_identical() {
    let a = setup(&tiny_config(40, 1));
    let b = setup(&tiny_config(40, 1));
    ok("simulate", &a);
    ok("simulate", &b);
    let (fa, fb) = (files(&a.dir), files(&b.dir));
    assert!(fa.len() >= 9);
    assert_eq!(fa, fb);
}

#[test]
fn train_without_world_exits_5() {
    let run = setup(&tiny_config(40, 1));
    let o = cdt("train", &run.config, &run.dir, &[]);
    assert_eq!(o.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&o.stderr).contains("world.json"));
}

#[test]
fn zero_epoch_run_writes_initial_checkpoint() {
    let run = setup(&tiny_config(40, 0));
    ok("simulate", &run);
    ok("train", &run);
    assert!(run.dir.join("train/best.ckpt").is_file());
    assert_eq!(fs::read_to_string(run.dir.join("train/metrics.jsonl")).unwrap(), "");
}

#[test]
fn metrics_log_is_complete_jsonl() {
    let run = setup(&tiny_config(40, 3));
    ok("simulate", &run);
    ok("train", &run);
    let text = fs::read_to_string(run.dir.join("train/metrics.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    for (i, l) in lines.iter().enumerate() {
        let v: Value = serde_json::from_str(l).unwrap();
        for key in ["epoch", "lr", "train_loss", "val_loss", "train_r", "val_r"] {
            assert!(v.get(key).is_some(), "line {i} lacks {key}");
        }
        let m: EpochMetrics = serde_json::from_value(v).unwrap();
        assert_eq!(m.epoch, i + 1);
        assert!(m.train_loss.is_finite());
    }
}

#[test]
fn mismatched_gene_count_exits_4() {
    let run = setup(&tiny_config(40, 1));
    ok("simulate", &run);
    ok("train", &run);
    fs::write(&run.config, serde_json::to_string(&tiny_config(44, 1)).unwrap()).unwrap();
    ok("simulate", &run);
    let o = cdt("analyze", &run.config, &run.dir, &[]);
    assert_eq!(o.status.code(), Some(4));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("44") && err.contains("40"), "{err}");
}

#[test]
fn report_on_empty_dir_exits_5_naming_files() {
    let run = setup(&tiny_config(40, 1));
    let o = cdt("report", &run.config, &run.dir, &[]);
    assert_eq!(o.status.code(), Some(5));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(ANALYSIS_FILE) && err.contains("manifest.json"), "{err}");
}

#[test]
fn full_pipeline_is_deterministic_and_reports_are_consistent() {
    let a = setup(&tiny_config(40, 2));
    let b = setup(&tiny_config(40, 2));
    pipeline(&a);
    pipeline(&b);
    let (fa, fb) = (files(&a.dir), files(&b.dir));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(v == &fb[k], "{} differs", k.display());
    }

    let report: AnalysisReport =
        serde_json::from_slice(&fs::read(a.dir.join(ANALYSIS_DIR).join(ANALYSIS_FILE)).unwrap()).unwrap();
    let summary = fs::read_to_string(a.dir.join(REPORT_DIR).join(SUMMARY_FILE)).unwrap();
    for id in 1..=13 {
        assert!(summary.lines().any(|l| l.starts_with(&format!("| {id} | "))), "criterion {id} missing");
    }
    let hub = report.network.hub_overlap.as_ref().unwrap();
    assert!(summary.contains(&format!("fold {}, p {}", hub.fold, hub.p_value)));
    let r = report.attribution.r_vs_grn.unwrap();
    assert!(summary.contains(&format!("r {r},")));

    let m: Value = serde_json::from_slice(&fs::read(a.dir.join("analysis/manifest.json")).unwrap()).unwrap();
    let listed: Vec<String> = m["files"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    let present: Vec<String> = fs::read_dir(a.dir.join(ANALYSIS_DIR))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    assert_eq!(listed.len(), present.len());
    assert!(present.iter().all(|p| listed.contains(p)));
    let cfg: RunConfig = serde_json::from_value(m["config"].clone()).unwrap();
    assert_eq!(cfg.out_dir, None);
}

#[test]
fn seed_flag_overrides_every_seed() {
    let run = setup(&tiny_config(40, 0));
    let mut c = Command::new(env!("CARGO_BIN_EXE_cdt"));
    let o = c
        .args(["simulate", "--seed", "5", "--config"])
        .arg(&run.config)
        .arg("--out")
        .arg(&run.dir)
        .output()
        .unwrap();
    assert!(o.status.success());
    let w: Value = serde_json::from_slice(&fs::read(run.dir.join("world/world.json")).unwrap()).unwrap();
    assert_eq!(w["config"]["seed"], json!(5));
}
