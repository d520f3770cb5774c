use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use learnreg::dataset::DataSet;
use learnreg::inner::Regularizer;
use learnreg::mlp::{Activation, Architecture, Network};
use serde_json::Value;
use tempfile::TempDir;

fn learnreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_learnreg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = learnreg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn write_config(dir: &TempDir, name: &str, cfg: Value) -> String {
    let p = path(dir, name);
    fs::write(&p, cfg.to_string()).unwrap();
    p
}

#[test]
fn gen_data_round_trips_and_is_deterministic() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for dir in [&a, &b] {
        ok(&[
            "gen-data",
            "--preset",
            "experiment1",
            "--seed",
            "3",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
    }
    let bytes = fs::read(a.path().join("dataset.json")).unwrap();
    assert_eq!(bytes, fs::read(b.path().join("dataset.json")).unwrap());
    let ds = DataSet::load(&a.path().join("dataset.json")).unwrap();
    assert_eq!(ds.len(), 5);
    assert_eq!(DataSet::from_json(&ds.to_json().unwrap()).unwrap(), ds);

    let c = TempDir::new().unwrap();
    ok(&[
        "gen-data",
        "--preset",
        "experiment1",
        "--seed",
        "4",
        "--out",
        c.path().to_str().unwrap(),
    ]);
    assert_ne!(bytes, fs::read(c.path().join("dataset.json")).unwrap());
}

#[test]
fn missing_output_directory() {
    let dir = TempDir::new().unwrap();
    let missing = path(&dir, "nope/deeper");
    let out = learnreg(&["gen-data", "--out", &missing]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&missing));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(learnreg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(learnreg(&["train"]).status.code(), Some(1));
    let dir = TempDir::new().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(
        learnreg(&["gen-data", "--preset", "experiment9", "--out", d])
            .status
            .code(),
        Some(1)
    );
    let bad = write_config(&dir, "bad.json", serde_json::json!({"data": {"k": 0}}));
    assert_eq!(
        learnreg(&["gen-data", "--config", &bad, "--out", d])
            .status
            .code(),
        Some(1)
    );
    assert!(learnreg(&["--help"]).status.success());
}

#[test]
fn experiment1_training() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().to_str().unwrap();
    ok(&[
        "train",
        "--preset",
        "experiment1",
        "--workers",
        "2",
        "--out",
        d,
    ]);

    let report = json(&dir.path().join("report.json"));
    let misfit: Vec<f64> = serde_json::from_value(report["misfit_percent"].clone()).unwrap();
    assert!(misfit.len() <= 41);
    assert!((30.0..=80.0).contains(&misfit[0]), "{misfit:?}");
    assert!(*misfit.last().unwrap() < 1.0, "{misfit:?}");
    for key in [
        "grad_norm",
        "objective",
        "step_size",
        "inner_iterations",
        "epsilon_used",
    ] {
        assert_eq!(report[key].as_array().unwrap().len(), misfit.len(), "{key}");
    }

    let csv = fs::read_to_string(dir.path().join("misfit.csv")).unwrap();
    assert!(csv.starts_with("step,misfit_percent\n"));
    assert!(!csv.contains('\r'));
    assert_eq!(csv.lines().count(), misfit.len() + 1);

    let reg = Regularizer::load(&dir.path().join("weights.json")).unwrap();
    assert_eq!(reg.net.arch.widths(), &[1, 8, 8, 1]);

    // the learned graph follows (3/2)u² up to a constant over the sampled controls
    let ds = DataSet::load(&dir.path().join("dataset.json")).unwrap();
    let us: Vec<f64> = ds.pairs.iter().map(|p| p.u_hat[0]).collect();
    let lo = us.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = us.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let grid = format!("{lo}:{hi}:41");
    ok(&[
        "eval",
        "--weights",
        &path(&dir, "weights.json"),
        "--grid",
        &grid,
        "--reference",
        "--out",
        d,
    ]);
    let graph = fs::read_to_string(dir.path().join("graph.csv")).unwrap();
    let diffs: Vec<f64> = graph
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            v[1] - v[2]
        })
        .collect();
    let spread = diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - diffs.iter().copied().fold(f64::INFINITY, f64::min);
    let variation = 1.5 * (hi * hi - lo * lo);
    assert!(
        spread / 2.0 <= 0.1 * variation,
        "deviation {} vs variation {variation}",
        spread / 2.0
    );
}

#[test]
fn zero_steps_reports_the_initial_misfit() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().to_str().unwrap();
    let cfg = write_config(
        &dir,
        "cfg.json",
        serde_json::json!({"data": {"k": 2, "cells": 20}, "train": {"max_steps": 0}}),
    );
    ok(&["train", "--config", &cfg, "--out", d]);
    let report = json(&dir.path().join("report.json"));
    assert_eq!(report["misfit_percent"].as_array().unwrap().len(), 1);
    assert_eq!(report["stop_reason"], "max_steps");
}

#[test]
fn train_from_given_data_and_weights() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().to_str().unwrap();
    let cfg = write_config(
        &dir,
        "cfg.json",
        serde_json::json!({"data": {"k": 2, "cells": 20, "f": 20.0}, "train": {"max_steps": 3}}),
    );
    ok(&["gen-data", "--config", &cfg, "--out", d]);
    let init = path(&dir, "init.json");
    Regularizer::quadratic(1, 1.5)
        .save(Path::new(&init))
        .unwrap();
    ok(&[
        "train",
        "--config",
        &cfg,
        "--dataset",
        &path(&dir, "dataset.json"),
        "--init",
        &init,
        "--out",
        d,
    ]);
    // the generating regularizer already fits the data
    let report = json(&dir.path().join("report.json"));
    assert!(report["misfit_percent"][0].as_f64().unwrap() < 1e-6);
    let reg = Regularizer::load(&dir.path().join("weights.json")).unwrap();
    assert_eq!(reg.net.arch.widths(), &[1, 1, 1]);
}

#[test]
fn solve_inner_cases() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().to_str().unwrap();
    let cfg = write_config(
        &dir,
        "cfg.json",
        serde_json::json!({"data": {"k": 3, "cells": 40, "f": 20.0}, "noise": {"sigma": 0.0}}),
    );
    ok(&["gen-data", "--config", &cfg, "--out", d]);
    let ds_path = path(&dir, "dataset.json");

    // zero weights and a reachable target
    let zero = path(&dir, "zero.json");
    let arch = Architecture::new(vec![1, 8, 8, 1], Activation::Tanh).unwrap();
    Network::zeros(arch).save(Path::new(&zero)).unwrap();
    ok(&[
        "solve-inner",
        "--config",
        &cfg,
        "--dataset",
        &ds_path,
        "--weights",
        &zero,
        "--index",
        "1",
        "--out",
        d,
    ]);
    let sol = json(&dir.path().join("solution.json"));
    assert!(sol["grad_norm"].as_f64().unwrap() <= 1e-10);
    assert!(sol["iterations"].as_u64().unwrap() > 0);

    // restarting from the returned control takes no steps
    let first = path(&dir, "first.json");
    fs::rename(dir.path().join("solution.json"), &first).unwrap();
    ok(&[
        "solve-inner",
        "--config",
        &cfg,
        "--dataset",
        &ds_path,
        "--weights",
        &zero,
        "--index",
        "1",
        "--init",
        &first,
        "--out",
        d,
    ]);
    let again = json(&dir.path().join("solution.json"));
    assert_eq!(again["iterations"], 0);
    assert_eq!(again["u"], json(Path::new(&first))["u"]);

    // the generating quadratic regularizer recovers û_k
    let l2 = write_config(
        &dir,
        "l2.json",
        serde_json::json!({"data": {"k": 3, "cells": 40, "f": 20.0}}),
    );
    ok(&["gen-data", "--config", &l2, "--out", d]);
    let ds = DataSet::load(Path::new(&ds_path)).unwrap();
    let quad = path(&dir, "quad.json");
    Regularizer::quadratic(1, 1.5)
        .save(Path::new(&quad))
        .unwrap();
    for k in 0..3 {
        let idx = k.to_string();
        ok(&[
            "solve-inner",
            "--config",
            &l2,
            "--dataset",
            &ds_path,
            "--weights",
            &quad,
            "--index",
            &idx,
            "--out",
            d,
        ]);
        let u = json(&dir.path().join("solution.json"))["u"][0]
            .as_f64()
            .unwrap();
        assert!(
            (u - ds.pairs[k].u_hat[0]).abs() <= 1e-8,
            "{u} vs {}",
            ds.pairs[k].u_hat[0]
        );
    }
}

#[test]
fn solve_inner_exit_codes() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().to_str().unwrap();
    let cfg = write_config(
        &dir,
        "cfg.json",
        serde_json::json!({"data": {"k": 2, "cells": 40, "f": 20.0}, "train": {"inner": {"max_iter": 1}}}),
    );
    ok(&["gen-data", "--config", &cfg, "--out", d]);
    let zero = path(&dir, "zero.json");
    Network::zeros(Architecture::new(vec![1, 2, 1], Activation::Tanh).unwrap())
        .save(Path::new(&zero))
        .unwrap();
    let ds = path(&dir, "dataset.json");
    let out = learnreg(&[
        "solve-inner",
        "--config",
        &cfg,
        "--dataset",
        &ds,
        "--weights",
        &zero,
        "--out",
        d,
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.path().join("solution.json").exists());

    let out = learnreg(&[
        "solve-inner",
        "--dataset",
        &ds,
        "--weights",
        &path(&dir, "missing.json"),
        "--out",
        d,
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = learnreg(&[
        "solve-inner",
        "--dataset",
        &ds,
        "--weights",
        &zero,
        "--index",
        "9",
        "--out",
        d,
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_cases() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().to_str().unwrap();
    let arch = Architecture::new(vec![1, 3, 1], Activation::Tanh).unwrap();
    let mut net = Network::zeros(arch);
    net.weights.layers[1].b[0] = 0.7;
    let w = path(&dir, "w.json");
    net.save(Path::new(&w)).unwrap();

    ok(&["eval", "--weights", &w, "--grid", "0:2:5", "--out", d]);
    let graph = fs::read_to_string(dir.path().join("graph.csv")).unwrap();
    let lines: Vec<&str> = graph.lines().collect();
    assert_eq!(lines[0], "u,r");
    assert_eq!(lines.len(), 6);
    assert!(lines[1..].iter().all(|l| l.ends_with(",0.7")));

    ok(&[
        "eval",
        "--weights",
        &w,
        "--grid",
        "1.5:1.5:1",
        "--reference",
        "--out",
        d,
    ]);
    let graph = fs::read_to_string(dir.path().join("graph.csv")).unwrap();
    assert_eq!(graph, "u,r,reference\n1.5,0.7,3.375\n");

    let wide = path(&dir, "wide.json");
    Network::zeros(Architecture::new(vec![2, 3, 1], Activation::Tanh).unwrap())
        .save(Path::new(&wide))
        .unwrap();
    assert_eq!(
        learnreg(&["eval", "--weights", &wide, "--out", d])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        learnreg(&["eval", "--weights", &w, "--grid", "1:0:3", "--out", d])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn pipeline_is_reproducible() {
    let run = || {
        let dir = TempDir::new().unwrap();
        let d = dir.path().to_str().unwrap().to_string();
        let cfg = write_config(
            &dir,
            "cfg.json",
            serde_json::json!({"data": {"k": 3, "f": 20.0}, "train": {"max_steps": 5}}),
        );
        ok(&["gen-data", "--config", &cfg, "--seed", "11", "--out", &d]);
        ok(&[
            "train",
            "--config",
            &cfg,
            "--seed",
            "11",
            "--dataset",
            &path(&dir, "dataset.json"),
            "--out",
            &d,
        ]);
        ok(&[
            "eval",
            "--weights",
            &path(&dir, "weights.json"),
            "--out",
            &d,
        ]);
        (
            fs::read(dir.path().join("misfit.csv")).unwrap(),
            fs::read(dir.path().join("graph.csv")).unwrap(),
            fs::read(dir.path().join("weights.json")).unwrap(),
        )
    };
    assert_eq!(run(), run());
}
