use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mote_core::dataset::read_embeddings;
use mote_core::prototypes::{read_pool, PrototypeOrigin};
use serde_json::Value;

fn mote(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mote"))
        .args(args)
        .env_remove("MOTE_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn error_json(o: &Output) -> Value {
    let line = stderr(o).lines().last().unwrap_or_default().to_string();
    serde_json::from_str(&line).expect("error JSON on stderr")
}

/// 20-class easy dataset and a manifest splitting it into five tasks.
fn setup(dir: &Path) -> PathBuf {
    let data = dir.join("easy.mote");
    let o = mote(&[
        "synth", "--classes", "20", "--dim", "24", "--per-class", "20", "--rho", "10", "--sigma", "1",
        "--seed", "7", "-o", data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = dir.join("manifest.json");
    fs::write(
        &manifest,
        r#"{"name":"easy","base":4,"increment":4,"seed":1993,"datasets":["easy.mote"]}"#,
    )
    .unwrap();
    manifest
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_is_reproducible_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.mote");
    let b = dir.path().join("b.mote");
    for out in [&a, &b] {
        let o = mote(&[
            "synth", "--classes", "100", "--dim", "64", "--per-class", "50", "--rho", "10", "--sigma", "2",
            "--seed", "1993", "-o", path(out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let ds = read_embeddings(&a).unwrap();
    assert_eq!(ds.len(), 5000);
    assert_eq!(ds.dim(), 64);
    assert_eq!(ds.class_ids().len(), 100);
}

#[test]
fn synth_spec_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"n_classes":3,"dim":8,"samples_per_class":5,"cluster_radius":4.0,"noise_sigma":1.0,"task_drift":0.0,"seed":1}"#,
    )
    .unwrap();
    let out = dir.path().join("s.mote");
    let o = mote(&["synth", "--spec", path(&spec), "--classes", "6", "-o", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_embeddings(&out).unwrap().class_ids().len(), 6);
}

#[test]
fn zero_sigma_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.mote");
    let o = mote(&[
        "synth", "--classes", "4", "--dim", "8", "--per-class", "5", "--sigma", "0", "-o", path(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["code"], "invalid_config");
    assert!(!out.exists());
}

#[test]
fn missing_manifest_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = mote(&["run", path(&dir.path().join("nope.json")), "-o", path(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    let e = error_json(&o);
    assert_eq!(e["error"]["code"], "io");
    assert!(e["error"]["message"].as_str().unwrap().contains("nope.json"));
}

#[test]
fn bad_flag_value_is_a_usage_error() {
    let o = mote(&["run", "m.json", "--limit", "0", "-o", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["code"], "usage");
}

#[test]
fn five_seeds_give_five_files_and_an_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = setup(dir.path());
    let out = dir.path().join("out");
    let o = mote(&[
        "run", path(&manifest), "--seeds", "1991,1992,1993,1994,1995", "--epochs", "2", "-o", path(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for seed in 1991..=1995 {
        assert!(out.join(format!("metrics_{seed}.json")).exists());
        assert!(out.join(format!("stages_{seed}.csv")).exists());
        assert!(out.join(format!("pool_{seed}.motp")).exists());
    }
    let agg: Value = serde_json::from_slice(&fs::read(out.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["seeds"].as_array().unwrap().len(), 5);
    for key in ["final_avg", "af", "tia", "last_union", "last_task"] {
        assert!(agg[key]["mean"].is_f64(), "{key}");
        assert!(agg[key]["std"].is_f64(), "{key}");
    }

    // a report over the same directory, with a corrupt file mixed in
    fs::write(out.join("corrupt.json"), "{ not json").unwrap();
    let r = mote(&["report", path(&out)]);
    assert!(r.status.success(), "{}", stderr(&r));
    assert!(stderr(&r).contains("warning: skipping"));
    let table = String::from_utf8_lossy(&r.stdout);
    assert_eq!(table.lines().count(), 1 + 5 + 1);
    let mean_row = table.lines().last().unwrap();
    assert!(mean_row.starts_with("mean±std (5)"));
    assert!(mean_row.split_whitespace().any(|c| c.contains('±') && c.contains('.')));
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 5);
}

#[test]
fn manifest_seed_is_the_default() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = setup(dir.path());
    let out = dir.path().join("out");
    let o = mote(&["run", path(&manifest), "--epochs", "1", "-o", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("metrics_1993.json").exists());

    let r = mote(&["report", path(&out)]);
    assert!(r.status.success());
    assert_eq!(String::from_utf8_lossy(&r.stdout).lines().count(), 2);
}

fn strip(mut v: Value, keys: &[&str]) -> Value {
    for k in keys {
        v.as_object_mut().unwrap().remove(*k);
    }
    v.pointer_mut("/config").unwrap().as_object_mut().unwrap().remove("inference");
    v
}

#[test]
fn ablation_changes_only_inference_config_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = setup(dir.path());
    let mut files = Vec::new();
    for tag in ["1", "5"] {
        let out = dir.path().join(format!("abl{tag}"));
        let o = mote(&[
            "run", path(&manifest), "--seeds", "1991", "--ablation", tag, "--epochs", "2", "-o", path(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let v: Value = serde_json::from_slice(&fs::read(out.join("metrics_1991.json")).unwrap()).unwrap();
        files.push(v);
    }
    assert_ne!(files[0]["config"]["inference"], files[1]["config"]["inference"]);
    let metric_keys = [
        "matrix", "avg_curve", "weighted_curve", "af_curve", "tia_curve", "final_avg", "last_union",
        "last_task", "af",
    ];
    assert_eq!(strip(files[0].clone(), &metric_keys), strip(files[1].clone(), &metric_keys));
}

#[test]
fn limited_run_logs_and_stores_synthesized_stages() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = setup(dir.path());
    let out = dir.path().join("out");
    let o = mote(&[
        "run", path(&manifest), "--seeds", "1991", "--limit", "3", "--epochs", "2", "-o", path(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = stderr(&o);
    for stage in 1..=5 {
        let line = log
            .lines()
            .find(|l| l.contains(&format!("stage {stage}/5")))
            .unwrap_or_else(|| panic!("no log line for stage {stage}"));
        let expected = if stage <= 3 { "trained" } else { "synthesized" };
        assert!(line.contains(expected), "{line}");
    }

    let pool = read_pool(out.join("pool_1991.motp")).unwrap();
    let metrics: Value = serde_json::from_slice(&fs::read(out.join("metrics_1991.json")).unwrap()).unwrap();
    let stages = metrics["stages"].as_array().unwrap();
    for s in stages {
        let synthesized = s["origin"] == "synthesized";
        for c in s["classes"].as_array().unwrap() {
            let proto = pool.get(c.as_u64().unwrap() as u32).unwrap();
            assert_eq!(proto.origin() == PrototypeOrigin::Merged, synthesized);
        }
    }
    assert_eq!(pool.expert_ids().count(), 3);
}

#[test]
fn gamma_sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = setup(dir.path());
    let out = dir.path().join("sweep");
    let o = mote(&[
        "sweep", "gamma", "--values", "0.1,0.5,1,2,adaptive", path(&manifest), "--epochs", "1", "-o",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep_gamma.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[4].starts_with("adaptive,1993,"));
}

#[test]
fn limit_sweep_expands_ranges_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = setup(dir.path());
    let out = dir.path().join("sweep");
    let o = mote(&[
        "sweep", "limit", "--values", "1-2,unlimited", path(&manifest), "--seeds", "1,2", "--epochs", "1",
        "-o", path(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep_limit.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    // the mean column agrees within a value
    assert_eq!(rows[0][7], rows[1][7]);
    assert_eq!(rows[4][0], "unlimited");
}

#[test]
fn sweep_rejects_empty_values_and_unknown_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = setup(dir.path());
    let o = mote(&["sweep", "gamma", "--values", "", path(&manifest), "-o", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["code"], "invalid_config");

    let o = mote(&["sweep", "depth", "--values", "1", path(&manifest), "-o", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_without_metrics_fails() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("junk.json"), "[]").unwrap();
    let o = mote(&["report", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = setup(dir.path());
    let mut outputs = Vec::new();
    for threads in ["0", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let o = Command::new(env!("CARGO_BIN_EXE_mote"))
            .args(["run", path(&manifest), "--epochs", "1", "-o", path(&out)])
            .env("MOTE_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(fs::read(out.join("metrics_1993.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);

    let o = Command::new(env!("CARGO_BIN_EXE_mote"))
        .args(["run", path(&manifest), "-o", path(dir.path())])
        .env("MOTE_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
