use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn hbmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hbmc"))
        .args(args)
        .env("HBMC_JOBS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = hbmc(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{
  "schema_version": 1,
  "experiment": "tiny",
  "models": ["normal-M1", "normal-M2"],
  "summary": {"level1_equivariant": 0, "level2_equivariant": 0, "hidden": 8, "pooled_dim": 4,
              "equivariant_dim": 4, "summary_dim": 4, "head_hidden": 8},
  "training": {"steps": 12, "batch_size": 4, "checkpoint_every": 5,
               "groups": {"kind": "fixed", "value": 4}, "observations": {"kind": "fixed", "value": 3}},
  "validation": {"datasets": 6, "repetitions": 2, "groups": 4, "observations": 3, "bins": 5,
                 "holdout_per_model": 3, "grid": [{"groups": 2, "observations": 2}, {"groups": 4, "observations": 5}]}
}"#;

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    fs::write(&path, TINY).unwrap();
    p(&path).to_owned()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn simulate_zero_count_gives_empty_manifest() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("sim");
    ok(&[
        "simulate",
        "--family",
        "sdt",
        "--count",
        "0",
        "--groups",
        "3",
        "--observations",
        "4",
        "--out",
        p(&out),
    ]);
    assert_eq!(json(&out.join("index.json"))["entries"], Value::Array(vec![]));
    assert!(out.join("config.json").exists());
}

#[test]
fn simulate_is_byte_identical_for_equal_seeds() {
    let t = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = t.path().join(name);
        let args = [
            "simulate",
            "--family",
            "mpt",
            "--count",
            "3",
            "--groups",
            "5",
            "--observations",
            "6",
            "--seed",
            seed,
            "--out",
            p(&out),
        ];
        ok(&args);
        files(&out)
    };
    let (a, b, c) = (run("a", "4"), run("b", "4"), run("c", "5"));
    assert_eq!(a, b);
    assert_eq!(a.len(), 5);
    assert_ne!(a, c);
}

#[test]
fn eam_dataset_has_the_expected_shape() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("eam");
    ok(&[
        "simulate",
        "--family",
        "eam-full-levy",
        "--count",
        "1",
        "--groups",
        "40",
        "--observations",
        "900",
        "--out",
        p(&out),
    ]);
    let entry = &json(&out.join("index.json"))["entries"][0];
    assert_eq!(entry["groups"], 40);
    assert_eq!(entry["rows"], 36_000);
    assert_eq!(entry["family"], "eam-full-levy");
}

#[test]
fn configuration_errors_exit_with_two() {
    let t = tempfile::tempdir().unwrap();
    let bad = t.path().join("bad.json");
    fs::write(&bad, r#"{"schema_version": 1, "bogus": true}"#).unwrap();
    let o = hbmc(&[
        "--config",
        p(&bad),
        "simulate",
        "--family",
        "sdt",
        "--count",
        "1",
        "--groups",
        "1",
        "--observations",
        "1",
        "--out",
        p(t.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = hbmc(&[
        "simulate",
        "--family",
        "nope",
        "--count",
        "1",
        "--groups",
        "1",
        "--observations",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let missing = t.path().join("missing.json");
    let o = hbmc(&[
        "compare",
        "--checkpoint",
        p(t.path()),
        "--data",
        p(&missing),
        "--out",
        p(&t.path().join("c")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulator_failure_exits_with_three() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("eam.json");
    fs::write(&cfg, r#"{"training": {"eam": {"dt": 0.001, "t_max": 0.01}}}"#).unwrap();
    let o = hbmc(&[
        "--config",
        p(&cfg),
        "simulate",
        "--family",
        "eam-basic-dm",
        "--count",
        "1",
        "--groups",
        "1",
        "--observations",
        "2",
        "--out",
        p(&t.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn quadrature_accuracy_failure_exits_with_four() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(&[
        "simulate",
        "--family",
        "normal-M2",
        "--count",
        "1",
        "--groups",
        "5",
        "--observations",
        "5",
        "--out",
        p(&data),
    ]);
    let cfg = t.path().join("strict.json");
    fs::write(&cfg, r#"{"quadrature": {"doubling_tolerance": 1e-300}}"#).unwrap();
    let o = hbmc(&[
        "--config",
        p(&cfg),
        "oracle",
        "--data",
        p(&data),
        "--out",
        p(&t.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_validate_compare_oracle_perturb_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny_config(t.path());
    let run = t.path().join("train");
    let stdout = ok(&["--config", &cfg, "--seed", "3", "train", "--out", p(&run)]);
    assert!(stdout.contains("trained 12 steps"));
    let echoed = json(&run.join("config.json"));
    assert_eq!(echoed["seed"], 3);
    assert_eq!(echoed["training"]["seed"], 3);
    assert!(run.join("checkpoints/checkpoint").is_dir());
    let ckpt = run.join("checkpoints/final");
    let scaling = &json(&ckpt.join("manifest.json"))["metadata"]["summary"]["input_scaling"];
    assert_eq!(scaling["scale"].as_array().unwrap().len(), 1);
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,lr,train_loss,val_loss"));
    assert_eq!(trace.lines().count(), 13);
    assert_eq!(json(&run.join("train.json"))["schema_version"], 1);

    // Validation: one directory per grid cell, aggregate with bands.
    let val = t.path().join("val");
    ok(&[
        "--config",
        &cfg,
        "validate",
        "--checkpoint",
        p(&ckpt),
        "--grid",
        "--out",
        p(&val),
    ]);
    for cell in ["cell-M2-N2", "cell-M4-N5"] {
        let d = val.join(cell);
        for f in [
            "report-00.json",
            "report-01.json",
            "calibration-01.csv",
            "confusion-00.csv",
            "aggregate.json",
        ] {
            assert!(d.join(f).exists(), "{cell}/{f}");
        }
        assert_eq!(json(&d.join("aggregate.json"))["repetitions"], 2);
    }
    let single = t.path().join("single");
    ok(&[
        "--config",
        &cfg,
        "validate",
        "--checkpoint",
        p(&ckpt),
        "--datasets",
        "1",
        "--repetitions",
        "1",
        "--out",
        p(&single),
    ]);
    assert_eq!(json(&single.join("report-00.json"))["count"], 1);

    // Inputs stay untouched while compare, oracle and perturb read them.
    let data = t.path().join("data");
    ok(&[
        "simulate",
        "--family",
        "normal-M1",
        "--count",
        "4",
        "--groups",
        "4",
        "--observations",
        "3",
        "--out",
        p(&data),
    ]);
    let before = files(&data);
    let cmp = t.path().join("cmp");
    ok(&[
        "compare",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--reference",
        "normal-M2",
        "--out",
        p(&cmp),
    ]);
    let table = fs::read_to_string(cmp.join("compare.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(table.starts_with(
        "dataset,pmp_normal-M1,pmp_normal-M2,bf_normal-M1_vs_normal-M2,bf_normal-M2_vs_normal-M2,saturated"
    ));
    let report = json(&cmp.join("compare.json"));
    assert_eq!(report["rows"][0]["bf"][1], 1.0);

    let orc = t.path().join("orc");
    ok(&["oracle", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&orc)]);
    let scatter = fs::read_to_string(orc.join("scatter.csv")).unwrap();
    assert_eq!(scatter.lines().next().unwrap().split(',').count(), 7);
    assert_eq!(json(&orc.join("oracle.json"))["rows"].as_array().unwrap().len(), 4);

    let pert = t.path().join("pert");
    let one = data.join("data-000000.json");
    ok(&[
        "perturb",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&one),
        "--mode",
        "mask-sweep",
        "--repetitions",
        "5",
        "--out",
        p(&pert),
    ]);
    let rob = json(&pert.join("robustness.json"));
    assert_eq!(rob["rows"].as_array().unwrap().len(), 9);
    assert_eq!(rob["rows"][0]["mean"], rob["unperturbed"]);
    assert_eq!(rob["unperturbed"], report["rows"][0]["pmp"]);
    assert_eq!(files(&data), before);

    // Fine-tuning resumes from the checkpoint; mismatched candidates are refused.
    let fine = t.path().join("fine");
    ok(&["--config", &cfg, "train", "--pretrained", p(&ckpt), "--out", p(&fine)]);
    assert!(fine.join("checkpoints/final").is_dir());
    let other = t.path().join("other.json");
    fs::write(
        &other,
        TINY.replace(r#"["normal-M1", "normal-M2"]"#, r#"["normal-M2", "normal-M1"]"#),
    )
    .unwrap();
    let o = hbmc(&[
        "--config",
        p(&other),
        "train",
        "--pretrained",
        p(&ckpt),
        "--out",
        p(&t.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn offline_training_from_a_simulated_store() {
    let t = tempfile::tempdir().unwrap();
    let cfg_path = t.path().join("offline.json");
    let cfg = TINY.replace(r#""steps": 12"#, r#""regime": "offline", "epochs": 2"#);
    fs::write(&cfg_path, cfg).unwrap();
    // One store per model, labelled by model index, pooled at training time.
    let m1 = t.path().join("m1");
    let m2 = t.path().join("m2");
    ok(&[
        "simulate",
        "--family",
        "normal-M1",
        "--count",
        "3",
        "--groups",
        "4",
        "--observations",
        "3",
        "--model-index",
        "0",
        "--out",
        p(&m1),
    ]);
    ok(&[
        "simulate",
        "--family",
        "normal-M2",
        "--count",
        "3",
        "--groups",
        "4",
        "--observations",
        "3",
        "--model-index",
        "1",
        "--out",
        p(&m2),
    ]);
    let run = t.path().join("run");
    let out = ok(&[
        "--config",
        p(&cfg_path),
        "train",
        "--store",
        p(&m1),
        p(&m2),
        "--out",
        p(&run),
    ]);
    // 6 datasets, batch 4, two epochs.
    assert!(out.contains("trained 4 steps"), "{out}");
    let o = hbmc(&["--config", p(&cfg_path), "train", "--out", p(&t.path().join("nostore"))]);
    assert_eq!(o.status.code(), Some(2));
}
