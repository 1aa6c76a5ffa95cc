use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "seeds": [5],
  "dataset": { "counts": { "source_pool": 800, "alpha": 300, "validation": 100, "finetune": 200, "test": 300 } },
  "split": { "per_expert_budget": 200 },
  "arch": { "hidden": [8] },
  "expert_training": { "epochs": 3 },
  "finetune": { "epochs": 2 },
  "alpha_learning": { "optim": { "steps": 20 } },
  "proxy_size": 50
}"#;

fn glue(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glue"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn glue")
}

fn ok_json(out: &Path, args: &[&str]) -> Value {
    let o = glue(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    std::fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn stepwise_pipeline_produces_a_finetuned_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = small_config(dir.path());

    ok_json(&out, &["synth", "--config", &cfg]);
    // Later commands pick the written config up from the output directory.
    ok_json(&out, &["split"]);
    ok_json(&out, &["train-experts"]);
    for i in 0..4 {
        assert!(out.join(format!("experts/expert_{i}.glue")).exists());
    }
    let learned = ok_json(&out, &["learn-alpha", "--method", "glue"]);
    let alpha: Vec<f64> = serde_json::from_value(learned["alpha"].clone()).unwrap();
    assert_eq!(alpha.len(), 4);
    assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(out.join("priors/glue.glue").exists());

    ok_json(&out, &["finetune", "--method", "glue"]);
    let ckpt = out.join("finetuned/glue.glue");
    assert!(ckpt.exists());
    let eval = ok_json(&out, &["evaluate", "--checkpoint", ckpt.to_str().unwrap()]);
    let acc = eval["metrics"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let written: Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(written["alpha_learning"]["optim"]["steps"], 20);
}

#[test]
fn learn_alpha_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut alphas = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        ok_json(&out, &["train-experts", "--config", &cfg]);
        let v = ok_json(&out, &["learn-alpha", "--method", "glue"]);
        alphas.push(v["alpha"].clone());
    }
    assert_eq!(alphas[0], alphas[1]);
}

#[test]
fn analyze_bias_reports_passing_checks() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok_json(dir.path(), &["analyze", "bias"]);
    let checks = v["checks"].as_array().unwrap();
    assert!(!checks.is_empty());
    assert!(checks.iter().all(|c| c["pass"] == true), "{v:#}");
    assert!(dir.path().join("analysis/bias.json").exists());
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = glue(dir.path(), &["synth", "--mu", "-1"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{ "split": { "k": 0 } }"#).unwrap();
    let o = glue(dir.path(), &["synth", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = glue(dir.path(), &["learn-alpha", "--method", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    ok_json(&out, &["synth", "--config", &cfg]);
    let o = glue(&out, &["learn-alpha", "--method", "glue"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    let junk = dir.path().join("junk.glue");
    std::fs::write(&junk, b"GLUEPK1\0\xff\xff\xff\xff{").unwrap();
    let o = glue(&out, &["evaluate", "--checkpoint", junk.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
