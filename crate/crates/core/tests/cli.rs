use std::path::Path;
use std::process::{Command, Output};

use aidmae::data::store::Manifest;

fn aidmae(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aidmae"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("AIDMAE_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const CONFIG: &str = r#"{
  "synth": {"num_samples": 240, "num_features": 6, "num_factors": 2},
  "model": {"d_embed": 8, "enc_depth": 1, "enc_heads": 2, "dec_embed": 8, "dec_depth": 1, "dec_heads": 2, "head_hidden": 4},
  "schedule": {"max_epochs": 2, "warmup_epochs": 1},
  "finetune": {"max_epochs": 2},
  "eval": {"probe": {"seeds": [1, 2, 3]}}
}"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), CONFIG).unwrap();
    dir
}

fn hash(dir: &Path) -> String {
    Manifest::load(dir).unwrap().outputs["dataset.bin"].clone()
}

#[test]
fn synth_is_deterministic_per_seed() {
    let t = setup();
    let d = t.path();
    for (out, seed) in [("a", "7"), ("b", "7"), ("c", "8")] {
        let o = aidmae(&["synth", "--config", "c.json", "--seed", seed, "--output-dir", out], d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(hash(&d.join("a")), hash(&d.join("b")));
    assert_ne!(hash(&d.join("a")), hash(&d.join("c")));
}

#[test]
fn pretrain_without_preprocess_names_missing_manifest() {
    let t = setup();
    let o = aidmae(&["pretrain", "--config", "c.json", "--data", "nowhere"], t.path());
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("manifest") && err.contains("nowhere"), "{err}");
}

#[test]
fn usage_and_config_errors_exit_1() {
    let t = setup();
    assert_eq!(code(&aidmae(&["launch"], t.path())), 1);
    assert_eq!(code(&aidmae(&["probe", "--frobnicate"], t.path())), 1);
    std::fs::write(t.path().join("bad.json"), r#"{"model": {"width": 3}}"#).unwrap();
    assert_eq!(code(&aidmae(&["synth", "--config", "bad.json"], t.path())), 1);
    for sub in ["synth", "preprocess", "pretrain", "finetune", "probe", "reconstruct", "sweep", "embed", "ablate"] {
        let o = aidmae(&[sub, "--help"], t.path());
        assert_eq!(code(&o), 0);
        assert!(String::from_utf8_lossy(&o.stdout).contains("--config"));
    }
}

#[test]
fn full_pipeline_on_synthetic_data() {
    let t = setup();
    let d = t.path();
    let run = |args: &[&str]| {
        let o = aidmae(args, d);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    run(&["synth", "--config", "c.json", "--output-dir", "data"]);
    run(&["pretrain", "--config", "c.json", "--data", "data", "--output-dir", "pre"]);
    let m = Manifest::load(&d.join("pre")).unwrap();
    assert_eq!(m.inputs["dataset.bin"], hash(&d.join("data")));
    assert_eq!(m.details["epochs"], 2);

    run(&["pretrain", "--config", "c.json", "--data", "data", "--output-dir", "pre", "--resume", "--epochs", "3"]);
    let log = std::fs::read_to_string(d.join("pre/train_log.csv")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains(",train,")).count(), 3);

    let inputs = ["--config", "c.json", "--data", "data", "--checkpoint", "pre"];
    let with = |cmd: &'static str, extra: &[&'static str]| {
        let mut a = vec![cmd];
        a.extend(inputs);
        a.extend(extra);
        a.extend(["--output-dir", cmd]);
        run(&a);
    };
    with("probe", &["--fractions", "1,5,10,50,100"]);
    let probe = std::fs::read_to_string(d.join("probe/probe.csv")).unwrap();
    assert_eq!(probe.lines().count(), 1 + 5 * 3);

    with("finetune", &[]);
    with("reconstruct", &[]);
    with("sweep", &["--ratios", "0,0.3", "--panels", "panel0"]);
    let sweep = std::fs::read_to_string(d.join("sweep/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 4);
    with("embed", &[]);
    let emb = std::fs::read_to_string(d.join("embed/embeddings.csv")).unwrap();
    assert_eq!(emb.lines().next().unwrap().split(',').count(), 4 + 8);

    // a tampered dataset is refused
    let bin = d.join("data/dataset.bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&bin, bytes).unwrap();
    let o = aidmae(&["probe", "--config", "c.json", "--data", "data"], d);
    assert_eq!(code(&o), 2);
}

#[test]
fn preprocess_event_csv() {
    let t = setup();
    let d = t.path();
    let registry = r#"{"features": [
        {"name": "glucose", "kind": "lab", "item_ids": ["g"], "panel": "bmp"},
        {"name": "sodium", "kind": "lab", "item_ids": ["na"], "panel": "bmp"},
        {"name": "heart_rate", "kind": "vital", "item_ids": ["hr"]},
        {"name": "norepinephrine", "kind": "vasopressor", "item_ids": ["ne"], "drug": "norepinephrine"},
        {"name": "ne_equivalent", "kind": "ne_equivalent"}
    ]}"#;
    std::fs::write(d.join("reg.json"), registry).unwrap();
    let mut csv = String::from("subject_id,stay_id,feature_id,time,value,end_time\n");
    let mut labels = String::from("stay_id,task,label\n");
    for s in 0..20 {
        let day = format!("2150-01-{:02}", 1 + s % 28);
        csv += &format!("p{s},st{s},g,{day} 08:00,{},\n", 90 + s);
        csv += &format!("p{s},st{s},na,{day} 09:30,{},\n", 130 + s % 7);
        csv += &format!("p{s},st{s},hr,{day} 10:15,{},\n", 70 + s);
        csv += &format!("p{s},st{s},ne,{day} 02:10,0.1,{day} 04:40\n");
        csv += &format!("p{s},st{s},unknown,{day} 02:10,1,\n");
        labels += &format!("st{s},mortality,{}\n", s % 2);
    }
    std::fs::write(d.join("events.csv"), csv).unwrap();
    std::fs::write(d.join("labels.csv"), labels).unwrap();
    let o = aidmae(
        &[
            "preprocess", "--config", "c.json", "--events", "events.csv", "--labels", "labels.csv",
            "--registry", "reg.json", "--cut-time", "94691520", "--output-dir", "pp",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = Manifest::load(&d.join("pp")).unwrap();
    assert_eq!(m.details["dataset"]["samples"], 20);
    assert_eq!(m.details["dataset"]["grid_len"], 2 * 2 + 3 * 24);
    assert_eq!(m.details["grid"]["unknown_items"], 20);
    assert!(m.inputs.contains_key("events") && m.inputs.contains_key("labels"));

    let o = aidmae(&["preprocess", "--config", "c.json", "--output-dir", "pp2"], d);
    assert_eq!(code(&o), 1);
}
