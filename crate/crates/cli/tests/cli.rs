use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use derevb::models::{BundleConfig, ModelBundle};
use derevb::wav::read_wav;

fn derevb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_derevb"))
        .args(args)
        .env_remove("DEREVB_JOBS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = derevb(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn error_json(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("not JSON ({e}): {text}"))
}

fn synth(dir: &Path) -> String {
    let data = dir.join("data");
    ok(&["synth-data", "--out", data.to_str().unwrap(), "--n", "2", "--duration", "0.4", "--seed", "3"]);
    data.join("manifest.jsonl").display().to_string()
}

fn untrained_bundle(dir: &Path) -> String {
    let p = dir.join("untrained.ckpt");
    ModelBundle::new(BundleConfig::desk(), derevb::autodiff::Precision::F32, 1)
        .unwrap()
        .save(&p)
        .unwrap();
    p.display().to_string()
}

#[test]
fn enhance_keeps_length_and_rate() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = untrained_bundle(dir.path());
    for (rate, len) in [(16000u32, 7001usize), (8000, 300)] {
        let input = dir.path().join(format!("in_{rate}.wav"));
        let w = derevb::stft::Waveform::new((0..len).map(|i| (i as f64 * 0.01).sin() * 0.3).collect(), rate).unwrap();
        derevb::wav::write_wav(&input, &w, derevb::wav::WavFormat::Pcm16).unwrap();
        let out = dir.path().join(format!("out_{rate}.wav"));
        let mag = dir.path().join(format!("mag_{rate}.wav"));
        ok(&[
            "enhance",
            "--checkpoint",
            &ckpt,
            "--in",
            input.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--magnitude-only-out",
            mag.to_str().unwrap(),
        ]);
        for p in [&out, &mag] {
            let e = read_wav(p).unwrap();
            assert_eq!((e.len(), e.sample_rate_hz), (len, rate));
        }
    }
}

#[test]
fn evaluate_clean_against_itself_is_ideal() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let clean = dir.path().join("data/clean");
    let out = dir.path().join("ev");
    ok(&["evaluate", "--manifest", &manifest, "--estimates", clean.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let csv = fs::read_to_string(out.join("evaluation.csv")).unwrap();
    let mean = csv.lines().find(|l| l.starts_with("mean,")).unwrap();
    assert_eq!(mean, "mean,0,0,100,35");
}

#[test]
fn synth_data_is_reproducible_and_seed_dependent() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let d = dir.path().join(name);
        ok(&["synth-data", "--out", d.to_str().unwrap(), "--n", "2", "--duration", "0.3", "--seed", seed]);
        fs::read(d.join("noisy/utt0001.wav")).unwrap()
    };
    let (a, b, c) = (run("a", "9"), run("b", "9"), run("c", "10"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn malformed_manifest_reports_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.jsonl");
    fs::write(&m, "{\"id\": \"a\", \"clean_path\": \"a.wav\", \"rt60_s\": 0.5, \"snr_db\": 20, \"noise_kind\": \"white\", \"seed\": 1, \"extra\": 2}\n").unwrap();
    let v = error_json(&derevb(&["analyze", "--manifest", m.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]));
    assert_eq!(v["kind"], "ConfigError");
    let path = v["path"].as_str().unwrap();
    assert!(path.contains(":1") && path.ends_with("extra"), "{path}");
}

#[test]
fn config_schema_violation_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"lr": "fast"}"#).unwrap();
    let out = derevb(&[
        "train",
        "--stage",
        "s2s",
        "--manifest",
        &manifest,
        "--out",
        dir.path().join("t").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    let v = error_json(&out);
    assert_eq!(v["kind"], "ConfigError");
    assert!(v["path"].as_str().unwrap().ends_with("lr"), "{v}");
}

#[test]
fn finetune_without_pretraining_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let out = derevb(&["train", "--stage", "finetune", "--manifest", &manifest, "--out", dir.path().join("t").to_str().unwrap()]);
    let v = error_json(&out);
    assert_eq!(v["kind"], "ConfigError");
    assert_eq!(v["path"], "stage");
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = untrained_bundle(dir.path());
    let out = derevb(&["enhance", "--checkpoint", &ckpt, "--in", "/nonexistent.wav", "--out", "x.wav"]);
    let v = error_json(&out);
    assert_eq!(v["kind"], "WavError");
    assert_eq!(v["path"], "/nonexistent.wav");
}

#[test]
fn usage_errors_are_json_too() {
    let v = error_json(&derevb(&["train", "--stage", "bogus"]));
    assert_eq!(v["kind"], "UsageError");
}
