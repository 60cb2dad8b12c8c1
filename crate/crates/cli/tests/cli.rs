use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use effcrn_core::dsp::wav::{read_wav, write_wav, WavFormat};
use effcrn_core::topology::{checkpoint, Model, Overrides, Variant};
use serde_json::Value;

fn effcrn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_effcrn")).args(args).env_remove("EFFCRN_THREADS").output().unwrap()
}

fn json_lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn lite_checkpoint(dir: &Path) -> PathBuf {
    let model = Model::from_variant(&Variant::EffCrn23Lite, &Overrides::default(), 1).unwrap();
    let p = dir.join("lite.ckpt");
    checkpoint::save(&p, &model, &Value::Null).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn analyze_defaults_to_every_published_variant() {
    let out = effcrn(&["--format", "json-lines", "analyze"]);
    assert!(out.status.success());
    let lines = json_lines(&out);
    let variants: Vec<&Value> = lines.iter().filter(|l| l["kind"] == "variant").collect();
    assert_eq!(variants.len(), 9);
    assert!(lines.iter().any(|l| l["kind"] == "delta"));
    for v in variants {
        assert!(v["params_deviation"].as_f64().unwrap().abs() <= 0.10, "{v}");
    }
}

#[test]
fn analyze_reports_named_variants() {
    let out = effcrn(&["--format", "json-lines", "analyze", "FCRN15", "EffCRN23", "EffCRN23lite"]);
    let rows = json_lines(&out);
    let params: Vec<u64> = rows.iter().filter(|l| l["kind"] == "variant").map(|l| l["params"].as_u64().unwrap()).collect();
    assert_eq!(params, [875_394, 996_599, 395_949]);

    let out = effcrn(&["--format", "json-lines", "analyze", "FCRN15⊖C"]);
    let p = json_lines(&out)[0]["params"].as_f64().unwrap();
    assert!((p - 777_000.0).abs() / 777_000.0 < 0.01);

    let table = effcrn(&["analyze", "--variant", "fcrn15-c"]);
    assert!(String::from_utf8_lossy(&table.stdout).contains("FCRN15⊖C"));
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let out = effcrn(&["analyze", "CRUSE5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("CRUSE5"));
    assert_eq!(effcrn(&["analyze", "--format", "xml"]).status.code(), Some(2));
    assert_eq!(effcrn(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn thread_variable_is_validated() {
    let out = Command::new(env!("CARGO_BIN_EXE_effcrn")).args(["analyze"]).env("EFFCRN_THREADS", "zero").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_effcrn")).args(["analyze"]).env("EFFCRN_THREADS", "2").output().unwrap();
    assert!(out.status.success());
}

#[test]
fn describe_lists_layers() {
    let out = effcrn(&["--format", "json-lines", "describe", "--variant", "EffCRN23lite"]);
    assert!(out.status.success());
    let layers = json_lines(&out);
    let total: u64 = layers.iter().map(|l| l["params"].as_u64().unwrap()).sum();
    assert_eq!(total, 395_949);
}

#[test]
fn enhance_keeps_silence_silent() {
    let dir = tempfile::tempdir().unwrap();
    let model = lite_checkpoint(dir.path());
    let (input, output) = (dir.path().join("zero.wav"), dir.path().join("out.wav"));
    write_wav(&input, &vec![0.0; 16_000], WavFormat::Pcm16).unwrap();
    let out = effcrn(&["--format", "json-lines", "enhance", "--model", s(&model), "--in", s(&input), "--out", s(&output)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let y = read_wav(&output).unwrap();
    assert_eq!(y.len(), 16_000);
    assert!(y.iter().all(|&v| v == 0.0));
    let stats = &json_lines(&out)[0]["stats"];
    assert!(stats["frames"].as_u64().unwrap() >= 63);
    assert!(stats["real_time_factor"].as_f64().unwrap() > 0.0);
}

#[test]
fn enhance_rejects_other_sample_rates() {
    let dir = tempfile::tempdir().unwrap();
    let model = lite_checkpoint(dir.path());
    let input = dir.path().join("cd.wav");
    let spec = hound::WavSpec { channels: 1, sample_rate: 44_100, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(&input, spec).unwrap();
    for _ in 0..4410 {
        w.write_sample(0i16).unwrap();
    }
    w.finalize().unwrap();
    let output = dir.path().join("out.wav");
    let out = effcrn(&["enhance", "--model", s(&model), "--in", s(&input), "--out", s(&output)]);
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("44100"), "{}", stderr(&out));
}

#[test]
fn enhance_rejects_corrupt_checkpoint_and_missing_paths() {
    let dir = tempfile::tempdir().unwrap();
    let model = lite_checkpoint(dir.path());
    let mut bytes = fs::read(&model).unwrap();
    let n = bytes.len();
    bytes[n - 40] ^= 0xff;
    fs::write(&model, bytes).unwrap();
    let input = dir.path().join("in.wav");
    write_wav(&input, &[0.0; 1000], WavFormat::Pcm16).unwrap();
    let output = dir.path().join("out.wav");
    let out = effcrn(&["enhance", "--model", s(&model), "--in", s(&input), "--out", s(&output)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!output.exists());

    let missing = dir.path().join("nope.wav");
    let out = effcrn(&["enhance", "--model", s(&model), "--in", s(&missing), "--out", s(&output)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_manifest_line_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.txt");
    fs::write(&manifest, "# header\na.wav b.wav 5 train\na.wav b.wav loud train\n").unwrap();
    let out = effcrn(&["train", "--manifest", s(&manifest), "--out", s(&dir.path().join("run"))]);
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("m.txt:3"), "{}", stderr(&out));
}

fn train_args<'a>(manifest: &'a str, out: &'a str, variant: &'a str, steps: &'a str) -> Vec<&'a str> {
    vec![
        "--format", "json-lines", "train", "--manifest", manifest, "--out", out, "--variant", variant, "--steps", steps,
        "--batch", "2", "--seq-len", "20", "--lr", "1e-3", "--seed", "3",
    ]
}

#[test]
fn synth_train_resume() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let out = effcrn(&["synth", "--out", s(&corpus), "--count", "5", "--seconds", "0.5", "--val", "1", "--seed", "4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest = corpus.join("manifest.txt");

    let run = dir.path().join("run");
    let out = effcrn(&train_args(s(&manifest), s(&run), "EffCRN23lite", "50"));
    assert!(out.status.success(), "{}", stderr(&out));
    let report = &json_lines(&out)[0]["report"];
    assert!(report["steps"].as_u64().unwrap() <= 50);
    let log: Vec<Value> =
        fs::read_to_string(run.join("train.log")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(log.len() >= 5);
    let first = log[0]["train_loss"].as_f64().unwrap();
    let last = log[log.len() - 1]["train_loss"].as_f64().unwrap();
    assert!(last < first, "loss went from {first} to {last}");
    let best = run.join("best.ckpt");
    assert!(best.is_file());

    let again = dir.path().join("again");
    effcrn(&train_args(s(&manifest), s(&again), "EffCRN23lite", "50"));
    assert_eq!(fs::read(&best).unwrap(), fs::read(again.join("best.ckpt")).unwrap());

    let resumed = dir.path().join("resumed");
    let mut args = train_args(s(&manifest), s(&resumed), "EffCRN23lite", "4");
    args.extend(["--resume", s(&best)]);
    let out = effcrn(&args);
    assert!(out.status.success(), "{}", stderr(&out));

    let mut args = train_args(s(&manifest), s(&resumed), "FCRN15", "4");
    args.extend(["--resume", s(&best)]);
    let out = effcrn(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("spec"), "{}", stderr(&out));
}

#[test]
fn quick_selftest_passes() {
    let out = effcrn(&["--format", "json-lines", "selftest", "--quick"]);
    let checks = json_lines(&out);
    let failed: Vec<&Value> = checks.iter().filter(|c| c["passed"] != true).collect();
    assert!(failed.is_empty(), "{failed:?}");
    assert_eq!(out.status.code(), Some(0));
    assert!(checks.iter().any(|c| c["name"] == "pad plan enumeration"));
    assert!(checks.iter().any(|c| c["name"].as_str().unwrap().starts_with("FLOPs")));
}
