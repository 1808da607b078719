use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tinychirp::audio_io::{write_wav, AudioSignal};
use tinychirp::dsp::read_matrix;
use tinychirp::synth;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tinychirp"));
    c.env_remove("TINYCHIRP_T_LOW").env_remove("TINYCHIRP_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}", String::from_utf8_lossy(&o.stdout))
    })
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn silent_corpus(dir: &Path, n: usize) {
    let sig = synth::silence().to_signal();
    for i in 0..n {
        write_wav(&sig, dir.join(format!("quiet{i}.wav"))).unwrap();
    }
}

#[test]
fn preprocess_nine_seconds_at_48k() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let sig = AudioSignal::mono(synth::sine(440.0, 0.5, 9 * 48_000, 48_000), 48_000);
    write_wav(&sig, src.path().join("rec.wav")).unwrap();
    let o = run(&["preprocess", p(src.path()), p(out.path()), "--mel"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<String> = fs::read_dir(out.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["rec_0.mel", "rec_0.wav", "rec_3000.mel", "rec_3000.wav", "rec_6000.mel", "rec_6000.wav"]
    );
    let (rows, cols, _) = read_matrix(fs::File::open(out.path().join("rec_3000.mel")).unwrap()).unwrap();
    assert_eq!((rows, cols), (184, 80));
    let seg = tinychirp::audio_io::read_wav(out.path().join("rec_0.wav")).unwrap();
    assert_eq!((seg.sample_rate, seg.frames()), (16_000, 48_000));
}

#[test]
fn preprocess_empty_and_partial_failures() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let o = run(&["preprocess", p(src.path()), p(out.path())]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert_eq!(fs::read_dir(out.path()).unwrap().count(), 0);

    silent_corpus(src.path(), 4);
    fs::write(src.path().join("zz_bad.wav"), b"not a wav").unwrap();
    let o = run(&["preprocess", p(src.path()), p(out.path()), "--jobs", "3"]);
    assert_eq!(code(&o), 1);
    let v = json(&o);
    assert_eq!(v["files"], 5);
    assert_eq!(v["segments"], 4);
    assert!(v["errors"][0]["source"].as_str().unwrap().ends_with("zz_bad.wav"));
}

#[test]
fn screen_defaults_echo_into_report() {
    let src = tempfile::tempdir().unwrap();
    silent_corpus(src.path(), 2);
    let o = run(&["screen", p(src.path()), "--model", "transformer-time"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&o);
    assert_eq!(v["config"]["t_low"].as_f64(), Some(1.0e-7));
    assert_eq!(v["config"]["t_high"].as_f64(), Some(1.29e-5));
    assert_eq!(v["config"]["t_model"].as_f64(), Some(0.27));
    assert_eq!(v["config"]["variant"], "full");
    assert_eq!(v["counts"]["discarded_idle"], 2);
}

#[test]
fn screen_baseline_silent_corpus() {
    let src = tempfile::tempdir().unwrap();
    let report = tempfile::tempdir().unwrap();
    silent_corpus(src.path(), 3);
    let rp = report.path().join("r.json");
    let o = run(&["screen", p(src.path()), "--variant", "baseline", "--report", p(&rp)]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_str(&fs::read_to_string(rp).unwrap()).unwrap();
    assert_eq!(v["counts"]["discarded_idle"], 3);
    assert_eq!(v["counts"]["stored_direct"], 0);
    assert!(v["per_segment"].as_array().unwrap().iter().all(|r| r["verdict"] == "discarded_idle"));
}

#[test]
fn screen_rejects_conflicting_thresholds() {
    let src = tempfile::tempdir().unwrap();
    let o = run(&["screen", p(src.path()), "--t-low", "1e-3", "--t-high", "1e-5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_two_hundred_trials() {
    let o = run(&["verify", "--trials", "200", "--seed", "7"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 200);
    for l in &lines {
        assert!(l["max_rel_err"].as_f64().unwrap() <= 1e-5);
        for key in ["config", "peak_values_stream", "peak_values_naive", "ratio"] {
            assert!(l.get(key).is_some());
        }
    }
}

#[test]
fn eval_scores_file() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("s.csv");
    fs::write(&f, "score,label\n0.9,target\n0.8,1\n0.3,non_target\n0.6,0\n0.1,non_target\n").unwrap();
    let o = run(&["eval", "--scores", p(&f)]);
    assert_eq!(code(&o), 0);
    let v = json(&o);
    let auc = v["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert_eq!(auc, 1.0);
    assert_eq!(v["t_star"].as_f64(), Some(0.8));

    fs::write(&f, "score,label\n0.9,target\n0.8,target\n").unwrap();
    assert_eq!(code(&run(&["eval", "--scores", p(&f)])), 1);
}

#[test]
fn quantize_then_screen_reports_i8() {
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("cnn_time.i8.tchw");
    let o = run(&["quantize", "--model", "cnn-time", "--seed", "3", "--out", p(&q)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&o);
    assert!(v["int8_bytes"].as_u64().unwrap() < v["float_bytes"].as_u64().unwrap());

    let src = tempfile::tempdir().unwrap();
    let tone = synth::segment_of(synth::random_waveform(1, 48_000));
    write_wav(&tone.to_signal(), src.path().join("a.wav")).unwrap();
    let o = run(&["screen", p(src.path()), "--weights", p(&q), "--variant", "skip-baseline"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&o);
    assert_eq!(v["dtype"], "i8");
    assert_eq!(v["config"]["model"], "cnn-time");
    assert!(v["per_segment"][0]["score"].is_number());
}

#[test]
fn help_and_unknown_flags() {
    for sub in ["preprocess", "screen", "eval", "verify", "quantize", "budget"] {
        assert_eq!(code(&run(&[sub, "--help"])), 0, "{sub}");
        assert_eq!(code(&run(&[sub, "--no-such-flag"])), 2, "{sub}");
    }
}

#[test]
fn budget_outputs() {
    let o = run(&["budget", "--store-fraction", "0.1", "--storage-days-at-full", "14"]);
    assert_eq!(code(&o), 0);
    let v = json(&o);
    let days = v["estimate"]["storage_days"].as_f64().unwrap();
    assert!((days - 140.0).abs() < 1e-6);
    let o = run(&["budget", "--format", "table"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("limited by"));
}

#[test]
fn config_and_env_layers() {
    let dir = tempfile::tempdir().unwrap();
    silent_corpus(dir.path(), 1);
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[screen]\nvariant = \"baseline-only\"\nt_high = 2e-5\n").unwrap();
    let o = bin()
        .args(["screen", p(dir.path()), "--config", p(&cfg), "--t-high", "3e-5"])
        .env("TINYCHIRP_T_LOW", "5e-7")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&o);
    assert_eq!(v["config"]["variant"], "baseline-only");
    assert_eq!(v["config"]["t_high"].as_f64(), Some(3e-5));
    assert_eq!(v["config"]["t_low"].as_f64(), Some(5e-7));
}

#[test]
fn screen_is_deterministic() {
    let src = tempfile::tempdir().unwrap();
    for i in 0..3 {
        let s = synth::segment_of(synth::random_waveform(i, 48_000));
        write_wav(&s.to_signal(), src.path().join(format!("r{i}.wav"))).unwrap();
    }
    let a = run(&["screen", p(src.path()), "--model", "cnn-time", "--jobs", "3"]);
    let b = run(&["screen", p(src.path()), "--model", "cnn-time"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
}
