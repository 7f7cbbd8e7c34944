use std::path::Path;
use std::process::{Command, Output};

use jointep::cli::RunManifest;
use jointep::corpus::read_corpus;
use jointep::runtime::read_trace;

fn jointep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointep")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn tiny_config(dir: &Path, arm: &str) -> std::path::PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, format!("[synth]\nnum_utterances = 8\n\n[train]\nsteps = 15\narm = \"{arm}\"\n")).unwrap();
    p
}

#[test]
fn end_to_end_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny_config(t.path(), "E3");
    let data = t.path().join("data");
    let out = jointep(&["gen-data", "--config", s(&cfg), "--seed", "2", "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let corpus = data.join("corpus.jsonl");
    assert_eq!(read_corpus(&corpus).unwrap().records.len(), 8);
    let m = manifest(&data);
    assert_eq!(m.command, "gen-data");
    assert_eq!(m.seed, Some(2));
    assert_eq!(m.outputs.len(), 1);
    assert_eq!(m.outputs[0].sha256.len(), 64);

    let model = t.path().join("model");
    let out = jointep(&["train", "--config", s(&cfg), "--corpus", s(&corpus), "--out", s(&model)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(model.join("model.ckpt.json").exists());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(model.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report["multitask_loss"].as_array().unwrap().len(), 15);
    let ckpt = model.join("model.ckpt.json");

    let ev = t.path().join("eval");
    let out = jointep(&["eval", "--ckpt", s(&ckpt), "--corpus", s(&corpus), "--mode", "continuous", "--out", s(&ev)]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("wer,del,ins,sub,speech_pct\n"), "{stdout}");
    assert_eq!(std::fs::read_to_string(ev.join("metrics.csv")).unwrap(), stdout);

    let out = jointep(&["eval", "--ckpt", s(&ckpt), "--corpus", s(&corpus), "--out", s(&ev)]);
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("wer,ep50_ms,ep90_ms\n"));

    let sw = t.path().join("sweep");
    let out = jointep(&["sweep", "--ckpt", s(&ckpt), "--corpus", s(&corpus), "--wer-budget", "1000", "--out", s(&sw)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = std::fs::read_to_string(sw.join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("theta_eoq,theta_eos,w_ms,wer,del,ins,sub,ep50_ms,ep90_ms,speech_pct,cutoffs\n"));
    assert_eq!(sweep.lines().count(), 1 + 7 * 6 * 6);
    assert!(std::fs::read_to_string(sw.join("curve.csv")).unwrap().starts_with("wer,ep50_ms\n"));
    assert!(sw.join("selected.json").exists());

    let st = t.path().join("stream");
    let utt = read_corpus(&corpus).unwrap().records[3].id.clone();
    let out = jointep(&["stream", "--ckpt", s(&ckpt), "--corpus", s(&corpus), "--utt", &utt, "--out", s(&st)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!read_trace(&st.join("trace.csv")).unwrap().is_empty());
    assert_eq!(manifest(&st).inputs.len(), 2);
}

#[test]
fn b1_writes_two_checkpoints_and_eval_takes_both() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny_config(t.path(), "B1");
    let data = t.path().join("d");
    assert!(jointep(&["gen-data", "--config", s(&cfg), "--out", s(&data)]).status.success());
    let corpus = data.join("corpus.jsonl");
    let model = t.path().join("m");
    assert!(jointep(&["train", "--config", s(&cfg), "--corpus", s(&corpus), "--out", s(&model)]).status.success());
    let (ep, asr) = (model.join("ep.ckpt.json"), model.join("asr.ckpt.json"));
    assert!(ep.exists() && asr.exists() && !model.join("model.ckpt.json").exists());
    let ev = t.path().join("e");
    let both = jointep(&["eval", "--ckpt", s(&ep), "--ckpt", s(&asr), "--arm", "B1", "--corpus", s(&corpus), "--out", s(&ev)]);
    assert!(both.status.success(), "{}", String::from_utf8_lossy(&both.stderr));
    let one = jointep(&["eval", "--ckpt", s(&ep), "--arm", "B1", "--corpus", s(&corpus), "--out", s(&ev)]);
    assert_eq!(one.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let out = |name: &str| t.path().join(name);
    // usage errors
    assert_eq!(jointep(&["gen-data", "--config", "/nonexistent.toml", "--out", s(&out("a"))]).status.code(), Some(2));
    assert_eq!(jointep(&["frobnicate"]).status.code(), Some(2));
    let bad = t.path().join("bad.toml");
    std::fs::write(&bad, "[synth]\nnum_utterances = 4\nbogus = 1\n").unwrap();
    let r = jointep(&["gen-data", "--config", s(&bad), "--out", s(&out("b"))]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("bogus"));
    std::fs::write(&bad, "[model]\nd_in = 5\n").unwrap();
    assert_eq!(jointep(&["gen-data", "--config", s(&bad), "--out", s(&out("c"))]).status.code(), Some(2));
    let th = jointep(&["stream", "--script", "x.json", "--theta-vad", "1.5", "--out", s(&out("d"))]);
    assert_eq!(th.status.code(), Some(2));

    // runtime failures
    let corrupt = t.path().join("corpus.jsonl");
    std::fs::write(&corrupt, "{\"version\":1,\"d_in\":8,\"vocab_size\":8,\"frame_period_ms\":30}\nnot json\n").unwrap();
    let r = jointep(&["train", "--corpus", s(&corrupt), "--out", s(&out("e"))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains(":2:"));

    let cfg = tiny_config(t.path(), "E3");
    assert!(jointep(&["gen-data", "--config", s(&cfg), "--out", s(&out("f"))]).status.success());
    let corpus = out("f").join("corpus.jsonl");
    assert!(jointep(&["train", "--config", s(&cfg), "--corpus", s(&corpus), "--out", s(&out("g"))]).status.success());
    let ckpt = out("g").join("model.ckpt.json");
    let r = jointep(&["sweep", "--ckpt", s(&ckpt), "--corpus", s(&corpus), "--wer-budget", "0", "--out", s(&out("h"))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("budget"));
    assert!(out("h").join("sweep.csv").exists() && !out("h").join("selected.json").exists());
    let r = jointep(&["stream", "--ckpt", s(&ckpt), "--corpus", s(&corpus), "--utt", "missing", "--out", s(&out("i"))]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn stream_script_writes_trace() {
    let t = tempfile::tempdir().unwrap();
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden/decoder_first/script.json");
    let r = jointep(&["stream", "--script", s(&script), "--out", s(t.path())]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let want = std::fs::read_to_string(script.with_file_name("trace.csv")).unwrap();
    assert_eq!(std::fs::read_to_string(t.path().join("trace.csv")).unwrap(), want);
    let session: serde_json::Value = serde_json::from_slice(&std::fs::read(t.path().join("session.json")).unwrap()).unwrap();
    assert_eq!(session["ended"], true);
    assert_eq!(session["hypothesis"], serde_json::json!([1, 2]));
}

#[test]
fn example_configs_parse() {
    for name in ["default", "short_queries", "continuous"] {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("configs/{name}.toml"));
        jointep::cli::ExperimentConfig::load(&p).unwrap();
    }
}
