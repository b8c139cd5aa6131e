use std::path::Path;
use std::process::{Command, Output};

use ctarnn::features::wav::encode_wav;
use ctarnn::features::{read_seqf, write_seqf};
use ctarnn::Tensor;

fn ctarnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctarnn"))
        .args(args)
        .env_remove("CTARNN_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SPEC: &str = "n_classes = 2\nn_channels = 3\nd_e = 4\nseq_len_mean = 12.0\nseq_len_std = 1.0\n\
min_seq_len = 8\nsalience_len = 4\nn_sessions = 2\nspeakers_per_session = 2\nutterances_per_speaker = 4\n";

const RUN: &str = "classes = [\"c0\", \"c1\"]\nbatch_size = 4\nmax_epochs = 2\nplateau_patience = 1\n\
hidden = 4\nlayers = 1\nheads = 1\nhead_dim = 4\n";

fn corpus(dir: &Path) -> std::path::PathBuf {
    let spec = dir.join("spec.toml");
    std::fs::write(&spec, SPEC).unwrap();
    let out = dir.join("corpus");
    let o = ctarnn(&["synth", "--spec", p(&spec), "--out-dir", p(&out), "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(code(&ctarnn(&["--no-such-flag"])), 2);
    assert_eq!(code(&ctarnn(&["gradcheck", "--bogus"])), 2);
    assert_eq!(code(&ctarnn(&[])), 2);
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = ctarnn(&["gradcheck", "--dims", "2,3,2,4,1,2,2", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(rep["passed"], true);
    assert!(dir.path().join("provenance.json").is_file());

    let o = ctarnn(&["gradcheck", "--dims", "2,3,2,4,1,2,2", "--corrupt-adjoint", "matmul"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("check failed"));
}

#[test]
fn gradcheck_rejects_bad_settings() {
    assert_eq!(code(&ctarnn(&["gradcheck", "--dims", "1,2,3"])), 2);
    assert_eq!(code(&ctarnn(&["gradcheck", "--model", "transformer"])), 2);
    assert_eq!(code(&ctarnn(&["gradcheck", "--corrupt-adjoint", "nope"])), 2);
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, cb) = (corpus(a.path()), corpus(b.path()));
    let manifest = std::fs::read(ca.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest, std::fs::read(cb.join("manifest.jsonl")).unwrap());
    let first: serde_json::Value = serde_json::from_slice(manifest.split(|&c| c == b'\n').next().unwrap()).unwrap();
    let rel = first["embeddings"].as_str().unwrap();
    assert_eq!(
        read_seqf(&ca.join(rel)).unwrap().data(),
        read_seqf(&cb.join(rel)).unwrap().data()
    );
    assert!(ca.join("provenance.json").is_file());
}

#[test]
fn bench_writes_the_tsv_schema() {
    let dir = tempfile::tempdir().unwrap();
    let o = ctarnn(&[
        "bench-attn", "--N-list", "1,2", "--m", "10", "--d", "4", "--batch", "2", "--heads", "1", "--head-dim", "4",
        "--reps", "1", "--out", p(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let tsv = std::fs::read_to_string(dir.path().join("bench.tsv")).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], "N\tm\td_h\tcta_ms\tflat_ms\tratio\tn1_parity");
    assert_eq!(lines.len(), 3);
    for l in &lines[1..] {
        assert_eq!(l.split('\t').count(), 7);
    }
    let parity: f64 = lines[1].split('\t').nth(6).unwrap().parse().unwrap();
    assert!(parity.abs() < 1e-5);
}

#[test]
fn lmfb_frame_count_and_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("tone.wav");
    let pcm: Vec<f32> = (0..16_000).map(|i| (i as f32 * 0.05).sin() * 0.3).collect();
    std::fs::write(&wav, encode_wav(&pcm, 16_000)).unwrap();
    let out = dir.path().join("tone.seqf");
    let o = ctarnn(&["lmfb", "--wav", p(&wav), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_seqf(&out).unwrap().shape(), &[(16_000 - 400) / 160 + 1, 80]);
    assert!(dir.path().join("tone.seqf.provenance.json").is_file());

    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"not a wav file").unwrap();
    assert_eq!(code(&ctarnn(&["lmfb", "--wav", p(&junk), "--out", p(&out)])), 3);
    let missing = dir.path().join("missing.wav");
    assert_eq!(code(&ctarnn(&["lmfb", "--wav", p(&missing), "--out", p(&out)])), 3);
}

#[test]
fn train_cv_eval_and_attention_dump() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let manifest = c.join("manifest.jsonl");
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, RUN).unwrap();

    let train = dir.path().join("train");
    let o = ctarnn(&["train", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&train), "--fold", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("# seed = 0"));
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(train.join("report.json")).unwrap()).unwrap();
    assert_eq!(rep["fold"]["index"], 1);
    assert!(train.join("checkpoint/params.json").is_file());

    let cv = dir.path().join("cv");
    let o = ctarnn(&["cv", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&cv), "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(cv.join("report.json")).unwrap()).unwrap();
    assert_eq!(rep["folds"].as_array().unwrap().len(), 4);
    assert_eq!(rep["seed"], 4);

    let ev = dir.path().join("ev");
    let o = ctarnn(&["eval", "--checkpoints", p(&cv.join("checkpoints")), "--manifest", p(&manifest), "--out", p(&ev)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(rep["kind"], "cross");
    assert_eq!(rep["folds"].as_array().unwrap().len(), 4);

    let ck = train.join("checkpoint");
    let att = dir.path().join("att");
    let o = ctarnn(&[
        "attn-dump", "--checkpoint", p(&ck), "--utterance", "utt00000", "--manifest", p(&manifest), "--out", p(&att),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(att.join("attn.json")).unwrap()).unwrap();
    let head = &doc["attention"]["heads"][0];
    let sum: f64 = head["alpha_t"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-5);

    // a raw SEQF stack works without a manifest, a wrong-shaped one does not
    let first: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(&manifest).unwrap().lines().next().unwrap()).unwrap();
    let stack = c.join(first["embeddings"].as_str().unwrap());
    let att2 = dir.path().join("att2");
    let o = ctarnn(&["attn-dump", "--checkpoint", p(&ck), "--utterance", p(&stack), "--out", p(&att2)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc2: serde_json::Value = serde_json::from_slice(&std::fs::read(att2.join("attn.json")).unwrap()).unwrap();
    assert_eq!(doc2["attention"], doc["attention"]);
    let bad = dir.path().join("bad.seqf");
    write_seqf(&bad, &Tensor::zeros([2, 5, 4])).unwrap();
    assert_eq!(code(&ctarnn(&["attn-dump", "--checkpoint", p(&ck), "--utterance", p(&bad), "--out", p(&att2)])), 2);

    let o = ctarnn(&["eval", "--checkpoints", p(dir.path()), "--manifest", p(&manifest), "--out", p(&ev)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_manifest_and_bad_config_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, RUN).unwrap();
    let missing = dir.path().join("none.jsonl");
    let out = dir.path().join("o");
    assert_eq!(code(&ctarnn(&["cv", "--config", p(&cfg), "--manifest", p(&missing), "--out", p(&out)])), 3);
    std::fs::write(&cfg, "hidden = 4\nwhatever = 1\n").unwrap();
    assert_eq!(code(&ctarnn(&["cv", "--config", p(&cfg), "--manifest", p(&missing), "--out", p(&out)])), 2);
    assert_eq!(code(&ctarnn(&["--threads", "0", "gradcheck"])), 2);
}
