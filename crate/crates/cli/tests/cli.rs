use std::path::Path;
use std::process::{Command, Output};

use dmgan::metrics::{save_features, MetricReport};
use dmgan::Tensor;

const TINY: &str = "\
# tiny model, two stages up to 16x16
word_dim = 8
pixel_dim = 4
mem_dim = 8
z_dim = 4
cond_dim = 4
embed_dim = 4
base_res = 8
stages = 2
g_channels = 8
d_channels = 4
residual_blocks = 1
batch_size = 4
train_samples = 16
epochs = 2
checkpoint_every = 4
seed = 3
data_seed = 4
";

fn dmgan(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_dmgan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    out
}

fn ok(args: &[&str]) -> String {
    let out = dmgan(args);
    assert!(
        out.status.success(),
        "dmgan {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn is_png(p: &Path) -> bool {
    std::fs::read(p).map(|b| b.starts_with(b"\x89PNG\r\n\x1a\n")).unwrap_or(false)
}

#[test]
fn gen_data_writes_images_and_captions() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--seed", "2", "--count", "10", "--res", "16", "--out", s(dir.path())]);
    let caps = std::fs::read_to_string(dir.path().join("captions.tsv")).unwrap();
    let lines: Vec<&str> = caps.lines().collect();
    assert_eq!(lines.len(), 11);
    assert!(lines[1].starts_with("0\t") && lines[1].ends_with("background"));
    assert!(is_png(&dir.path().join("images/000009.png")));
    assert!(is_png(&dir.path().join("grid.png")));
    let vocab = std::fs::read_to_string(dir.path().join("vocab.txt")).unwrap();
    assert_eq!(vocab.lines().count(), 15);
}

#[test]
fn train_resume_inspect_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    let ckpt = run.join("checkpoint.dmgk");
    assert!(std::fs::read(&ckpt).unwrap().starts_with(b"DMGK"));
    assert!(is_png(&run.join("samples.png")));
    let log = std::fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["total"].is_number());
    }

    // a longer schedule resumed from the finished run appends to the log
    let longer = dir.path().join("longer.cfg");
    std::fs::write(&longer, TINY.replace("epochs = 2", "epochs = 3")).unwrap();
    ok(&["train", "--config", s(&longer), "--out", s(&run), "--resume", s(&ckpt)]);
    let log = std::fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 12);

    let out = dir.path().join("inspect");
    let stdout = ok(&[
        "inspect",
        "--ckpt",
        s(&ckpt),
        "--caption",
        "a blue square on a white background",
        "--out",
        s(&out),
    ]);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let stages = v["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 1);
    assert_eq!(stages[0]["write_gate_topk"].as_array().unwrap().len(), 5);
    assert_eq!(stages[0]["addressing_topk"].as_array().unwrap().len(), 5);
    assert!(is_png(&out.join("inspect.png")));

    let ext = dir.path().join("ext.dmgk");
    ok(&["train-extractor", "--res", "16", "--out", s(&ext)]);
    let report = dir.path().join("report.json");
    let printed = ok(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--n",
        "200",
        "--report",
        s(&report),
        "--extractor",
        s(&ext),
    ]);
    assert!(printed.contains("FID"));
    let text = std::fs::read_to_string(&report).unwrap();
    let keys: Vec<String> = serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(&text)
        .unwrap()
        .keys()
        .cloned()
        .collect();
    assert_eq!(keys.len(), 5);
    let r = MetricReport::from_json(&text).unwrap();
    assert!(r.is_mean >= 1.0 && r.fid >= 0.0 && (0.0..=1.0).contains(&r.rp_mean));
    assert!(is_png(&report.with_extension("png")));
}

#[test]
fn eval_without_extractor_names_the_fix() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmgan(&[
        "eval",
        "--ckpt",
        s(&dir.path().join("none.dmgk")),
        "--report",
        s(&dir.path().join("r.json")),
        "--extractor",
        s(&dir.path().join("missing.dmgk")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-extractor"));
}

#[test]
fn bad_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let out = dmgan(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn score_features_of_identical_sets_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let feats = Tensor::from_fn(&[50, 3], |k| ((k * 37) % 11) as f32 - 5.0);
    let p = dir.path().join("f.dmf");
    save_features(&p, &feats).unwrap();
    let out = ok(&["score-features", "--real", s(&p), "--fake", s(&p)]);
    assert_eq!(out.trim(), "FID 0.000000");
}
