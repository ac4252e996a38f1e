use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn dft(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dft"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dft(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim().lines().count(), 1, "{stderr}");
    serde_json::from_str(stderr.trim()).unwrap()
}

const CONFIG: &str = r#"output_dir = "run"
init_seed = 1

[model]
n_layers = 3
hidden_size = 16
n_heads = 2
vocab_size = 32
max_seq_len = 32
ffn_mult = 2
tie_output_head = false

[data]
path = "data.jsonl"

[train]
method = "dft"
batch_size = 8
epochs = 1
seed = 4
checkpoint_every = 4

[train.optimizer]
kind = "adam"
lr = 0.003

[train.supervision]
lc_mode = "feature"
et_mode = "logits"
layer_i = 1
layer_j = 2
"#;

fn setup(dir: &Path) {
    ok(
        dir,
        &["gen-data", "--task", "reverse", "--vocab-size", "32", "--train", "80", "--dev", "16", "--test", "16", "--output", "data.jsonl"],
    );
    std::fs::write(dir.join("run.toml"), CONFIG).unwrap();
}

#[test]
fn gen_data_is_deterministic_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |seed: &str, out: &str| {
        ok(dir.path(), &["gen-data", "--task", "kv", "--vocab-size", "64", "--train", "20", "--seed", seed, "--output", out]);
        std::fs::read(dir.path().join(out)).unwrap()
    };
    assert_eq!(gen("3", "a.jsonl"), gen("3", "b.jsonl"));
    assert_ne!(gen("3", "a.jsonl"), gen("4", "c.jsonl"));
}

#[test]
fn train_writes_manifest_and_resumes_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(d, &["train", "--config", "run.toml"]);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(d.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["checkpoint"], "model.ckpt");
    assert_eq!(manifest["steps"], 10);
    let full = std::fs::read(d.join("run/model.ckpt")).unwrap();
    let metrics = std::fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 10);

    std::fs::copy(d.join("run/step-4.ckpt"), d.join("run/model.ckpt")).unwrap();
    std::fs::copy(d.join("run/step-4.state"), d.join("run/model.state")).unwrap();
    ok(d, &["train", "--config", "run.toml", "--resume"]);
    assert_eq!(std::fs::read(d.join("run/model.ckpt")).unwrap(), full);
    assert_eq!(std::fs::read_to_string(d.join("run/metrics.jsonl")).unwrap(), metrics);
}

#[test]
fn analysis_commands_read_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(d, &["train", "--config", "run.toml"]);
    let m = "run/manifest.json";
    let text = ok(d, &["evaluate", "--manifest", m, "--split", "dev", "--output", "eval"]);
    assert!(text.starts_with("method"));
    let row: Value = serde_json::from_str(std::fs::read_to_string(d.join("eval.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(row["method"], "dft");
    assert_eq!(row["layer_i"], 1);
    assert_eq!(row["layer_j"], 2);

    let prof = ok(d, &["profile-entropy", "--manifest", m, "--out-dir", "prof"]);
    assert!(prof.contains("mean_entropy"));
    for f in ["entropy.jsonl", "entropy.txt", "entropy.svg", "heatmap.csv"] {
        assert!(d.join("prof").join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(d.join("prof/entropy.jsonl")).unwrap().lines().count(), 4);

    ok(d, &["align", "--manifest", m, "--output", "align"]);
    ok(d, &["project", "--manifest", m, "--output", "proj"]);
    assert!(ok(d, &["project", "--manifest", m]).contains("layer 1"));
    for (kind, input) in [
        ("metrics", "run/metrics.jsonl"),
        ("entropy", "prof/entropy.jsonl"),
        ("projection", "proj.jsonl"),
    ] {
        ok(d, &["plot", "--kind", kind, "--input", input, "--output", &format!("{kind}.svg")]);
        assert!(std::fs::read_to_string(d.join(format!("{kind}.svg"))).unwrap().starts_with("<svg"));
    }
}

#[test]
fn ablate_runs_entries_and_sweep_from_one_init() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let config = r#"output_dir = "abl"
init_seed = 2
split = "dev"
task = "reverse"

[model]
n_layers = 3
hidden_size = 16
n_heads = 2
vocab_size = 32
max_seq_len = 32
ffn_mult = 2
tie_output_head = false

[data]
path = "data.jsonl"

[lens]
layer_i = 1
layer_j = 2

[[entry]]
name = "tft"
[entry.train]
method = "tft"
batch_size = 8
epochs = 1
seed = 1
[entry.train.optimizer]
kind = "adam"
lr = 0.003

[[entry]]
name = "dft"
[entry.train]
method = "dft"
batch_size = 8
epochs = 1
seed = 1
[entry.train.optimizer]
kind = "adam"
lr = 0.003
[entry.train.supervision]
lc_mode = "logits"
et_mode = "logits"
layer_i = 1
layer_j = 2

[sweep]
layers = [1, 2, 3]
label = "et-logits"
[sweep.train]
method = "dft"
batch_size = 8
epochs = 1
seed = 1
[sweep.train.optimizer]
kind = "adam"
lr = 0.003
[sweep.train.supervision]
et_mode = "logits"
layer_j = 1
"#;
    std::fs::write(d.join("abl.toml"), config).unwrap();
    ok(d, &["ablate", "--config", "abl.toml"]);
    let rows = std::fs::read_to_string(d.join("abl/ablation.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 2);
    let sweep = std::fs::read_to_string(d.join("abl/sweep.txt")).unwrap();
    assert!(sweep.contains("baseline tok_acc"));
    assert!(d.join("abl/tft.ckpt").exists());
    ok(d, &["plot", "--kind", "sweep", "--input", "abl/sweep.jsonl", "--output", "sweep.svg"]);
}

#[test]
fn errors_are_one_line_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let e = error_json(&dft(d, &["evaluate", "--checkpoint", "missing.ckpt", "--data", "x.jsonl"]));
    assert_eq!(e["error"], "io");
    let e = error_json(&dft(d, &["train", "--bogus"]));
    assert_eq!(e["error"], "usage");
    assert_eq!(dft(d, &["train", "--bogus"]).status.code(), Some(2));

    std::fs::write(d.join("bad.toml"), "output_dir = 3\n").unwrap();
    let e = error_json(&dft(d, &["train", "--config", "bad.toml"]));
    assert_eq!(e["error"], "config");

    setup(d);
    let deep = CONFIG.replace("layer_j = 2", "layer_j = 7");
    std::fs::write(d.join("deep.toml"), deep).unwrap();
    let e = error_json(&dft(d, &["train", "--config", "deep.toml"]));
    assert_eq!(e["error"], "config");
    assert!(!d.join("run/manifest.json").exists());

    std::fs::write(d.join("garbage.jsonl"), "{not json\n").unwrap();
    let e = error_json(&dft(d, &["gen-data", "--task", "nope"]));
    assert_eq!(e["error"], "usage");
    let e = error_json(&dft(d, &["plot", "--kind", "entropy", "--input", "garbage.jsonl", "--output", "x.svg"]));
    assert_eq!(e["error"], "parse");
}
