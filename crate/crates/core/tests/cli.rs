use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[synthetic]
frequent_labels = 6
few_labels = 2
zero_labels = 2
groups = 2
train_docs = 80
dev_docs = 12
test_docs = 12
tokens_per_doc = 10

[model]
embed_dim = 6
filters = 6
gcn_hidden = 4
gcn_out = 4
fusion_dim = 4

[train]
epochs = 1

[graphs]
k = 3
"#;

fn kamg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kamg")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the small base config and synthesizes a corpus into `dir/data`.
fn synth(dir: &Path, seed: &str) -> std::path::PathBuf {
    let base = dir.join("base.toml");
    std::fs::write(&base, SMALL).unwrap();
    let data = dir.join("data");
    let out = kamg(&["synth", "--config", path(&base), "--seed", seed, "--out", path(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn unknown_subcommand_fails() {
    let out = kamg(&["frobnicate"]);
    assert!(!out.status.success());
}

#[test]
fn evaluate_requires_checkpoint() {
    let out = kamg(&["evaluate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
}

#[test]
fn bad_fusion_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = kamg(&["synth", "--fusion", "sideways", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn oracle_check_passes() {
    let out = kamg(&["oracle-check", "--trials", "200"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS metric oracle"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn synth_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = synth(a.path(), "4");
    let db = synth(b.path(), "4");
    for f in ["labels.jsonl", "corpus.jsonl", "taxonomy.tsv", "vectors.txt", "config.toml", "manifest.jsonl"] {
        assert_eq!(std::fs::read(da.join(f)).unwrap(), std::fs::read(db.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "2");
    let cfg = data.join("config.toml");
    let run = dir.path().join("run");

    let out = kamg(&["build-graphs", "--config", path(&cfg), "--out", path(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["hierarchy.graph", "similarity.graph", "cooccurrence.graph", "graph_stats.jsonl"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let out = kamg(&["train", "--config", path(&cfg), "--graphs", "g,s", "--out", path(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("checkpoint.bin");
    assert!(ckpt.exists() && run.join("history.jsonl").exists());

    let out = kamg(&[
        "evaluate", "--config", path(&cfg), "--graphs", "g,s", "--K", "1,3", "--out", path(&run),
        "--checkpoint", path(&ckpt),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(run.join("report.jsonl")).unwrap();
    assert!(report.lines().count() > 0);

    // A checkpoint trained on {g,s} cannot be evaluated as {g}.
    let out = kamg(&[
        "evaluate", "--config", path(&cfg), "--graphs", "g", "--out", path(&run), "--checkpoint", path(&ckpt),
    ]);
    assert_eq!(out.status.code(), Some(1));

    std::fs::write(&ckpt, &std::fs::read(&ckpt).unwrap()[..100]).unwrap();
    let out = kamg(&[
        "evaluate", "--config", path(&cfg), "--graphs", "g,s", "--out", path(&run), "--checkpoint", path(&ckpt),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_covers_every_subset() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "3");
    let run = dir.path().join("ablate");
    let out = kamg(&["ablate", "--config", path(&data.join("config.toml")), "--K", "3", "--out", path(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = std::fs::read_to_string(run.join("ablation.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 11);
    let table = std::fs::read_to_string(run.join("ablation.txt")).unwrap();
    for h in ["Frequent", "Few", "Zero", "Overall"] {
        assert!(table.contains(h), "{h}");
    }
}
