use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn depcause(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depcause"))
        .args(args)
        .env_remove("DEPCAUSE_SEED")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn gen_data_is_reproducible_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = depcause(&["-q", "gen-data", "--n", "2000", "--seed", "7", "--out", p(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["train.jsonl", "test.jsonl", "validation.jsonl", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    assert_eq!(
        (lines(&a.join("train.jsonl")), lines(&a.join("test.jsonl")), lines(&a.join("validation.jsonl"))),
        (1200, 600, 200)
    );
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["generator"]["seed"], 7);

    let o = depcause(&["validate", p(&a.join("train.jsonl")), p(&a.join("test.jsonl"))]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn gen_data_beyond_capacity_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = depcause(&["gen-data", "--n", "1000000", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at most"));
}

#[test]
fn validate_flags_a_broken_tree() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conllu");
    fs::write(
        &bad,
        "# sent_id = loop\n# cause = 0..0\n# effect = 2..2\n1\tA\ta\tNOUN\t_\t_\t2\tnsubj\t_\t_\n2\tb\tb\tVERB\t_\t_\t1\tdep\t_\t_\n3\tc\tc\tNOUN\t_\t_\t2\tobj\t_\t_\n\n",
    )
    .unwrap();
    let o = depcause(&["validate", p(&bad)]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn missing_input_and_bad_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = depcause(&["train", "--train", "/nonexistent/train.jsonl", "--out-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(depcause(&["train", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_on_the_default_probe() {
    let o = depcause(&["-q", "gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let o = depcause(&["-q", "gradcheck", "--tolerance", "1e-12"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_eval_predict_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let o = depcause(&["-q", "gen-data", "--n", "40", "--seed", "3", "--out", p(&data)]);
    assert!(o.status.success());
    let o = depcause(&[
        "-q",
        "train",
        "--train",
        p(&data.join("train.jsonl")),
        "--val",
        p(&data.join("validation.jsonl")),
        "--out-dir",
        p(&run),
        "--d-model",
        "16",
        "--left-layers",
        "1",
        "--right-layers",
        "1",
        "--max-epochs",
        "60",
        "--batch-size",
        "8",
        "--lr",
        "3e-3",
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.toml", "history.csv", "checkpoint/manifest.json", "checkpoint/params.bin", "checkpoint/vocab.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss"));

    let ckpt = run.join("checkpoint");
    let report = dir.path().join("report.json");
    let o = depcause(&["-q", "eval", "--checkpoint", p(&ckpt), "--data", p(&data.join("train.jsonl")), "--json", p(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("exact match"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(report["sentences"], 24);
    assert!(report["micro"]["f1"].as_f64().unwrap() > 0.5);

    let o = depcause(&[
        "-q",
        "predict",
        "--checkpoint",
        p(&ckpt),
        "--text-with-annotations",
        "Stress/NOUN/3 can/AUX/3 cause/VERB/0 insomnia/NOUN/3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(line["tokens"].as_array().unwrap().len(), 4);
    assert_eq!(line["labels"].as_array().unwrap().len(), 4);

    let preds = dir.path().join("preds.jsonl");
    let o = depcause(&["-q", "predict", "--checkpoint", p(&ckpt), "--data", p(&data.join("test.jsonl")), "--out", p(&preds)]);
    assert!(o.status.success());
    assert_eq!(lines(&preds), lines(&data.join("test.jsonl")));

    let o = depcause(&["-q", "inspect-attention", "--checkpoint", p(&ckpt), "--sentence-id", "vitamin-d", "--layer", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dump: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let adjacency = dump["adjacency"].as_array().unwrap();
    let alpha = dump["layers"][0]["heads"][0].as_array().unwrap();
    assert_eq!(alpha.len(), adjacency.len());
    for (row, mask) in alpha.iter().zip(adjacency) {
        let row = row.as_array().unwrap();
        let sum: f64 = row.iter().map(|x| x.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
        for (w, allowed) in row.iter().zip(mask.as_array().unwrap()) {
            if !allowed.as_bool().unwrap() {
                assert_eq!(w.as_f64().unwrap(), 0.0);
            }
        }
    }
}
