use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn zett(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zett"))
        .args(args)
        .output()
        .expect("failed to launch zett binary")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {text}"))
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "expected exit 0, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

#[test]
fn help_and_version_exit_zero() {
    assert_exit(&zett(&["--help"]), 0);
    assert_exit(&zett(&["--version"]), 0);
    assert_exit(&zett(&["extract", "--help"]), 0);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = zett(&["transmogrify"]);
    assert_exit(&out, 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "usage text missing: {stderr}");
}

#[test]
fn missing_subcommand_and_missing_flags_are_usage_errors() {
    assert_exit(&zett(&[]), 1);
    assert_exit(&zett(&["split"]), 1);
}

#[test]
fn greedy_conflicts_with_beam() {
    let out = zett(&[
        "extract", "--ckpt", "x", "--data", "y", "--relations", "z", "--out", "o",
        "--greedy", "--beam", "4",
    ]);
    assert_exit(&out, 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--greedy") || stderr.contains("--beam"), "{stderr}");
}

#[test]
fn split_writes_a_valid_fold_and_rejects_bad_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    let reg = path(dir.path(), "reg.json");
    let data = path(dir.path(), "data.jsonl");
    assert_success(&zett(&[
        "synthetic", "generate", "--n", "1", "--seed", "0",
        "--out-data", &data, "--out-relations", &reg,
    ]));

    let fold = path(dir.path(), "fold.json");
    let out = zett(&["split", "--relations", &reg, "--m", "5", "--v", "5", "--seed", "0", "--out", &fold]);
    assert_success(&out);
    let report = stdout_json(&out);
    assert_eq!(report["train"], 10);
    assert_eq!(report["validation"], 5);
    assert_eq!(report["test"], 5);
    assert!(dir.path().join("fold.json").exists());

    // 20 relations cannot yield an m=20, v=5 split: data error, not usage.
    let bad = zett(&["split", "--relations", &reg, "--m", "20", "--v", "5", "--seed", "0", "--out", &fold]);
    assert_exit(&bad, 2);
}

#[test]
fn missing_input_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = zett(&[
        "split", "--relations", &path(dir.path(), "nope.json"),
        "--m", "2", "--v", "2", "--out", &path(dir.path(), "fold.json"),
    ]);
    assert_exit(&out, 2);
}

/// Writes a singles-only copy of a generated dataset, keeping `keep` examples.
fn write_singles(src: &Path, dst: &Path, keep: usize) -> usize {
    let body = fs::read_to_string(src).unwrap();
    let mut lines = Vec::new();
    for line in body.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["triplets"].as_array().unwrap().len() == 1 {
            lines.push(line.to_string());
            if lines.len() == keep {
                break;
            }
        }
    }
    fs::write(dst, lines.join("\n") + "\n").unwrap();
    lines.len()
}

struct TrainedFixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    reg: String,
    data: String,
    fold: String,
    ckpt: String,
}

/// One tiny trained model shared by the pipeline tests: 1 epoch, d16.
fn trained_fixture() -> TrainedFixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let reg = path(&root, "reg.json");
    let data = path(&root, "data.jsonl");
    let fold = path(&root, "fold.json");
    let ckpt = path(&root, "model.zett");

    assert_success(&zett(&[
        "synthetic", "generate", "--n", "2", "--seed", "0",
        "--out-data", &data, "--out-relations", &reg,
    ]));
    assert_success(&zett(&[
        "split", "--relations", &reg, "--m", "5", "--v", "5", "--seed", "0", "--out", &fold,
    ]));

    let config = path(&root, "tiny.json");
    fs::write(
        &config,
        serde_json::json!({
            "model.d_model": 16,
            "model.heads": 2,
            "model.encoder_layers": 1,
            "model.decoder_layers": 1,
            "model.ffn_dim": 32,
            "model.max_input_len": 64,
            "model.max_output_len": 16,
            "train.epochs": 2,
            "train.batch_size": 8,
            "train.learning_rate": 1e-3,
        })
        .to_string(),
    )
    .unwrap();

    let run_dir = path(&root, "run-train");
    let out = zett(&[
        "train", "--config", &config, "--data", &data, "--relations", &reg,
        "--fold", &fold, "--out", &ckpt, "--epochs", "1", "--run-dir", &run_dir,
    ]);
    assert_success(&out);
    TrainedFixture { _dir: dir, root, reg, data, fold, ckpt }
}

#[test]
fn end_to_end_pipeline_artifacts_and_determinism() {
    let fx = trained_fixture();

    // Train artifacts: checkpoint, bound vocabulary, run-dir records.
    assert!(fx.root.join("model.zett").exists());
    assert!(fx.root.join("model.zett.vocab.json").exists());
    let resolved: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(fx.root.join("run-train/resolved_config.json")).unwrap(),
    )
    .unwrap();
    // The flag (--epochs 1) overrides the config file value (2).
    assert_eq!(resolved["train.epochs"], 1);
    assert_eq!(resolved["model.d_model"], 16);
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(fx.root.join("run-train/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["command"], "train");
    let inputs = manifest["inputs"].as_object().unwrap();
    assert!(inputs.keys().any(|k| k.ends_with("data.jsonl")));
    for hash in inputs.values() {
        assert_eq!(hash.as_str().unwrap().len(), 64);
    }
    assert!(manifest["outputs"].as_object().unwrap().keys().any(|k| k.ends_with("model.zett")));

    // Extraction on the test segment; run twice, expect identical bytes.
    let gold = path(&fx.root, "gold.jsonl");
    write_singles(Path::new(&fx.data), Path::new(&gold), 10);
    let preds1 = path(&fx.root, "preds1.jsonl");
    let preds2 = path(&fx.root, "preds2.jsonl");
    for preds in [&preds1, &preds2] {
        let out = zett(&[
            "extract", "--ckpt", &fx.ckpt, "--data", &gold, "--relations", &fx.reg,
            "--fold", &fx.fold, "--segment", "test", "--mode", "single",
            "--beam", "2", "--out", preds,
        ]);
        assert_success(&out);
    }
    let bytes1 = fs::read(&preds1).unwrap();
    let bytes2 = fs::read(&preds2).unwrap();
    assert!(!bytes1.is_empty());
    assert_eq!(bytes1, bytes2, "same seed and inputs must give identical prediction bytes");

    // Every gold example got a record; the file is one JSON object per line.
    let n_lines = String::from_utf8(bytes1).unwrap().lines().count();
    assert_eq!(n_lines, 10);

    // Scoring the prediction file yields a bounded accuracy.
    let out = zett(&[
        "eval", "--mode", "single", "--gold", &gold, "--relations", &fx.reg, "--pred", &preds1,
    ]);
    assert_success(&out);
    let score = stdout_json(&out);
    let acc = score["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc), "accuracy {acc} out of range");
}

#[test]
fn tampered_vocabulary_is_refused() {
    let fx = trained_fixture();
    let vpath = fx.root.join("model.zett.vocab.json");
    let mut vocab: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&vpath).unwrap()).unwrap();
    vocab["tokens"].as_array_mut().unwrap().push(serde_json::json!("zzz_tampered"));
    fs::write(&vpath, vocab.to_string()).unwrap();

    let gold = path(&fx.root, "gold.jsonl");
    write_singles(Path::new(&fx.data), Path::new(&gold), 3);
    let out = zett(&[
        "extract", "--ckpt", &fx.ckpt, "--data", &gold, "--relations", &fx.reg,
        "--out", &path(&fx.root, "preds.jsonl"),
    ]);
    assert_exit(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("does not match"), "{stderr}");
}

#[test]
fn kappa_matches_the_frozen_contingency() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("annotations.csv");
    let mut body = String::from("example_id,rank,head,relation,tail,score,annotator1,annotator2\n");
    let mut add = |n: usize, a: &str, b: &str, offset: usize| {
        for i in 0..n {
            body.push_str(&format!("ex-{},1,h,r,t,-1.0,{a},{b}\n", offset + i));
        }
    };
    add(80, "true", "true", 0);
    add(5, "true", "false", 80);
    add(5, "false", "true", 85);
    add(10, "false", "false", 90);
    fs::write(&csv, body).unwrap();

    let out = zett(&["humaneval", "kappa", "--annotations", &csv.display().to_string()]);
    assert_success(&out);
    let report = stdout_json(&out);
    let kappa = report["kappa"].as_f64().unwrap();
    assert!((kappa - 0.6078431372549019).abs() < 1e-4, "kappa {kappa}");
}

#[test]
fn humaneval_export_writes_k_rows_per_context() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("preds.jsonl");
    let mut body = String::new();
    for i in 0..8 {
        body.push_str(&format!(
            "{}\n",
            serde_json::json!({
                "id": format!("ex-{i}"),
                "predictions": [
                    {"head": "a", "relation": "r", "tail": "b", "score": -0.5},
                    {"head": "a", "relation": "r", "tail": "c", "score": -0.9},
                ],
            })
        ));
    }
    fs::write(&preds, body).unwrap();

    let csv = dir.path().join("sheet.csv");
    let out = zett(&[
        "humaneval", "export", "--pred", &preds.display().to_string(),
        "--k", "2", "--contexts", "3", "--seed", "7",
        "--out", &csv.display().to_string(),
    ]);
    assert_success(&out);
    let report = stdout_json(&out);
    assert_eq!(report["records"], 6);
    let lines = fs::read_to_string(&csv).unwrap().lines().count();
    assert_eq!(lines, 7, "header plus 3 contexts x 2 ranks");
}

#[test]
fn templates_mine_emits_the_spliced_pattern() {
    let dir = tempfile::tempdir().unwrap();
    let reg = dir.path().join("reg.json");
    fs::write(
        &reg,
        serde_json::json!([{
            "id": "employed_by",
            "name": "employed by",
            "description": "employer of a person",
            "templates": ["<head> works at <tail> ."],
        }])
        .to_string(),
    )
    .unwrap();
    let data = dir.path().join("corpus.jsonl");
    fs::write(
        &data,
        format!(
            "{}\n",
            serde_json::json!({
                "id": "e1",
                "text": "alice is employed by acme .",
                "triplets": [{"head": "alice", "relation": "employed_by", "tail": "acme"}],
            })
        ),
    )
    .unwrap();

    let sets = dir.path().join("sets.json");
    let out = zett(&[
        "templates", "mine", "--data", &data.display().to_string(),
        "--relations", &reg.display().to_string(), "--relation", "employed_by",
        "--out", &sets.display().to_string(),
    ]);
    assert_success(&out);
    let report = stdout_json(&out);
    assert_eq!(report["candidates"][0]["pattern"], "<head> is employed by <tail>");
    assert_eq!(report["candidates"][0]["support"], 1);
    let saved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&sets).unwrap()).unwrap();
    assert_eq!(saved["employed_by"][0], "<head> is employed by <tail>");
}

#[test]
fn paraphrase_select_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cands = dir.path().join("candidates.json");
    fs::write(
        &cands,
        serde_json::json!([
            "<head> leads <tail> .",
            "<head> leads <tail> .",
            "<head> runs <tail> .",
        ])
        .to_string(),
    )
    .unwrap();
    let out = zett(&[
        "templates", "paraphrase-select", "--candidates", &cands.display().to_string(),
        "--policy", "top1",
    ]);
    assert_success(&out);
    assert_eq!(stdout_json(&out)["selected"], "<head> leads <tail> .");
}

#[test]
fn unknown_config_key_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(&config, r#"{"train.epoochs": 3}"#).unwrap();
    let reg = dir.path().join("reg.json");
    let data = dir.path().join("data.jsonl");
    assert_success(&zett(&[
        "synthetic", "generate", "--n", "1",
        "--out-data", &data.display().to_string(),
        "--out-relations", &reg.display().to_string(),
    ]));
    let out = zett(&[
        "split", "--config", &config.display().to_string(),
        "--relations", &reg.display().to_string(),
        "--m", "5", "--v", "5", "--out", &dir.path().join("f.json").display().to_string(),
    ]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));
}
