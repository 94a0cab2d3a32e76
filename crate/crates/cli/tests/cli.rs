use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn prag(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prag")).args(args).env("PRAG_ROOT", root).env_remove("PRAG_BIND").output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn cost_reproduces_large_model_storage() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&prag(dir.path(), &["cost", "--layers", "32", "--hidden", "4096", "--ffn", "14336", "--rank", "2", "--bytes", "2"]));
    assert!(out.contains("2,359,296 params / 4.72 MB"), "{out}");
    let out = ok(&prag(dir.path(), &["cost", "--doc-tokens", "100", "--q-tokens", "100", "--t", "6"]));
    assert!(out.contains("10,240 params"), "{out}");
    assert!(out.contains("total 1200 token-equivalents"), "{out}");
    assert!(out.contains("saved 600"), "{out}");
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = prag(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(prag(dir.path(), &["query"]).status.code(), Some(2));
    assert_eq!(prag(dir.path(), &["query", "q", "--mode", "rag"]).status.code(), Some(2));
    assert_eq!(prag(dir.path(), &["parameterize", "--jobs", "0"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"retrieval": {"k": 3, "kk": 1}}"#).unwrap();
    assert_eq!(prag(dir.path(), &["--config", cfg.to_str().unwrap(), "cost"]).status.code(), Some(2));
    fs::write(&cfg, r#"{"retrieval": {"b": 3.0}}"#).unwrap();
    assert_eq!(prag(dir.path(), &["--config", cfg.to_str().unwrap(), "cost"]).status.code(), Some(2));
    assert_eq!(prag(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = prag(dir.path(), &["query", "Where?"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn gen_corpus_is_deterministic_and_echoes_config() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for root in [a.path(), b.path()] {
        let out = prag(root, &["gen-corpus", "--docs", "64", "--seed", "7"]);
        ok(&out);
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("resolved config") && err.contains("\"seed\":7"), "{err}");
    }
    for f in ["corpus.jsonl", "qa.jsonl"] {
        let x = fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, fs::read(b.path().join(f)).unwrap());
        assert!(!x.is_empty());
    }
    assert_eq!(fs::read_to_string(a.path().join("corpus.jsonl")).unwrap().lines().count(), 64);
}

const SMALL: &str = r#"{
  "model": {"n_layers": 2, "hidden": 16, "ffn_intermediate": 64, "n_heads": 2, "max_seq_len": 320},
  "pretrain": {"steps": 3, "batch_size": 2},
  "mix": {"docs": 12},
  "service": {"max_new_tokens": 4},
  "retrieval": {"k": 1}
}"#;

fn adapters(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir.join("adapters"))
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn offline_then_online_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg: PathBuf = root.join("run.json");
    fs::write(&cfg, SMALL).unwrap();
    let c = cfg.to_str().unwrap();
    ok(&prag(root, &["--config", c, "gen-corpus", "--docs", "4"]));
    let out = ok(&prag(root, &["--config", c, "pretrain"]));
    assert!(out.contains("fingerprint"));
    ok(&prag(root, &["--config", c, "index"]));

    let one = ok(&prag(root, &["--config", c, "parameterize", "--jobs", "1"]));
    assert!(one.contains("parameterized 4 documents"), "{one}");
    let serial = adapters(&root.join("parametric"));
    assert_eq!(serial.len(), 4);
    let lines = fs::read_to_string(root.join("parametric/train_manifest.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["doc_id", "final_loss", "tokens", "seconds", "adapter_path"] {
            assert!(v.get(key).is_some(), "{line}");
        }
    }

    // Resuming trains nothing; --overwrite with 3 jobs reproduces the serial adapters.
    let again = prag(root, &["--config", c, "parameterize"]);
    ok(&again);
    assert!(String::from_utf8_lossy(&again.stderr).contains("4 already parameterized, 0 to train"));
    ok(&prag(root, &["--config", c, "parameterize", "--jobs", "3", "--overwrite"]));
    assert_eq!(adapters(&root.join("parametric")), serial);

    let q = fs::read_to_string(root.join("qa.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(q.lines().next().unwrap()).unwrap();
    let question = first["question"].as_str().unwrap();
    let json = ok(&prag(root, &["--config", c, "query", question, "--mode", "parametric", "--json"]));
    let r: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(r["mode"], "parametric");
    assert_eq!(r["merged_doc_ids"].as_array().unwrap().len(), 1);

    ok(&prag(root, &["--config", c, "warmup", "--questions", "6"]));
    assert!(root.join("warmup.pra").exists());
    ok(&prag(root, &["--config", c, "parameterize", "--overwrite", "--warmup-init", "--limit", "1"]));

    let table = ok(&prag(root, &["--config", c, "eval", "--modes", "closed_book,parametric,in_context", "--limit", "3"]));
    assert!(table.contains("parametric") && table.contains("closed_book"), "{table}");
    let report: serde_json::Value = serde_json::from_slice(&fs::read(root.join("reports/eval.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 9);
}
