use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use qdsum::model::{checkpoint, ModelConfig};
use qdsum::synthetic::periodic_model;
use qdsum::tokenizer::Vocabulary;
use serde_json::Value;

fn qdsum(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qdsum"))
        .args(args)
        .output()
        .unwrap()
}

fn code(args: &[&str]) -> i32 {
    qdsum(args).status.code().unwrap()
}

/// Byte vocabulary plus a model whose greedy output cycles through "abc",
/// so decodes never stop early and step counts are predictable.
fn fixture(dir: &Path) -> (String, String) {
    let vocab = Vocabulary::bytes_only();
    let mut c = ModelConfig::new(1, 2, 32, vocab.size(), 256);
    c.ffn_hidden = 32;
    let cycle: Vec<u32> = b"abc".iter().map(|&b| b as u32).collect();
    let m = periodic_model(c, &cycle, 1).unwrap();
    let v = dir.join("vocab.txt");
    let k = dir.join("model.ckpt");
    vocab.save(&v).unwrap();
    checkpoint::save(&k, &m).unwrap();
    (
        v.to_string_lossy().into_owned(),
        k.to_string_lossy().into_owned(),
    )
}

fn decode_json(args: &[&str]) -> Value {
    let out = qdsum(args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["decode", "--bogus"]), 2);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["bench", "--help"]), 0);
}

#[test]
fn bad_config_files_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let (v, k) = fixture(dir.path());
    let unknown = dir.path().join("unknown.conf");
    std::fs::write(&unknown, "serve.workers = 2\nserve.wrokers = 3\n").unwrap();
    let malformed = dir.path().join("malformed.conf");
    std::fs::write(&malformed, "decode.strategy\n").unwrap();
    let bad_value = dir.path().join("value.conf");
    std::fs::write(&bad_value, "decode.strategy = sideways\n").unwrap();
    let missing = dir.path().join("missing.conf");
    for conf in [&unknown, &malformed, &bad_value, &missing] {
        let c = conf.to_str().unwrap();
        let args = ["--config", c, "decode", "--checkpoint", &k, "--vocab", &v, "--query", "q", "--content", "c"];
        assert_eq!(code(&args), 2, "{c}");
    }
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let (v, _) = fixture(dir.path());
    let absent = dir.path().join("absent.ckpt");
    let args = ["decode", "--checkpoint", absent.to_str().unwrap(), "--vocab", &v, "--query", "q", "--content", "c"];
    assert_eq!(code(&args), 1);
    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let args = ["decode", "--checkpoint", garbage.to_str().unwrap(), "--vocab", &v, "--query", "q", "--content", "c"];
    assert_eq!(code(&args), 1);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let (v, k) = fixture(dir.path());
    let conf = dir.path().join("run.conf");
    std::fs::write(
        &conf,
        format!(
            "# decoding\ndecode.strategy = lookahead(4,6,4)\ndecode.max_new_tokens = 40\nmodel.vocab = {v}\nmodel.checkpoint = {k}\n"
        ),
    )
    .unwrap();
    let c = conf.to_str().unwrap();
    let base = ["--config", c, "decode", "--query", "q", "--content", "c", "--budget", "200"];

    let from_file = decode_json(&base);
    assert_eq!(from_file["tokens"], 40);
    assert!(from_file["ar"].as_f64().unwrap() > 1.0);

    let mut args = base.to_vec();
    args.extend(["--strategy", "greedy", "--max-new-tokens", "9"]);
    let flagged = decode_json(&args);
    assert_eq!(flagged["tokens"], 9);
    assert_eq!(flagged["forward_steps"], 9);
    assert_eq!(flagged["ar"], 1.0);
    assert_eq!(flagged["summary"], "abcabcabc");
}

#[test]
fn serve_over_stdin_keeps_order() {
    let dir = tempfile::tempdir().unwrap();
    let (v, k) = fixture(dir.path());
    let mut child = Command::new(env!("CARGO_BIN_EXE_qdsum"))
        .args(["serve", "--checkpoint", &k, "--vocab", &v, "--workers", "3", "--max-new-tokens", "6", "--lookahead", "4,6,4"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    {
        let mut stdin = child.stdin.take().unwrap();
        for i in 0..10 {
            if i == 4 {
                writeln!(stdin, "garbage").unwrap();
            }
            writeln!(stdin, r#"{{"query":"q{i}","content":"c"}}"#).unwrap();
        }
    }
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let lines: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 11);
    assert_eq!(lines[4]["line"], 5);
    for (i, l) in lines.iter().enumerate().filter(|(i, _)| *i != 4) {
        assert_eq!(l["summary"], "abcabc", "line {i}");
    }
}

#[test]
fn bench_prints_table_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let (v, k) = fixture(dir.path());
    let data = dir.path().join("bench.jsonl");
    std::fs::write(
        &data,
        "{\"query\":\"q\",\"content\":\"c\",\"references\":[\"abcabc\"]}\n",
    )
    .unwrap();
    let json = dir.path().join("bench.json");
    let out = qdsum(&[
        "bench", "--checkpoint", &k, "--vocab", &v, "--data", data.to_str().unwrap(),
        "--requests", "3", "--max-new-tokens", "30", "--lookahead", "4,6,4",
        "--json", json.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("lookahead(4,6,4)"));
    let table: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let row = &table["rows"][0]["report"];
    assert_eq!(row["requests"], 3);
    assert!(row["ar"].as_f64().unwrap() > 1.0);
    assert!(row["rouge2"].is_number());
}

#[test]
fn data_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    assert_eq!(code(&["synth", "--n", "40", "--out", &p("train.jsonl")]), 0);
    assert_eq!(code(&["synth", "--n", "5", "--seed", "3", "--eval", "--out", &p("eval.jsonl")]), 0);
    assert_eq!(code(&["vocab-train", "--input", &p("train.jsonl"), "--size", "300", "--out", &p("vocab.txt")]), 0);
    assert_eq!(code(&["curate", "--vocab", &p("vocab.txt"), "--input", &p("train.jsonl"), "--out", &p("curated.jsonl")]), 0);
    assert_eq!(
        code(&[
            "train-sft", "--vocab", &p("vocab.txt"), "--data", &p("curated.jsonl"), "--out-dir", &p("sft"),
            "--layers", "1", "--heads", "2", "--hidden", "16", "--max-seq-len", "192",
            "--epochs", "1", "--batch-size", "8",
        ]),
        0
    );
    let sft = p("sft/final.ckpt");
    assert_eq!(code(&["quantize", "--checkpoint", &sft, "--mode", "int8", "--out", &p("int8.ckpt")]), 0);
    let out = qdsum(&["eval", "--checkpoint", &p("int8.ckpt"), "--vocab", &p("vocab.txt"), "--data", &p("eval.jsonl"), "--max-new-tokens", "8"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let gsb = dir.path().join("gsb.jsonl");
    std::fs::write(&gsb, "{\"query_id\":\"1\",\"label\":\"good\"}\n{\"query_id\":\"2\",\"label\":\"same\"}\n").unwrap();
    let out = qdsum(&["gsb", "--input", gsb.to_str().unwrap()]);
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("+50.00%"));
}

#[test]
fn prefbuild_simulates_clicks_from_attractiveness() {
    let dir = tempfile::tempdir().unwrap();
    let cands = dir.path().join("cands.jsonl");
    let mut text = String::new();
    for q in 0..5 {
        text.push_str(&format!(
            "{{\"query_id\":\"q{q}\",\"query\":\"Q\",\"content\":\"C\",\"candidates\":[\"good\",\"bad\"],\"attractiveness\":[0.9,0.05]}}\n"
        ));
    }
    std::fs::write(&cands, text).unwrap();
    let out_path = dir.path().join("prefs.jsonl");
    let log_path = dir.path().join("log.jsonl");
    let out = qdsum(&[
        "prefbuild", "--candidates", cands.to_str().unwrap(), "--out", out_path.to_str().unwrap(),
        "--log-out", log_path.to_str().unwrap(), "--impressions", "100", "--seed", "1",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let prefs: Vec<Value> = std::fs::read_to_string(&out_path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(prefs.len(), 5);
    assert!(prefs.iter().all(|p| p["chosen"] == "good" && p["rejected"] == "bad"));
    assert_eq!(std::fs::read_to_string(&log_path).unwrap().lines().count(), 500);

    // rebuilding from the saved log gives the same pairs
    let again = dir.path().join("again.jsonl");
    let out = qdsum(&[
        "prefbuild", "--candidates", cands.to_str().unwrap(), "--log", log_path.to_str().unwrap(),
        "--out", again.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        std::fs::read_to_string(&again).unwrap(),
        std::fs::read_to_string(&out_path).unwrap()
    );
}
