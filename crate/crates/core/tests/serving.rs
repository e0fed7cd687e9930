use std::io::Cursor;

use qdsum::decode::{summarize, Strategy};
use qdsum::model::{ModelConfig, ParameterSet};
use qdsum::serve::{run_bench, serve_loop, BenchLimit, Request, ServeConfig};
use qdsum::synthetic::periodic_model;
use qdsum::tokenizer::Vocabulary;
use serde_json::Value;

fn model(vocab: &Vocabulary) -> ParameterSet {
    let mut c = ModelConfig::new(2, 2, 32, vocab.size(), 320);
    c.ffn_hidden = 64;
    ParameterSet::init(c, 5).unwrap()
}

fn config(workers: usize, max_batch: usize, strategy: Strategy) -> ServeConfig {
    let mut c = ServeConfig {
        workers,
        max_batch,
        budget: 16,
        ..ServeConfig::default()
    };
    c.decode.strategy = strategy;
    c.decode.max_new_tokens = 16;
    c
}

fn request(i: usize) -> Request {
    Request {
        query: format!("query {i}"),
        title: format!("t{}", i % 3),
        content: "some words ".repeat(i % 5 + 1),
        references: Vec::new(),
    }
}

fn serve(p: &ParameterSet, v: &Vocabulary, cfg: &ServeConfig, input: &str) -> (Vec<Value>, qdsum::serve::ServeSummary) {
    let mut out = Vec::new();
    let summary = serve_loop(p, v, cfg, Cursor::new(input.as_bytes()), &mut out).unwrap();
    let lines = String::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    (lines, summary)
}

#[test]
fn empty_input_gives_no_output() {
    let v = Vocabulary::bytes_only();
    let p = model(&v);
    let (lines, s) = serve(&p, &v, &config(2, 4, Strategy::Greedy), "");
    assert!(lines.is_empty());
    assert_eq!((s.requests, s.failures), (0, 0));
    let (lines, _) = serve(&p, &v, &config(2, 4, Strategy::Greedy), "\n  \n");
    assert!(lines.is_empty());
}

#[test]
fn responses_come_back_in_input_order() {
    let v = Vocabulary::bytes_only();
    let p = model(&v);
    let reqs: Vec<Request> = (0..20).map(request).collect();
    let input: String = reqs
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect();
    for (workers, max_batch) in [(1, 1), (3, 2), (4, 16)] {
        let cfg = config(workers, max_batch, Strategy::Lookahead { w: 4, n: 6, v: 4 });
        let (lines, s) = serve(&p, &v, &cfg, &input);
        assert_eq!(lines.len(), reqs.len());
        assert_eq!((s.requests, s.failures), (20, 0));
        for (r, line) in reqs.iter().zip(&lines) {
            let want = summarize(&p, &v, &r.input(), &cfg.decode, cfg.budget).unwrap();
            assert_eq!(line["summary"], want.text.as_str());
        }
    }
}

#[test]
fn malformed_lines_are_flagged_and_counted() {
    let v = Vocabulary::bytes_only();
    let p = model(&v);
    let good = serde_json::to_string(&request(1)).unwrap();
    let input = format!("{good}\n{{not json\n\n{{\"title\":\"no query\"}}\n{good}\n");
    let (lines, s) = serve(&p, &v, &config(2, 3, Strategy::Greedy), &input);
    assert_eq!(lines.len(), 4);
    assert!(lines[0].get("summary").is_some());
    assert_eq!(lines[1]["line"], 2);
    assert_eq!(lines[2]["line"], 4);
    assert!(lines[2]["error"].as_str().unwrap().contains("query"));
    assert!(lines[3].get("summary").is_some());
    assert_eq!(s.requests, 4);
    assert_eq!(s.failures, 2);
}

#[test]
fn invalid_utf8_fails_only_its_own_line() {
    let v = Vocabulary::bytes_only();
    let p = model(&v);
    let good = serde_json::to_string(&request(2)).unwrap();
    let mut input = format!("{good}\r\n").into_bytes();
    input.extend(b"{\"query\":\"\xff\xfe\"}\n");
    input.extend(format!("{good}\n").into_bytes());
    let mut out = Vec::new();
    let s = serve_loop(&p, &v, &config(2, 2, Strategy::Greedy), Cursor::new(input), &mut out).unwrap();
    let lines: Vec<Value> = String::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].get("summary").is_some());
    assert_eq!(lines[1]["line"], 2);
    assert!(lines[1]["error"].as_str().unwrap().to_lowercase().contains("utf-8"));
    assert_eq!(lines[0]["summary"], lines[2]["summary"]);
    assert_eq!((s.requests, s.failures), (3, 1));
}

#[test]
fn reruns_are_deterministic() {
    let v = Vocabulary::bytes_only();
    let p = model(&v);
    let input: String = (0..8)
        .map(|i| serde_json::to_string(&request(i)).unwrap() + "\n")
        .collect();
    let cfg = config(3, 4, Strategy::Lookahead { w: 5, n: 5, v: 5 });
    let summaries = |lines: Vec<Value>| -> Vec<Value> {
        lines.into_iter().map(|l| l["summary"].clone()).collect()
    };
    let (a, _) = serve(&p, &v, &cfg, &input);
    let (b, _) = serve(&p, &v, &cfg, &input);
    assert_eq!(summaries(a), summaries(b));
}

#[test]
fn bench_accounting() {
    let v = Vocabulary::bytes_only();
    let p = model(&v);
    let data: Vec<Request> = (0..5).map(request).collect();
    let greedy = run_bench(&p, &v, &data, &config(2, 4, Strategy::Greedy), BenchLimit::Count(12)).unwrap();
    assert_eq!(greedy.requests, 12);
    assert_eq!(greedy.failures, 0);
    assert_eq!(greedy.ar, 1.0);
    assert_eq!(greedy.forward_steps, greedy.tokens);
    assert!(greedy.qps > 0.0);
    assert!(greedy.inf_t_p50_ms <= greedy.inf_t_p95_ms);
    assert!(greedy.rouge2.is_none());

    let timed = run_bench(
        &p,
        &v,
        &data,
        &config(1, 4, Strategy::Greedy),
        BenchLimit::Duration(std::time::Duration::from_millis(200)),
    )
    .unwrap();
    assert!(timed.requests >= 1);
    assert_eq!(timed.failures, 0);
}

#[test]
fn bench_counts_failures_with_completions() {
    // a context shorter than the prompt template makes every request fail
    let v = Vocabulary::bytes_only();
    let mut c = ModelConfig::new(1, 2, 16, v.size(), 12);
    c.ffn_hidden = 16;
    let p = ParameterSet::init(c, 1).unwrap();
    let data = vec![request(3)];
    let r = run_bench(&p, &v, &data, &config(2, 4, Strategy::Greedy), BenchLimit::Count(6)).unwrap();
    assert_eq!(r.requests, 6);
    assert_eq!(r.failures, 6);
}

#[test]
fn lookahead_bench_on_periodic_model_reports_ar_above_one() {
    let v = Vocabulary::bytes_only();
    let mut c = ModelConfig::new(1, 2, 32, v.size(), 320);
    c.ffn_hidden = 32;
    let cycle: Vec<u32> = b"xyz".iter().map(|&b| b as u32).collect();
    let m = periodic_model(c, &cycle, 1).unwrap();
    let mut cfg = config(1, 4, Strategy::Lookahead { w: 4, n: 6, v: 4 });
    cfg.decode.max_new_tokens = 64;
    cfg.budget = 64;
    let data = vec![Request {
        references: vec!["xyzxyz".into()],
        ..request(0)
    }];
    let r = run_bench(&m, &v, &data, &cfg, BenchLimit::Count(2)).unwrap();
    assert!(r.ar > 1.5, "AR {}", r.ar);
    assert!(r.forward_steps < r.tokens);
    assert!(r.rouge2.is_some());
}
