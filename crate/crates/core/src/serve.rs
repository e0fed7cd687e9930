//! Worker-pool serving and the throughput benchmark.
//!
//! Every request is decoded at batch size 1 with its own decode state;
//! throughput comes from running `workers` requests at once against one
//! shared, immutable model.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded};
use serde::{Deserialize, Serialize};

use crate::config::ConfigFile;
use crate::decode::{acceptance_rate, summarize, DecodeConfig, DecodeStats, Strategy};
use crate::error::{Error, Result};
use crate::eval::{rouge_n, rouge_tokenize};
use crate::model::ForwardWeights;
use crate::quant::{KvScaling, QuantMode};
use crate::tokenizer::{PromptInput, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeConfig {
    pub workers: usize,
    /// Requests allowed in flight (decoding or waiting to be written).
    pub max_batch: usize,
    pub decode: DecodeConfig,
    pub quant: QuantMode,
    pub kv_scaling: KvScaling,
    pub checkpoint: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Summary length limit in tokens.
    pub budget: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            max_batch: 16,
            decode: DecodeConfig {
                strategy: Strategy::DEFAULT_LOOKAHEAD,
                ..DecodeConfig::default()
            },
            quant: QuantMode::F32,
            kv_scaling: KvScaling::PerToken,
            checkpoint: None,
            vocab: None,
            budget: 80,
        }
    }
}

impl ServeConfig {
    /// Keys understood by [`ServeConfig::apply_file`].
    pub const KEYS: [&'static str; 11] = [
        "serve.workers",
        "serve.max_batch",
        "serve.budget",
        "decode.strategy",
        "decode.max_new_tokens",
        "decode.seed",
        "decode.pool_capacity",
        "quant.mode",
        "quant.kv_scaling",
        "model.checkpoint",
        "model.vocab",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 || self.max_batch == 0 {
            return Err(Error::Config(
                "serve needs at least one worker and max_batch >= 1".into(),
            ));
        }
        self.decode.validate()
    }

    /// Overwrites fields present in `file`; other keys are ignored.
    pub fn apply_file(&mut self, file: &ConfigFile) -> Result<()> {
        if let Some(v) = file.get("serve.workers")? {
            self.workers = v;
        }
        if let Some(v) = file.get("serve.max_batch")? {
            self.max_batch = v;
        }
        if let Some(v) = file.get("serve.budget")? {
            self.budget = v;
        }
        if let Some(v) = file.get("decode.strategy")? {
            self.decode.strategy = v;
        }
        if let Some(v) = file.get("decode.max_new_tokens")? {
            self.decode.max_new_tokens = v;
        }
        if let Some(v) = file.get("decode.seed")? {
            self.decode.seed = v;
        }
        if let Some(v) = file.get("decode.pool_capacity")? {
            self.decode.pool_capacity = v;
        }
        if let Some(v) = file.get("quant.mode")? {
            self.quant = v;
        }
        if let Some(v) = file.get("quant.kv_scaling")? {
            self.kv_scaling = v;
        }
        if let Some(v) = file.raw("model.checkpoint") {
            self.checkpoint = Some(v.into());
        }
        if let Some(v) = file.raw("model.vocab") {
            self.vocab = Some(v.into());
        }
        Ok(())
    }
}

/// A serving request; `references` are only used by the benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub query: String,
    #[serde(default)]
    pub title: String,
    pub content: String,
    #[serde(default)]
    pub references: Vec<String>,
}

impl Request {
    pub fn input(&self) -> PromptInput {
        PromptInput {
            query: self.query.clone(),
            title: self.title.clone(),
            content: self.content.clone(),
        }
    }
}

/// One line of serve output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Ok {
        summary: String,
        ar: f64,
        latency_ms: f64,
    },
    Err {
        line: usize,
        error: String,
    },
}

/// When a benchmark stops submitting requests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BenchLimit {
    /// Exactly this many requests, cycling through the dataset.
    Count(usize),
    /// Keep submitting until this much time has passed.
    Duration(Duration),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub qps: f64,
    pub ar: f64,
    pub inf_t_mean_ms: f64,
    pub inf_t_p50_ms: f64,
    pub inf_t_p95_ms: f64,
    /// Mean ROUGE-2 over completed requests that carry references.
    pub rouge2: Option<f64>,
    pub requests: usize,
    pub failures: usize,
    pub wall_s: f64,
    pub forward_steps: usize,
    pub tokens: usize,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

struct Outcome {
    latency: Duration,
    stats: DecodeStats,
    rouge2: Option<f64>,
}

/// Pushes requests through `cfg.workers` workers and measures throughput,
/// acceptance rate and per-request latency (dequeue to final token).
pub fn run_bench<W: ForwardWeights + ?Sized>(
    model: &W,
    vocab: &Vocabulary,
    dataset: &[Request],
    cfg: &ServeConfig,
    limit: BenchLimit,
) -> Result<BenchReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Domain("benchmark dataset is empty".into()));
    }
    let submitted = AtomicUsize::new(0);
    let failures = AtomicUsize::new(0);
    let outcomes = Mutex::new(Vec::new());
    let start = Instant::now();
    std::thread::scope(|s| {
        for _ in 0..cfg.workers {
            s.spawn(|| loop {
                let i = submitted.fetch_add(1, Ordering::Relaxed);
                let more = match limit {
                    BenchLimit::Count(n) => i < n,
                    BenchLimit::Duration(d) => start.elapsed() < d,
                };
                if !more {
                    submitted.fetch_sub(1, Ordering::Relaxed);
                    break;
                }
                let req = &dataset[i % dataset.len()];
                let t0 = Instant::now();
                match summarize(model, vocab, &req.input(), &cfg.decode, cfg.budget) {
                    Ok(sum) => {
                        let latency = t0.elapsed();
                        let rouge2 = (!req.references.is_empty()).then(|| {
                            let refs: Vec<Vec<String>> =
                                req.references.iter().map(|r| rouge_tokenize(r)).collect();
                            rouge_n(&rouge_tokenize(&sum.text), &refs, 2)
                        });
                        outcomes.lock().expect("bench lock").push(Outcome {
                            latency,
                            stats: sum.stats,
                            rouge2,
                        });
                    }
                    Err(e) => {
                        log::warn!("bench request {i}: {e}");
                        failures.fetch_add(1, Ordering::Relaxed);
                    }
                }
            });
        }
    });
    let wall = start.elapsed().as_secs_f64();
    let outcomes = outcomes.into_inner().expect("bench lock");
    let mut stats = DecodeStats::default();
    let mut lat: Vec<f64> = Vec::with_capacity(outcomes.len());
    let mut r2 = Vec::new();
    for o in &outcomes {
        stats.merge(&o.stats);
        lat.push(o.latency.as_secs_f64() * 1e3);
        r2.extend(o.rouge2);
    }
    lat.sort_by(f64::total_cmp);
    let completed = outcomes.len();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    Ok(BenchReport {
        qps: if wall > 0.0 {
            completed as f64 / wall
        } else {
            0.0
        },
        ar: acceptance_rate(&stats),
        inf_t_mean_ms: mean(&lat),
        inf_t_p50_ms: percentile(&lat, 50.0),
        inf_t_p95_ms: percentile(&lat, 95.0),
        rouge2: (!r2.is_empty()).then(|| mean(&r2)),
        requests: submitted.into_inner(),
        failures: failures.into_inner(),
        wall_s: wall,
        forward_steps: stats.forward_steps,
        tokens: stats.tokens_emitted,
    })
}

/// One row of the quantization × decoding sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub quant: QuantMode,
    pub strategy: Strategy,
    pub report: BenchReport,
}

/// Sweep results printable as a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

impl fmt::Display for BenchTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<6} {:<18} {:>9} {:>6} {:>10} {:>9} {:>9} {:>8} {:>5}",
            "quant", "decode", "QPS", "AR", "InfT(ms)", "p50", "p95", "ROUGE-2", "fail"
        )?;
        for r in &self.rows {
            let b = &r.report;
            let rouge = b
                .rouge2
                .map(|v| format!("{:.2}", v * 100.0))
                .unwrap_or_else(|| "-".into());
            writeln!(
                f,
                "{:<6} {:<18} {:>9.2} {:>6.2} {:>10.2} {:>9.2} {:>9.2} {:>8} {:>5}",
                r.quant.to_string(),
                r.strategy.to_string(),
                b.qps,
                b.ar,
                b.inf_t_mean_ms,
                b.inf_t_p50_ms,
                b.inf_t_p95_ms,
                rouge,
                b.failures
            )?;
        }
        Ok(())
    }
}

/// Decode configurations of the standard sweep.
pub fn sweep_strategies() -> Vec<Strategy> {
    vec![
        Strategy::Greedy,
        Strategy::Lookahead { w: 4, n: 6, v: 4 },
        Strategy::Lookahead { w: 5, n: 5, v: 5 },
        Strategy::Lookahead { w: 6, n: 6, v: 6 },
    ]
}

/// Runs [`run_bench`] for every (quant mode, strategy); `load` builds the
/// model for a mode.
pub fn bench_sweep<M, F>(
    mut load: F,
    vocab: &Vocabulary,
    dataset: &[Request],
    base: &ServeConfig,
    modes: &[QuantMode],
    strategies: &[Strategy],
    limit: BenchLimit,
) -> Result<BenchTable>
where
    M: ForwardWeights,
    F: FnMut(QuantMode) -> Result<M>,
{
    let mut rows = Vec::with_capacity(modes.len() * strategies.len());
    for &quant in modes {
        let model = load(quant)?;
        for &strategy in strategies {
            let cfg = ServeConfig {
                quant,
                decode: DecodeConfig {
                    strategy,
                    ..base.decode.clone()
                },
                ..base.clone()
            };
            let report = run_bench(&model, vocab, dataset, &cfg, limit)?;
            rows.push(BenchRow {
                quant,
                strategy,
                report,
            });
        }
    }
    Ok(BenchTable { rows })
}

/// Totals of one serve session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeSummary {
    pub requests: usize,
    pub failures: usize,
}

/// Reads line-delimited requests from `input` and writes one response per
/// non-blank line to `output`, in input order. At most `cfg.max_batch`
/// requests are between the reader and the writer at any time.
pub fn serve_loop<W, R, O>(
    model: &W,
    vocab: &Vocabulary,
    cfg: &ServeConfig,
    input: R,
    mut output: O,
) -> Result<ServeSummary>
where
    W: ForwardWeights + ?Sized,
    R: BufRead + Send,
    O: Write,
{
    cfg.validate()?;
    // a line that is not UTF-8 travels as its error message
    let (job_tx, job_rx) =
        bounded::<(usize, usize, std::result::Result<String, String>)>(cfg.max_batch);
    let (res_tx, res_rx) = unbounded::<(usize, Response)>();
    // one credit per in-flight request; the writer returns it
    let (credit_tx, credit_rx) = bounded::<()>(cfg.max_batch);
    for _ in 0..cfg.max_batch {
        credit_tx.send(()).expect("fresh channel");
    }

    std::thread::scope(|s| -> Result<ServeSummary> {
        let reader = s.spawn(move || -> Result<()> {
            let mut seq = 0;
            for (i, line) in input.split(b'\n').enumerate() {
                let mut line = line?;
                if line.last() == Some(&b'\r') {
                    line.pop();
                }
                let line = String::from_utf8(line).map_err(|e| format!("malformed request: {e}"));
                if line.as_deref().is_ok_and(|l| l.trim().is_empty()) {
                    continue;
                }
                if credit_rx.recv().is_err() {
                    break;
                }
                if job_tx.send((seq, i + 1, line)).is_err() {
                    break;
                }
                seq += 1;
            }
            Ok(())
        });
        for _ in 0..cfg.workers {
            let job_rx = job_rx.clone();
            let res_tx = res_tx.clone();
            s.spawn(move || {
                for (seq, line_no, line) in job_rx {
                    let t0 = Instant::now();
                    let parsed = line.and_then(|l| {
                        serde_json::from_str::<Request>(&l)
                            .map_err(|e| format!("malformed request: {e}"))
                    });
                    let resp = match parsed {
                        Err(error) => Response::Err {
                            line: line_no,
                            error,
                        },
                        Ok(req) => {
                            match summarize(model, vocab, &req.input(), &cfg.decode, cfg.budget) {
                                Ok(sum) => Response::Ok {
                                    ar: acceptance_rate(&sum.stats),
                                    summary: sum.text,
                                    latency_ms: t0.elapsed().as_secs_f64() * 1e3,
                                },
                                Err(e) => Response::Err {
                                    line: line_no,
                                    error: e.to_string(),
                                },
                            }
                        }
                    };
                    if res_tx.send((seq, resp)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(job_rx);
        drop(res_tx);

        let mut pending: BTreeMap<usize, Response> = BTreeMap::new();
        let mut next = 0;
        let mut summary = ServeSummary::default();
        let mut write_err = None;
        for (seq, resp) in &res_rx {
            pending.insert(seq, resp);
            while let Some(resp) = pending.remove(&next) {
                summary.requests += 1;
                if matches!(resp, Response::Err { .. }) {
                    summary.failures += 1;
                }
                if write_err.is_none() {
                    let r = serde_json::to_writer(&mut output, &resp)
                        .map_err(Error::from)
                        .and_then(|_| output.write_all(b"\n").map_err(Error::from));
                    if let Err(e) = r {
                        write_err = Some(e);
                    }
                }
                next += 1;
                // the reader may already be gone after the last line
                let _ = credit_tx.send(());
            }
        }
        drop(credit_tx);
        reader.join().expect("reader thread")?;
        if let Some(e) = write_err {
            return Err(e);
        }
        output.flush()?;
        Ok(summary)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_nearest_rank() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        assert_eq!(percentile(&xs, 50.0), 5.0);
        assert_eq!(percentile(&xs, 95.0), 10.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    #[test]
    fn config_file_overrides_defaults() {
        let f = ConfigFile::parse(
            "serve.workers = 3\ndecode.strategy = 5,5,5\nquant.mode = int8\nmodel.vocab = v.txt\n",
        )
        .unwrap();
        f.check_keys(&ServeConfig::KEYS).unwrap();
        let mut c = ServeConfig::default();
        c.apply_file(&f).unwrap();
        assert_eq!(c.workers, 3);
        assert_eq!(c.decode.strategy, Strategy::Lookahead { w: 5, n: 5, v: 5 });
        assert_eq!(c.quant, QuantMode::Int8WeightOnly);
        assert_eq!(c.vocab, Some(PathBuf::from("v.txt")));
        assert!(ServeConfig {
            workers: 0,
            ..c
        }
        .validate()
        .is_err());
    }
}
