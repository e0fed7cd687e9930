//! Summary quality metrics and the dataset evaluation runner.

pub mod gsb;
pub mod rouge;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use gsb::{gsb_delta, GsbCounts, GsbLabel, GsbRecord, GsbReport};
pub use rouge::{
    lcs_len, rouge_l, rouge_l_f, rouge_l_multi, rouge_n, rouge_tokenize, score_text, RougeScores,
};

use crate::decode::{summarize, DecodeConfig, DecodeStats};
use crate::error::{Error, Result};
use crate::model::ForwardWeights;
use crate::tokenizer::{PromptInput, Vocabulary};

/// One evaluation input with its reference summaries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalExample {
    pub query: String,
    #[serde(default)]
    pub title: String,
    pub content: String,
    pub references: Vec<String>,
}

impl EvalExample {
    pub fn input(&self) -> PromptInput {
        PromptInput {
            query: self.query.clone(),
            title: self.title.clone(),
            content: self.content.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub index: usize,
    pub summary: String,
    pub scores: RougeScores,
    /// Set when decoding this example failed; the row is left out of the means.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean: RougeScores,
    pub exact_match: f64,
    pub failures: usize,
    pub stats: DecodeStats,
}

impl MetricReport {
    /// Builds the report from finished rows; `exact` flags rows whose
    /// summary equals a reference.
    pub fn from_rows(rows: Vec<MetricRow>, exact: &[bool], stats: DecodeStats) -> Self {
        let ok: Vec<(&MetricRow, bool)> = rows
            .iter()
            .zip(exact)
            .filter(|(r, _)| r.error.is_none())
            .map(|(r, &e)| (r, e))
            .collect();
        let n = ok.len().max(1) as f64;
        let mean = RougeScores {
            rouge1: ok.iter().map(|(r, _)| r.scores.rouge1).sum::<f64>() / n,
            rouge2: ok.iter().map(|(r, _)| r.scores.rouge2).sum::<f64>() / n,
            rouge_l: ok.iter().map(|(r, _)| r.scores.rouge_l).sum::<f64>() / n,
        };
        let exact_match = ok.iter().filter(|(_, e)| *e).count() as f64 / n;
        let failures = rows.len() - ok.len();
        Self {
            rows,
            mean,
            exact_match,
            failures,
            stats,
        }
    }

    /// One-line machine-readable summary.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "examples": self.rows.len(),
            "failures": self.failures,
            "rouge1": self.mean.rouge1,
            "rouge2": self.mean.rouge2,
            "rougeL": self.mean.rouge_l,
            "exact_match": self.exact_match,
            "ar": crate::decode::acceptance_rate(&self.stats),
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>8} {:>8} {:>8} {:>8} {:>9}",
            "ROUGE-1", "ROUGE-2", "ROUGE-L", "exact", "failures"
        )?;
        write!(
            f,
            "{:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>9}",
            self.mean.rouge1 * 100.0,
            self.mean.rouge2 * 100.0,
            self.mean.rouge_l * 100.0,
            self.exact_match * 100.0,
            self.failures
        )
    }
}

/// Decodes every example, cuts it to `budget` tokens and scores it against
/// its references. Failed decodes are reported per row.
pub fn evaluate_model<W: ForwardWeights + ?Sized>(
    weights: &W,
    vocab: &Vocabulary,
    dataset: &[EvalExample],
    cfg: &DecodeConfig,
    budget: usize,
) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::Domain("evaluation dataset is empty".into()));
    }
    let mut rows = Vec::with_capacity(dataset.len());
    let mut exact = Vec::with_capacity(dataset.len());
    let mut stats = DecodeStats::default();
    for (index, ex) in dataset.iter().enumerate() {
        if ex.references.is_empty() {
            return Err(Error::Domain(format!("example {index} has no references")));
        }
        match summarize(weights, vocab, &ex.input(), cfg, budget) {
            Ok(s) => {
                stats.merge(&s.stats);
                exact.push(ex.references.iter().any(|r| r.trim() == s.text.trim()));
                rows.push(MetricRow {
                    index,
                    scores: score_text(&s.text, &ex.references),
                    summary: s.text,
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("example {index}: {e}");
                exact.push(false);
                rows.push(MetricRow {
                    index,
                    summary: String::new(),
                    scores: RougeScores::default(),
                    error: Some(e.to_string()),
                });
            }
        }
    }
    Ok(MetricReport::from_rows(rows, &exact, stats))
}
