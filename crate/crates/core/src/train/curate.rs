//! Filtering and truncation of supervised targets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::SummaryRecord;
use crate::error::Result;
use crate::tokenizer::{truncate_to_budget, Vocabulary, NEWLINE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationRules {
    /// Shorter targets are dropped.
    pub min_len: usize,
    /// Longer targets are cut with [`truncate_to_budget`].
    pub budget: usize,
    pub min_points: usize,
    pub max_points: usize,
    pub max_point_len: usize,
}

impl Default for CurationRules {
    fn default() -> Self {
        Self {
            min_len: 8,
            budget: 80,
            min_points: 3,
            max_points: 5,
            max_point_len: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooShort,
    PointCount,
    PointLength,
    Malformed,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::TooShort => "too_short",
            RejectReason::PointCount => "point_count",
            RejectReason::PointLength => "point_length",
            RejectReason::Malformed => "malformed",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub total: usize,
    pub kept: usize,
    pub truncated: usize,
    pub structured: usize,
    pub rejected: BTreeMap<String, usize>,
}

/// Verdict on a single target: the (possibly cut) summary or a reason.
pub fn curate_one(
    vocab: &Vocabulary,
    record: &SummaryRecord,
    rules: &CurationRules,
) -> std::result::Result<(SummaryRecord, bool, bool), RejectReason> {
    let tokens = vocab.encode(&record.summary);
    if tokens.len() < rules.min_len {
        return Err(RejectReason::TooShort);
    }
    let cut = truncate_to_budget(&tokens, rules.budget);
    let truncated = cut.len() < tokens.len();
    let points: Vec<&[u32]> = cut
        .split(|&t| t == NEWLINE)
        .filter(|p| !p.is_empty())
        .collect();
    let separators = cut.iter().filter(|&&t| t == NEWLINE).count();
    let structured = separators >= 2;
    if structured {
        if points.len() < rules.min_points || points.len() > rules.max_points {
            return Err(RejectReason::PointCount);
        }
        if points.iter().any(|p| p.len() > rules.max_point_len) {
            return Err(RejectReason::PointLength);
        }
    }
    let summary = if truncated {
        vocab.decode(&cut).map_err(|_| RejectReason::Malformed)?
    } else {
        record.summary.clone()
    };
    Ok((
        SummaryRecord {
            summary,
            ..record.clone()
        },
        truncated,
        structured,
    ))
}

/// Applies the rules to a stream of parsed lines; parse failures count as
/// malformed.
pub fn curate_sft_dataset(
    vocab: &Vocabulary,
    raw: impl IntoIterator<Item = Result<SummaryRecord>>,
    rules: &CurationRules,
) -> (Vec<SummaryRecord>, CurationReport) {
    let mut kept = Vec::new();
    let mut report = CurationReport::default();
    for item in raw {
        report.total += 1;
        let verdict = match item {
            Ok(r) => curate_one(vocab, &r, rules),
            Err(_) => Err(RejectReason::Malformed),
        };
        match verdict {
            Ok((r, truncated, structured)) => {
                report.kept += 1;
                report.truncated += truncated as usize;
                report.structured += structured as usize;
                kept.push(r);
            }
            Err(reason) => {
                *report
                    .rejected
                    .entry(reason.as_str().to_string())
                    .or_insert(0) += 1
            }
        }
    }
    (kept, report)
}
