//! Good/Same/Bad side-by-side judgments.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GsbLabel {
    /// Result A is better than B.
    #[serde(alias = "Good", alias = "G", alias = "g")]
    Good,
    #[serde(alias = "Same", alias = "S", alias = "s")]
    Same,
    #[serde(alias = "Bad", alias = "B", alias = "b")]
    Bad,
}

impl GsbLabel {
    /// The same judgment read from B's side.
    pub fn swapped(self) -> Self {
        match self {
            GsbLabel::Good => GsbLabel::Bad,
            GsbLabel::Same => GsbLabel::Same,
            GsbLabel::Bad => GsbLabel::Good,
        }
    }
}

impl FromStr for GsbLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "good" | "g" => Ok(GsbLabel::Good),
            "same" | "s" => Ok(GsbLabel::Same),
            "bad" | "b" => Ok(GsbLabel::Bad),
            _ => Err(Error::Format(format!("unknown GSB label '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GsbRecord {
    pub query_id: String,
    pub label: GsbLabel,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GsbCounts {
    pub good: usize,
    pub same: usize,
    pub bad: usize,
}

impl GsbCounts {
    pub fn from_labels(labels: impl IntoIterator<Item = GsbLabel>) -> Self {
        let mut c = Self::default();
        for l in labels {
            match l {
                GsbLabel::Good => c.good += 1,
                GsbLabel::Same => c.same += 1,
                GsbLabel::Bad => c.bad += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.good + self.same + self.bad
    }

    /// `(#Good − #Bad) / (#Good + #Same + #Bad)`.
    pub fn delta(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::Domain("GSB needs at least one judgment".into()));
        }
        Ok((self.good as f64 - self.bad as f64) / self.total() as f64)
    }

    /// Two-sided sign test on Good versus Bad; Same votes are ties and
    /// drop out. Returns 1 when there are no decisive votes.
    pub fn sign_test_p(&self) -> f64 {
        let n = (self.good + self.bad) as u64;
        if n == 0 {
            return 1.0;
        }
        let bin = Binomial::new(0.5, n).expect("valid binomial");
        let k = self.good.min(self.bad) as u64;
        (2.0 * bin.cdf(k)).min(1.0)
    }
}

pub fn gsb_delta(records: &[GsbRecord]) -> Result<f64> {
    GsbCounts::from_labels(records.iter().map(|r| r.label)).delta()
}

/// Delta with counts and significance, rendered like `+20.00% (G/S/B
/// 30/60/10, p=0.0002)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsbReport {
    pub counts: GsbCounts,
    pub delta: f64,
    pub p_value: f64,
}

impl GsbReport {
    pub fn new(records: &[GsbRecord]) -> Result<Self> {
        let counts = GsbCounts::from_labels(records.iter().map(|r| r.label));
        Ok(Self {
            counts,
            delta: counts.delta()?,
            p_value: counts.sign_test_p(),
        })
    }
}

impl fmt::Display for GsbReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:+.2}% (G/S/B {}/{}/{}, p={:.4})",
            self.delta * 100.0,
            self.counts.good,
            self.counts.same,
            self.counts.bad,
            self.p_value
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(g: usize, s: usize, b: usize) -> Vec<GsbRecord> {
        let mk = |i: usize, label| GsbRecord {
            query_id: format!("q{i}"),
            label,
        };
        (0..g)
            .map(|i| mk(i, GsbLabel::Good))
            .chain((0..s).map(|i| mk(g + i, GsbLabel::Same)))
            .chain((0..b).map(|i| mk(g + s + i, GsbLabel::Bad)))
            .collect()
    }

    #[test]
    fn worked_example() {
        let r = records(30, 60, 10);
        assert!((gsb_delta(&r).unwrap() - 0.20).abs() < 1e-15);
        let rep = GsbReport::new(&r).unwrap();
        assert!(rep.to_string().starts_with("+20.00% (G/S/B 30/60/10"));
        assert!(rep.p_value < 0.01);
    }

    #[test]
    fn balanced_and_empty() {
        assert_eq!(gsb_delta(&records(7, 3, 7)).unwrap(), 0.0);
        assert!(matches!(gsb_delta(&[]), Err(Error::Domain(_))));
        assert_eq!(GsbCounts::default().sign_test_p(), 1.0);
    }

    #[test]
    fn sign_test_small_case() {
        // 5 Good, 0 Bad: p = 2 · 0.5^5
        let c = GsbCounts {
            good: 5,
            same: 2,
            bad: 0,
        };
        assert!((c.sign_test_p() - 2.0 / 32.0).abs() < 1e-12);
    }

    #[test]
    fn labels_parse_from_json() {
        let r: GsbRecord = serde_json::from_str(r#"{"query_id":"7","label":"Good"}"#).unwrap();
        assert_eq!(r.label, GsbLabel::Good);
        let r: GsbRecord = serde_json::from_str(r#"{"query_id":"7","label":"bad"}"#).unwrap();
        assert_eq!(r.label, GsbLabel::Bad);
        assert_eq!("S".parse::<GsbLabel>().unwrap(), GsbLabel::Same);
    }
}
