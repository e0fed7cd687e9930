//! Simulated side-by-side impressions and the pair filter built on them.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a simulated user reacts to two summaries shown in two slots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClickBehavior {
    /// Looks at one slot, chosen uniformly, and clicks it with its
    /// attractiveness.
    Examine,
    /// Like `Examine` but looks at the top slot with probability `top`.
    PositionBias { top: f64 },
    /// Always clicks one of the two, `a / (a + b)` for the first.
    BradleyTerry,
}

/// Ground-truth attractiveness of every (query, candidate).
#[derive(Debug, Clone, PartialEq)]
pub struct ClickModel {
    pub behavior: ClickBehavior,
    attractiveness: HashMap<(String, usize), f64>,
}

impl ClickModel {
    pub fn new(behavior: ClickBehavior) -> Self {
        Self {
            behavior,
            attractiveness: HashMap::new(),
        }
    }

    pub fn set(&mut self, query_id: &str, candidate: usize, a: f64) -> Result<()> {
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::Domain(format!(
                "attractiveness must lie in (0, 1), got {a}"
            )));
        }
        self.attractiveness
            .insert((query_id.to_string(), candidate), a);
        Ok(())
    }

    pub fn get(&self, query_id: &str, candidate: usize) -> Option<f64> {
        self.attractiveness
            .get(&(query_id.to_string(), candidate))
            .copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Click {
    A,
    B,
    None,
}

/// Two candidates of one query shown together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShownPair {
    pub query_id: String,
    pub a: usize,
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Impression {
    pub query_id: String,
    pub a: usize,
    pub b: usize,
    /// Whether `a` occupied the top slot.
    pub a_on_top: bool,
    pub clicked: Click,
}

impl Impression {
    /// Same event with the roles of `a` and `b` exchanged.
    pub fn relabeled(&self) -> Self {
        Self {
            query_id: self.query_id.clone(),
            a: self.b,
            b: self.a,
            a_on_top: !self.a_on_top,
            clicked: match self.clicked {
                Click::A => Click::B,
                Click::B => Click::A,
                Click::None => Click::None,
            },
        }
    }
}

/// `n_per_pair` impressions of every pair, slot order drawn per impression.
pub fn simulate_impressions(
    model: &ClickModel,
    pairs: &[ShownPair],
    n_per_pair: usize,
    seed: u64,
) -> Result<Vec<Impression>> {
    if n_per_pair == 0 {
        return Err(Error::Config("at least one impression per pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::with_capacity(pairs.len() * n_per_pair);
    for p in pairs {
        if p.a == p.b {
            return Err(Error::Domain(format!(
                "query {}: a pair needs two different candidates",
                p.query_id
            )));
        }
        let attr = |c: usize| {
            model.get(&p.query_id, c).ok_or_else(|| {
                Error::Domain(format!(
                    "no attractiveness for query {} candidate {c}",
                    p.query_id
                ))
            })
        };
        let (pa, pb) = (attr(p.a)?, attr(p.b)?);
        for _ in 0..n_per_pair {
            let a_on_top = rng.random_bool(0.5);
            let (top, bottom) = if a_on_top {
                (Click::A, Click::B)
            } else {
                (Click::B, Click::A)
            };
            let attr_of = |c: Click| if c == Click::A { pa } else { pb };
            let clicked = match model.behavior {
                ClickBehavior::Examine | ClickBehavior::PositionBias { .. } => {
                    let p_top = match model.behavior {
                        ClickBehavior::PositionBias { top } => top,
                        _ => 0.5,
                    };
                    let slot = if rng.random_bool(p_top) { top } else { bottom };
                    if rng.random_bool(attr_of(slot)) {
                        slot
                    } else {
                        Click::None
                    }
                }
                ClickBehavior::BradleyTerry => {
                    if rng.random_bool(pa / (pa + pb)) {
                        Click::A
                    } else {
                        Click::B
                    }
                }
            };
            log.push(Impression {
                query_id: p.query_id.clone(),
                a: p.a,
                b: p.b,
                a_on_top,
                clicked,
            });
        }
    }
    Ok(log)
}

/// Thresholds for a "clear and consistent" preference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairFilterConfig {
    pub min_impressions: usize,
    pub min_ctr_gap: f64,
}

impl Default for PairFilterConfig {
    fn default() -> Self {
        Self {
            min_impressions: 20,
            min_ctr_gap: 0.2,
        }
    }
}

impl PairFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_impressions == 0 || !(self.min_ctr_gap > 0.0 && self.min_ctr_gap < 1.0) {
            return Err(Error::Config(
                "pair filter needs min_impressions >= 1 and 0 < min_ctr_gap < 1".into(),
            ));
        }
        Ok(())
    }
}

/// A preference read off the log: `chosen` out-clicked `rejected`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDecision {
    pub query_id: String,
    pub chosen: usize,
    pub rejected: usize,
    pub impressions: usize,
    pub ctr_chosen: f64,
    pub ctr_rejected: f64,
}

/// Slack for the inclusive gap comparison, so a gap that equals the
/// threshold in exact arithmetic is not lost to rounding.
const GAP_SLACK: f64 = 1e-12;

/// Aggregates impressions per unordered candidate pair, keeps pairs with
/// at least `m` impressions and a CTR gap of at least `τ`, and emits the
/// widest-gap pair of each query, sorted by query id.
pub fn build_preference_dataset(
    log: &[Impression],
    cfg: &PairFilterConfig,
) -> Result<Vec<PreferenceDecision>> {
    cfg.validate()?;
    // (query, lo, hi) → (impressions, clicks on lo, clicks on hi)
    let mut agg: BTreeMap<(String, usize, usize), (usize, usize, usize)> = BTreeMap::new();
    for imp in log {
        if imp.a == imp.b {
            return Err(Error::Domain(
                "impression shows the same candidate twice".into(),
            ));
        }
        let (lo, hi) = (imp.a.min(imp.b), imp.a.max(imp.b));
        let e = agg.entry((imp.query_id.clone(), lo, hi)).or_default();
        e.0 += 1;
        let clicked = match imp.clicked {
            Click::A => Some(imp.a),
            Click::B => Some(imp.b),
            Click::None => None,
        };
        match clicked {
            Some(c) if c == lo => e.1 += 1,
            Some(_) => e.2 += 1,
            None => {}
        }
    }
    let mut best: BTreeMap<String, PreferenceDecision> = BTreeMap::new();
    for ((q, lo, hi), (n, c_lo, c_hi)) in agg {
        if n < cfg.min_impressions || c_lo == c_hi {
            continue;
        }
        let gap = c_lo.abs_diff(c_hi) as f64 / n as f64;
        if gap + GAP_SLACK < cfg.min_ctr_gap {
            continue;
        }
        let (chosen, rejected, cc, cr) = if c_lo > c_hi {
            (lo, hi, c_lo, c_hi)
        } else {
            (hi, lo, c_hi, c_lo)
        };
        let d = PreferenceDecision {
            query_id: q.clone(),
            chosen,
            rejected,
            impressions: n,
            ctr_chosen: cc as f64 / n as f64,
            ctr_rejected: cr as f64 / n as f64,
        };
        let wider = best
            .get(&q)
            .is_none_or(|b| gap > b.ctr_chosen - b.ctr_rejected + GAP_SLACK);
        if wider {
            best.insert(q, d);
        }
    }
    Ok(best.into_values().collect())
}
