//! Detection metrics: F1 at a threshold, AUC as the Mann–Whitney statistic,
//! and EER by linear interpolation between operating points.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("scored set is empty")]
    Empty,
    #[error("need at least one positive and one negative")]
    SingleClassInput,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
}

/// Parallel scores and binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self, MetricsError> {
        if scores.len() != labels.len() {
            return Err(MetricsError::LengthMismatch {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if scores.is_empty() {
            return Err(MetricsError::Empty);
        }
        if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(MetricsError::NonFiniteScore(s));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_neg(&self) -> usize {
        self.labels.len() - self.n_pos()
    }

    fn require_both_classes(&self) -> Result<(), MetricsError> {
        if self.n_pos() == 0 || self.n_neg() == 0 {
            Err(MetricsError::SingleClassInput)
        } else {
            Ok(())
        }
    }
}

/// F1 with prediction `score ≥ threshold`; 0 when precision + recall is 0.
pub fn f1(set: &ScoredSet, threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
    }
    f1_from_counts(tp, fp, fne)
}

pub fn f1_from_counts(tp: usize, fp: usize, fne: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    // equals 2PR/(P+R) but with a single rounding
    (2 * tp) as f64 / (2 * tp + fp + fne) as f64
}

/// Best F1 over thresholds at every distinct score; returns `(f1, threshold)`.
pub fn best_f1(set: &ScoredSet) -> (f64, f64) {
    let mut thresholds = set.scores.clone();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds
        .into_iter()
        .map(|t| (f1(set, t), t))
        .fold((0.0, 0.5), |best, cur| if cur.0 > best.0 { cur } else { best })
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting ½.
pub fn auc(set: &ScoredSet) -> Result<f64, MetricsError> {
    set.require_both_classes()?;
    // rank-sum form of the Mann–Whitney statistic with midranks for ties
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| set.labels[k]).count() as f64 * midrank;
        i = j + 1;
    }
    let (p, n) = (set.n_pos() as f64, set.n_neg() as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Equal error rate.
///
/// Operating points are taken at every distinct score (predict positive when
/// `score ≥ t`) plus the reject-all point; the first adjacent pair where
/// `FPR − FNR` changes sign is interpolated linearly to `FPR = FNR`.
pub fn eer(set: &ScoredSet) -> Result<f64, MetricsError> {
    set.require_both_classes()?;
    let points = operating_points(set);
    let diff = |p: &(f64, f64)| p.0 - p.1;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (da, db) = (diff(&a), diff(&b));
        if da == 0.0 {
            return Ok(a.0);
        }
        if da.signum() != db.signum() {
            let s = da / (da - db);
            return Ok(a.0 + s * (b.0 - a.0));
        }
    }
    let last = points.last().expect("non-empty");
    Ok((last.0 + last.1) / 2.0)
}

/// `(FPR, FNR)` at thresholds from +∞ down through every distinct score.
fn operating_points(set: &ScoredSet) -> Vec<(f64, f64)> {
    let (p, n) = (set.n_pos() as f64, set.n_neg() as f64);
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));
    let mut points = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = set.scores[order[i]];
        while i < order.len() && set.scores[order[i]] == s {
            if set.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n, 1.0 - tp as f64 / p));
    }
    points
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyMetrics {
    pub f1: f64,
    pub auc: f64,
    pub eer: f64,
}

/// Evaluation summary written by `kws eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_pos: usize,
    pub n_neg: usize,
    pub f1: f64,
    pub best_f1: f64,
    pub best_f1_threshold: f64,
    pub auc: f64,
    pub eer: f64,
    pub per_strategy: BTreeMap<String, StrategyMetrics>,
}

/// One scored evaluation pair; `strategy` is `None` for positives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub keyword: String,
    pub label: bool,
    pub strategy: Option<String>,
    pub score: f64,
}

impl EvalReport {
    /// Per-strategy rows score all positives against that strategy's negatives.
    pub fn from_pairs(pairs: &[ScoredPair], threshold: f64) -> Result<Self, MetricsError> {
        let all = ScoredSet::new(pairs.iter().map(|p| p.score).collect(), pairs.iter().map(|p| p.label).collect())?;
        let (best, best_t) = best_f1(&all);
        let mut per_strategy = BTreeMap::new();
        let names: std::collections::BTreeSet<&str> = pairs.iter().filter_map(|p| p.strategy.as_deref()).collect();
        for name in names {
            let subset: Vec<&ScoredPair> = pairs
                .iter()
                .filter(|p| p.label || p.strategy.as_deref() == Some(name))
                .collect();
            let set = ScoredSet::new(subset.iter().map(|p| p.score).collect(), subset.iter().map(|p| p.label).collect())?;
            if set.n_pos() == 0 {
                continue;
            }
            per_strategy.insert(
                name.to_string(),
                StrategyMetrics {
                    f1: f1(&set, threshold),
                    auc: auc(&set)?,
                    eer: eer(&set)?,
                },
            );
        }
        Ok(Self {
            n_pos: all.n_pos(),
            n_neg: all.n_neg(),
            f1: f1(&all, threshold),
            best_f1: best,
            best_f1_threshold: best_t,
            auc: auc(&all)?,
            eer: eer(&all)?,
            per_strategy,
        })
    }
}
