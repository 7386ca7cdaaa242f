//! Scoring and analysis: micro-F1, conflict counts, rank correlation and
//! report tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Pair, PairList, ScoredList};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("NaN in input")]
    NaN,
}

/// True/false positive and false negative counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MicroCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall, computed from the counts.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn scores(&self) -> Prf {
        Prf {
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
        }
    }
}

impl Add for MicroCounts {
    type Output = MicroCounts;

    fn add(self, o: MicroCounts) -> MicroCounts {
        MicroCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for MicroCounts {
    fn add_assign(&mut self, o: MicroCounts) {
        *self = *self + o;
    }
}

impl std::iter::Sum for MicroCounts {
    fn sum<I: Iterator<Item = MicroCounts>>(iter: I) -> Self {
        iter.fold(MicroCounts::default(), Add::add)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Exact-match counts after removing duplicate predictions.
pub fn score_instance(pred: &PairList, gold: &PairList) -> MicroCounts {
    let pred: BTreeSet<&Pair> = pred.iter().collect();
    let gold: BTreeSet<&Pair> = gold.iter().collect();
    let tp = pred.intersection(&gold).count();
    MicroCounts {
        tp,
        fp: pred.len() - tp,
        fn_: gold.len() - tp,
    }
}

/// Micro-averaged scores over all instances.
pub fn score_dataset(counts: impl IntoIterator<Item = MicroCounts>) -> Prf {
    let mut n = 0usize;
    let total: MicroCounts = counts.into_iter().inspect(|_| n += 1).sum();
    if n == 0 {
        log::warn!("scoring an empty dataset; reporting zeros");
    }
    total.scores()
}

/// Per-instance F1; two empty sets score 1 and set the flag.
pub fn instance_f1(pred: &PairList, gold: &PairList) -> (f64, bool) {
    let c = score_instance(pred, gold);
    if c.tp + c.fp + c.fn_ == 0 {
        (1.0, true)
    } else {
        (c.f1(), false)
    }
}

/// Number of categories predicted with two or more polarities.
pub fn count_conflicts(pred: &PairList) -> usize {
    let mut by_cat: BTreeMap<&str, BTreeSet<_>> = BTreeMap::new();
    for p in pred.iter() {
        by_cat.entry(p.category.as_str()).or_default().insert(p.polarity);
    }
    by_cat.values().filter(|s| s.len() > 1).count()
}

/// Ranks starting at 1, tied values sharing their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Tie-corrected Spearman correlation; `Ok(None)` when either input is
/// constant and the coefficient is undefined.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(StatsError::TooFewPoints(x.len()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(StatsError::NaN);
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

/// Mean and population variance.
pub fn mean_variance(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
}

/// Rank correlation of agent agreement statistics with per-instance F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub instances: usize,
    /// Instances where prediction and gold were both empty (F1 taken as 1).
    pub both_empty_instances: usize,
    pub rho_mean_confidence_vs_f1: Option<f64>,
    pub rho_variance_vs_f1: Option<f64>,
    /// The variance coefficient negated, as some published plots show it.
    pub rho_variance_vs_f1_sign_flipped: Option<f64>,
}

/// `agent_lists[i]` holds every agent's list for instance `i`; `preds[i]`
/// and `golds[i]` give the prediction whose F1 is correlated.
pub fn confidence_correlation(
    agent_lists: &[Vec<ScoredList>],
    preds: &[PairList],
    golds: &[PairList],
) -> Result<CorrelationReport, StatsError> {
    if agent_lists.len() != preds.len() {
        return Err(StatsError::LengthMismatch(agent_lists.len(), preds.len()));
    }
    if preds.len() != golds.len() {
        return Err(StatsError::LengthMismatch(preds.len(), golds.len()));
    }
    let mut means = Vec::new();
    let mut variances = Vec::new();
    let mut f1s = Vec::new();
    let mut both_empty = 0;
    for ((lists, pred), gold) in agent_lists.iter().zip(preds).zip(golds) {
        let confs: Vec<f64> = lists.iter().map(|l| l.list_confidence).collect();
        let (m, v) = mean_variance(&confs);
        means.push(m);
        variances.push(v);
        let (f1, empty) = instance_f1(pred, gold);
        both_empty += empty as usize;
        f1s.push(f1);
    }
    let n = f1s.len();
    let (rho_m, rho_v) = if n < 2 {
        (None, None)
    } else {
        (spearman(&means, &f1s)?, spearman(&variances, &f1s)?)
    };
    Ok(CorrelationReport {
        instances: n,
        both_empty_instances: both_empty,
        rho_mean_confidence_vs_f1: rho_m,
        rho_variance_vs_f1: rho_v,
        rho_variance_vs_f1_sign_flipped: rho_v.map(|r| -r),
    })
}

/// Competition ranks ("1224") of the present values, highest first.
pub fn competition_ranks(values: &[Option<f64>]) -> Vec<Option<usize>> {
    values
        .iter()
        .map(|v| v.map(|v| 1 + values.iter().flatten().filter(|&&o| o > v).count()))
        .collect()
}

/// Unweighted mean of per-dataset scores; `None` if any is missing.
pub fn macro_average(values: &[Option<f64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let present: Vec<f64> = values.iter().copied().collect::<Option<_>>()?;
    Some(present.iter().sum::<f64>() / present.len() as f64)
}

/// Grid of percentages with rows = techniques and columns = models (or
/// datasets). Cells ranked 1..=3 within their column carry a podium mark.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

const MISSING: &str = "—";

impl ComparisonTable {
    pub fn new(columns: Vec<String>) -> Self {
        Self {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, label: impl Into<String>, values: Vec<Option<f64>>) {
        assert_eq!(values.len(), self.columns.len(), "row width must match columns");
        self.rows.push((label.into(), values));
    }

    /// `podium()[row][col]` is `Some(1..=3)` for podium cells.
    pub fn podium(&self) -> Vec<Vec<Option<usize>>> {
        let mut out = vec![vec![None; self.columns.len()]; self.rows.len()];
        for c in 0..self.columns.len() {
            let col: Vec<Option<f64>> = self.rows.iter().map(|r| r.1[c]).collect();
            for (r, rank) in competition_ranks(&col).into_iter().enumerate() {
                out[r][c] = rank.filter(|&k| k <= 3);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("technique");
        for c in &self.columns {
            let _ = write!(s, ",{},{} podium", csv_field(c), csv_field(c));
        }
        s.push('\n');
        let podium = self.podium();
        for ((label, values), marks) in self.rows.iter().zip(&podium) {
            s.push_str(&csv_field(label));
            for (v, m) in values.iter().zip(marks) {
                let v = v.map(|v| format!("{v:.1}")).unwrap_or_default();
                let m = m.map(|m| m.to_string()).unwrap_or_default();
                let _ = write!(s, ",{v},{m}");
            }
            s.push('\n');
        }
        s
    }

    /// Fixed-width text; podium cells read like `55.5% (2)`.
    pub fn render_text(&self) -> String {
        let podium = self.podium();
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .zip(&podium)
            .map(|((_, values), marks)| {
                values
                    .iter()
                    .zip(marks)
                    .map(|(v, m)| match (v, m) {
                        (None, _) => MISSING.to_string(),
                        (Some(v), None) => format!("{v:.1}%"),
                        (Some(v), Some(m)) => format!("{v:.1}% ({m})"),
                    })
                    .collect()
            })
            .collect();
        let w0 = self
            .rows
            .iter()
            .map(|r| r.0.chars().count())
            .chain(std::iter::once("technique".len()))
            .max()
            .unwrap_or(0);
        let widths: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(c, name)| {
                cells
                    .iter()
                    .map(|row| row[c].chars().count())
                    .chain(std::iter::once(name.chars().count()))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w.saturating_sub(s.chars().count())));
        let mut out = pad("technique", w0);
        for (c, w) in self.columns.iter().zip(&widths) {
            out.push_str(" | ");
            out.push_str(&pad(c, *w));
        }
        out = out.trim_end().to_string();
        out.push('\n');
        for ((label, _), row) in self.rows.iter().zip(&cells) {
            let mut line = pad(label, w0);
            for (cell, w) in row.iter().zip(&widths) {
                line.push_str(" | ");
                line.push_str(&pad(cell, *w));
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Mean predicted pairs per instance against the gold mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCountSummary {
    pub instances: usize,
    pub mean_predicted: f64,
    pub mean_gold: f64,
    /// `mean_predicted / mean_gold`; `None` when gold is empty.
    pub ratio: Option<f64>,
    /// Set when the ratio exceeds 2.
    pub flagged: bool,
}

pub fn pair_count_summary(preds: &[PairList], golds: &[PairList]) -> PairCountSummary {
    let mean = |ls: &[PairList]| {
        if ls.is_empty() {
            0.0
        } else {
            ls.iter().map(PairList::n).sum::<usize>() as f64 / ls.len() as f64
        }
    };
    let (mp, mg) = (mean(preds), mean(golds));
    let ratio = (mg > 0.0).then(|| mp / mg);
    PairCountSummary {
        instances: preds.len(),
        mean_predicted: mp,
        mean_gold: mg,
        ratio,
        flagged: ratio.map_or(false, |r| r > 2.0),
    }
}
