//! How many pairs pooled techniques keep for an instance.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::ScoredList;

/// `Float(α)` interpolates between the instance's mean agent pair count and
/// the dataset median; `Mean`/`Max` pick the pair count whose agents are, on
/// average or at best, the most confident.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaPolicy {
    Float(f64),
    Mean,
    Max,
}

impl FromStr for AlphaPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(AlphaPolicy::Mean),
            "max" => Ok(AlphaPolicy::Max),
            other => {
                let a: f64 = other
                    .parse()
                    .map_err(|_| format!("alpha must be a number in [0,1], `mean` or `max`, got `{other}`"))?;
                if !(0.0..=1.0).contains(&a) {
                    return Err(format!("alpha {a} is outside [0,1]"));
                }
                Ok(AlphaPolicy::Float(a))
            }
        }
    }
}

impl fmt::Display for AlphaPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaPolicy::Float(a) => write!(f, "{a}"),
            AlphaPolicy::Mean => f.write_str("mean"),
            AlphaPolicy::Max => f.write_str("max"),
        }
    }
}

/// Median of the pair counts of every (instance, agent) list in the run.
/// Even-sized populations average the two middle values; empty gives 0.
pub fn dataset_median<'a>(lists: impl IntoIterator<Item = &'a ScoredList>) -> f64 {
    let mut counts: Vec<usize> = lists.into_iter().map(ScoredList::len).collect();
    if counts.is_empty() {
        return 0.0;
    }
    counts.sort_unstable();
    let mid = counts.len() / 2;
    if counts.len() % 2 == 1 {
        counts[mid] as f64
    } else {
        (counts[mid - 1] + counts[mid]) as f64 / 2.0
    }
}

/// Number of pairs to keep for one instance given its agents' lists.
///
/// Rounding is half away from zero.
pub fn estimate_n(agent_lists: &[ScoredList], dataset_median: f64, policy: AlphaPolicy) -> usize {
    match policy {
        AlphaPolicy::Float(alpha) => {
            let mean = if agent_lists.is_empty() {
                0.0
            } else {
                agent_lists.iter().map(|l| l.len() as f64).sum::<f64>() / agent_lists.len() as f64
            };
            let v = alpha * mean + (1.0 - alpha) * dataset_median;
            v.round().max(0.0) as usize
        }
        AlphaPolicy::Mean | AlphaPolicy::Max => {
            let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for l in agent_lists {
                groups.entry(l.len()).or_default().push(l.list_confidence);
            }
            let mut best: Option<(usize, f64)> = None;
            for (n, confs) in groups {
                let v = match policy {
                    AlphaPolicy::Mean => confs.iter().sum::<f64>() / confs.len() as f64,
                    _ => confs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                };
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((n, v));
                }
            }
            best.map_or(0, |(n, _)| n)
        }
    }
}
