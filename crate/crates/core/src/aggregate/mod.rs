//! Combining the agents' scored lists into one prediction per instance.
//!
//! Every function takes the agents' lists for one instance in agent order
//! (the index into [`all_element_orders`](crate::domain::all_element_orders));
//! that index breaks every tie.

pub mod alpha;
pub mod embed;
pub mod kmeans;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::domain::{canonical_form, ElementOrder, Pair, PairList, ScoredList, ScoredPair};

pub use alpha::{dataset_median, estimate_n, AlphaPolicy};
pub use embed::{EmbedError, Embedder, HashEmbedder, HttpEmbedder};
pub use kmeans::{kmeans, KMeansConfig, KMeansError, KMeansResult};

pub const DEFAULT_SEED: u64 = 42;

/// Named aggregation strategies selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Technique {
    HighestProbList,
    MostCommonList,
    HighestProbPairs,
    ClusteredPairs,
    MostConfidentAgent,
    Joined,
    /// Analysis probe: the least confident list.
    LowestProbList,
    /// A single agent's raw output.
    Agent(ElementOrder),
}

impl Technique {
    pub const HEADLINE: [Technique; 5] = [
        Technique::HighestProbList,
        Technique::MostCommonList,
        Technique::HighestProbPairs,
        Technique::ClusteredPairs,
        Technique::MostConfidentAgent,
    ];

    pub fn uses_alpha(self) -> bool {
        matches!(self, Technique::HighestProbPairs | Technique::ClusteredPairs)
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Technique::HighestProbList => f.write_str("highest_prob_list"),
            Technique::MostCommonList => f.write_str("most_common_list"),
            Technique::HighestProbPairs => f.write_str("highest_prob_pairs"),
            Technique::ClusteredPairs => f.write_str("clustered_pairs"),
            Technique::MostConfidentAgent => f.write_str("most_confident_agent"),
            Technique::Joined => f.write_str("joined"),
            Technique::LowestProbList => f.write_str("lowest_prob_list"),
            Technique::Agent(o) => write!(f, "agent:{}", o.code()),
        }
    }
}

impl FromStr for Technique {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "highest_prob_list" => Technique::HighestProbList,
            "most_common_list" => Technique::MostCommonList,
            "highest_prob_pairs" => Technique::HighestProbPairs,
            "clustered_pairs" => Technique::ClusteredPairs,
            "most_confident_agent" => Technique::MostConfidentAgent,
            "joined" => Technique::Joined,
            "lowest_prob_list" => Technique::LowestProbList,
            other => match other.strip_prefix("agent:") {
                Some(code) => Technique::Agent(code.parse().map_err(|e| format!("{e}"))?),
                None => {
                    return Err(format!(
                        "unknown technique `{other}` (expected highest_prob_list, most_common_list, \
                         highest_prob_pairs, clustered_pairs, most_confident_agent, joined, \
                         lowest_prob_list or agent:<ORDER>)"
                    ))
                }
            },
        })
    }
}

fn extreme_list(lists: &[ScoredList], better: impl Fn(f64, f64) -> bool) -> PairList {
    let mut best: Option<&ScoredList> = None;
    for l in lists {
        if best.map_or(true, |b| better(l.list_confidence, b.list_confidence)) {
            best = Some(l);
        }
    }
    best.map(ScoredList::pair_list).unwrap_or_default()
}

/// The list with the highest list confidence; the earliest agent wins ties.
pub fn highest_probability_list(lists: &[ScoredList]) -> PairList {
    extreme_list(lists, |a, b| a > b)
}

/// The list with the lowest list confidence; the earliest agent wins ties.
pub fn lowest_probability_list(lists: &[ScoredList]) -> PairList {
    extreme_list(lists, |a, b| a < b)
}

/// The most frequent list up to order and duplicates, returned in canonical
/// form. Without a strict plurality, the tied group holding the single most
/// confident list wins (earliest agent on equal confidence).
pub fn most_common_list(lists: &[ScoredList]) -> PairList {
    // canonical form -> (count, best confidence, first agent reaching it)
    let mut groups: BTreeMap<PairList, (usize, f64, usize)> = BTreeMap::new();
    for (agent, l) in lists.iter().enumerate() {
        let g = groups
            .entry(canonical_form(&l.pair_list()))
            .or_insert((0, f64::NEG_INFINITY, usize::MAX));
        g.0 += 1;
        if l.list_confidence > g.1 {
            g.1 = l.list_confidence;
            g.2 = agent;
        }
    }
    let Some(top) = groups.values().map(|g| g.0).max() else {
        return PairList::default();
    };
    let mut tied: Vec<(&PairList, &(usize, f64, usize))> = groups.iter().filter(|(_, g)| g.0 == top).collect();
    if tied.len() == 1 {
        return tied.remove(0).0.clone();
    }
    let mut best = tied[0];
    for cand in &tied[1..] {
        let (c, b) = (cand.1, best.1);
        if c.1 > b.1 || (c.1 == b.1 && c.2 < b.2) {
            best = *cand;
        }
    }
    best.0.clone()
}

/// Ranking order for pooled pairs: confidence descending, then pair order.
fn rank(a: &ScoredPair, b: &ScoredPair) -> std::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.pair.cmp(&b.pair))
}

/// Every distinct pair across agents with its maximal confidence (the
/// earliest agent reaching it is kept as source), in ranking order.
pub fn pool_unique(lists: &[ScoredList]) -> Vec<ScoredPair> {
    let mut best: BTreeMap<&Pair, &ScoredPair> = BTreeMap::new();
    for l in lists {
        for sp in &l.pairs {
            match best.get(&sp.pair) {
                Some(cur) if cur.confidence >= sp.confidence => {}
                _ => {
                    best.insert(&sp.pair, sp);
                }
            }
        }
    }
    let mut pooled: Vec<ScoredPair> = best.into_values().cloned().collect();
    pooled.sort_by(rank);
    pooled
}

/// The `n` most confident distinct pairs. With `resolve_conflicts`, a pair
/// whose category is already selected is skipped and the next one in the
/// ranking takes its place.
pub fn highest_probability_pairs(lists: &[ScoredList], n: usize, resolve_conflicts: bool) -> PairList {
    let mut out = Vec::new();
    for sp in pool_unique(lists) {
        if out.len() == n {
            break;
        }
        if resolve_conflicts && out.iter().any(|p: &Pair| p.category == sp.pair.category) {
            continue;
        }
        out.push(sp.pair);
    }
    PairList(out)
}

/// Result of the clustered technique; `degraded` marks a fallback to the
/// highest-probability pairs after an embedder failure.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredOutcome {
    pub pairs: PairList,
    pub degraded: bool,
}

/// Clusters the distinct pairs on their category embeddings into
/// `min(n, #distinct)` groups and keeps the most confident pair of each,
/// returned in ranking order. Transport or response failures fall back to
/// [`highest_probability_pairs`]; an inconsistent embedding dimension is an
/// error.
pub fn clustered_pairs(
    lists: &[ScoredList],
    n: usize,
    embedder: &dyn Embedder,
    seed: u64,
) -> Result<ClusteredOutcome, EmbedError> {
    let pooled = pool_unique(lists);
    let k = n.min(pooled.len());
    if k == 0 {
        return Ok(ClusteredOutcome {
            pairs: PairList::default(),
            degraded: false,
        });
    }
    let mut categories: Vec<String> = Vec::new();
    for sp in &pooled {
        if !categories.contains(&sp.pair.category) {
            categories.push(sp.pair.category.clone());
        }
    }
    let vectors = match embedder.embed(&categories) {
        Ok(v) if v.len() == categories.len() => v,
        Ok(v) => {
            log::warn!("embedder returned {} vectors for {} inputs; falling back", v.len(), categories.len());
            return Ok(fallback(lists, n));
        }
        Err(e @ EmbedError::DimensionMismatch { .. }) => return Err(e),
        Err(e) => {
            log::warn!("embedder failed ({e}); falling back to highest-probability pairs");
            return Ok(fallback(lists, n));
        }
    };
    let points: Vec<Vec<f64>> = pooled
        .iter()
        .map(|sp| {
            let i = categories.iter().position(|c| *c == sp.pair.category).unwrap();
            vectors[i].clone()
        })
        .collect();
    let result = match kmeans(&points, &KMeansConfig::new(k, seed)) {
        Ok(r) => r,
        Err(KMeansError::DimensionMismatch) => {
            let expected = points[0].len();
            let got = points.iter().map(Vec::len).find(|&d| d != expected).unwrap_or(expected);
            return Err(EmbedError::DimensionMismatch { expected, got });
        }
        Err(e) => {
            log::warn!("clustering failed ({e}); falling back to highest-probability pairs");
            return Ok(fallback(lists, n));
        }
    };
    // pooled is in ranking order, so the first member seen per cluster is
    // its most confident pair
    let mut taken = vec![false; k];
    let mut out = Vec::with_capacity(k);
    for (sp, &label) in pooled.iter().zip(&result.labels) {
        if !taken[label] {
            taken[label] = true;
            out.push(sp.pair.clone());
        }
    }
    Ok(ClusteredOutcome {
        pairs: PairList(out),
        degraded: false,
    })
}

fn fallback(lists: &[ScoredList], n: usize) -> ClusteredOutcome {
    ClusteredOutcome {
        pairs: highest_probability_pairs(lists, n, false),
        degraded: true,
    }
}

/// Index of the agent with the highest summed list confidence over all
/// instances (`per_instance[i][agent]`); the earliest agent wins ties.
pub fn most_confident_agent(per_instance: &[Vec<ScoredList>]) -> Option<usize> {
    let agents = per_instance.iter().map(Vec::len).max()?;
    let mut sums = vec![0.0; agents];
    for lists in per_instance {
        for (a, l) in lists.iter().enumerate() {
            sums[a] += l.list_confidence;
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (a, &s) in sums.iter().enumerate() {
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((a, s));
        }
    }
    best.map(|(a, _)| a)
}

/// Union of every agent's pairs, one copy each, ordered by first appearance.
pub fn joined_agent(lists: &[ScoredList]) -> PairList {
    let mut out: Vec<Pair> = Vec::new();
    for l in lists {
        for sp in &l.pairs {
            if !out.contains(&sp.pair) {
                out.push(sp.pair.clone());
            }
        }
    }
    PairList(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{all_element_orders, Polarity};
    use proptest::prelude::*;

    fn sl(agent: usize, pairs: &[(&str, Polarity, f64)]) -> ScoredList {
        let order = all_element_orders()[agent];
        ScoredList::new(
            pairs
                .iter()
                .map(|&(c, p, conf)| ScoredPair {
                    pair: Pair::new(c, p),
                    confidence: conf,
                    source_agent: order,
                })
                .collect(),
        )
    }

    use Polarity::{Negative as Neg, Positive as Pos};

    #[test]
    fn highest_list_argmax_and_ties() {
        let lists = vec![
            sl(0, &[("a", Pos, 0.3)]),
            sl(1, &[("b", Pos, 0.9)]),
            sl(2, &[("c", Pos, 0.5)]),
        ];
        assert_eq!(highest_probability_list(&lists), PairList(vec![Pair::new("b", Pos)]));
        assert_eq!(lowest_probability_list(&lists), PairList(vec![Pair::new("a", Pos)]));
        let tie = vec![sl(0, &[("a", Pos, 0.5)]), sl(1, &[("b", Pos, 0.5)])];
        assert_eq!(highest_probability_list(&tie), PairList(vec![Pair::new("a", Pos)]));
        let empty: Vec<ScoredList> = (0..6).map(|a| sl(a, &[])).collect();
        assert!(highest_probability_list(&empty).is_empty());
    }

    #[test]
    fn most_common_plurality_and_tie_break() {
        let x = [("x", Pos, 0.1)];
        let y = [("y", Neg, 0.95)];
        let lists: Vec<_> = (0..6).map(|a| if a < 4 { sl(a, &x) } else { sl(a, &y) }).collect();
        assert_eq!(most_common_list(&lists), PairList(vec![Pair::new("x", Pos)]));

        let lists = vec![
            sl(0, &[("x", Pos, 0.8)]),
            sl(1, &[("x", Pos, 0.2)]),
            sl(2, &[("x", Pos, 0.1)]),
            sl(3, &[("y", Pos, 0.9)]),
            sl(4, &[("y", Pos, 0.1)]),
            sl(5, &[("y", Pos, 0.1)]),
        ];
        assert_eq!(most_common_list(&lists), PairList(vec![Pair::new("y", Pos)]));

        let cats = ["a", "b", "c", "d", "e", "f"];
        let confs = [0.1, 0.7, 0.3, 0.2, 0.6, 0.5];
        let distinct: Vec<_> = (0..6).map(|a| sl(a, &[(cats[a], Pos, confs[a])])).collect();
        assert_eq!(most_common_list(&distinct), PairList(vec![Pair::new("b", Pos)]));
    }

    #[test]
    fn most_common_ignores_order_and_duplicates() {
        let lists = vec![
            sl(0, &[("b", Pos, 0.5), ("a", Neg, 0.5)]),
            sl(1, &[("a", Neg, 0.5), ("b", Pos, 0.5), ("a", Neg, 0.5)]),
            sl(2, &[("z", Pos, 0.99)]),
        ];
        assert_eq!(
            most_common_list(&lists),
            PairList(vec![Pair::new("a", Neg), Pair::new("b", Pos)])
        );
    }

    #[test]
    fn top_pairs_dedup_max() {
        let lists = vec![
            sl(0, &[("food", Pos, 0.9)]),
            sl(1, &[("food", Pos, 0.7), ("svc", Neg, 0.8)]),
        ];
        assert_eq!(
            highest_probability_pairs(&lists, 2, false),
            PairList(vec![Pair::new("food", Pos), Pair::new("svc", Neg)])
        );
        assert!(highest_probability_pairs(&lists, 0, false).is_empty());
        assert_eq!(highest_probability_pairs(&lists, 10, false).n(), 2);
    }

    #[test]
    fn resolve_conflicts_backfills() {
        let lists = vec![sl(0, &[("food", Pos, 0.9), ("food", Neg, 0.8), ("svc", Neg, 0.7)])];
        assert_eq!(
            highest_probability_pairs(&lists, 2, false),
            PairList(vec![Pair::new("food", Pos), Pair::new("food", Neg)])
        );
        assert_eq!(
            highest_probability_pairs(&lists, 2, true),
            PairList(vec![Pair::new("food", Pos), Pair::new("svc", Neg)])
        );
    }

    struct Fixed(Vec<(&'static str, Vec<f64>)>);
    impl Embedder for Fixed {
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
            Ok(texts
                .iter()
                .map(|t| self.0.iter().find(|(c, _)| c == t).unwrap().1.clone())
                .collect())
        }
    }

    struct Broken;
    impl Embedder for Broken {
        fn embed(&self, _: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
            Err(EmbedError::BadResponse("down".into()))
        }
    }

    #[test]
    fn clustered_orthogonal_categories() {
        let emb = Fixed(vec![("food", vec![1.0, 0.0]), ("svc", vec![0.0, 1.0])]);
        let lists = vec![
            sl(0, &[("food", Pos, 0.6), ("svc", Neg, 0.5)]),
            sl(1, &[("food", Neg, 0.9), ("svc", Pos, 0.3)]),
        ];
        let out = clustered_pairs(&lists, 2, &emb, 1).unwrap();
        assert!(!out.degraded);
        assert_eq!(out.pairs, PairList(vec![Pair::new("food", Neg), Pair::new("svc", Neg)]));
        let one = clustered_pairs(&lists, 1, &emb, 1).unwrap();
        assert_eq!(one.pairs, PairList(vec![Pair::new("food", Neg)]));
        let all = clustered_pairs(&lists, 9, &emb, 1).unwrap();
        assert_eq!(all.pairs.n(), 4);
    }

    #[test]
    fn clustered_falls_back_on_failure() {
        let lists = vec![sl(0, &[("food", Pos, 0.6), ("svc", Neg, 0.5)])];
        let out = clustered_pairs(&lists, 1, &Broken, 1).unwrap();
        assert!(out.degraded);
        assert_eq!(out.pairs, PairList(vec![Pair::new("food", Pos)]));
    }

    #[test]
    fn confident_agent_and_join() {
        let inst = vec![
            vec![sl(0, &[("a", Pos, 0.5)]), sl(1, &[("b", Pos, 0.6)])],
            vec![sl(0, &[("a", Pos, 0.5)]), sl(1, &[("b", Pos, 0.3)])],
        ];
        assert_eq!(most_confident_agent(&inst), Some(0));
        assert_eq!(most_confident_agent(&[]), None);
        let lists = vec![
            sl(0, &[("a", Pos, 0.5), ("b", Pos, 0.5)]),
            sl(1, &[("c", Pos, 0.5), ("d", Neg, 0.5), ("e", Pos, 0.5)]),
        ];
        assert_eq!(joined_agent(&lists).n(), 5);
        let same = vec![sl(0, &[("a", Pos, 0.5)]), sl(1, &[("a", Pos, 0.9)])];
        assert_eq!(joined_agent(&same).n(), 1);
    }

    #[test]
    fn technique_names_round_trip() {
        for t in Technique::HEADLINE
            .into_iter()
            .chain([Technique::Joined, Technique::LowestProbList, Technique::Agent(all_element_orders()[3])])
        {
            assert_eq!(t.to_string().parse::<Technique>().unwrap(), t);
        }
        assert!("best".parse::<Technique>().is_err());
    }

    fn arb_lists() -> impl Strategy<Value = Vec<ScoredList>> {
        let pair = (0usize..4, 0usize..3, 0.0f64..=1.0);
        prop::collection::vec(prop::collection::vec(pair, 0..5), 1..=6).prop_map(|agents| {
            agents
                .into_iter()
                .enumerate()
                .map(|(a, ps)| {
                    let order = all_element_orders()[a];
                    ScoredList::new(
                        ps.into_iter()
                            .map(|(c, p, conf)| ScoredPair {
                                pair: Pair::new(format!("c{c}"), Polarity::TIE_ORDER[p]),
                                confidence: conf,
                                source_agent: order,
                            })
                            .collect(),
                    )
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn no_fabrication(lists in arb_lists(), n in 0usize..8) {
            let all: Vec<Pair> = lists.iter().flat_map(|l| l.pairs.iter().map(|p| p.pair.clone())).collect();
            let emb = HashEmbedder::new(16);
            let outputs = [
                highest_probability_list(&lists),
                most_common_list(&lists),
                highest_probability_pairs(&lists, n, false),
                clustered_pairs(&lists, n, &emb, 3).unwrap().pairs,
                joined_agent(&lists),
            ];
            for out in outputs {
                prop_assert!(out.iter().all(|p| all.contains(p)));
            }
        }

        #[test]
        fn top_pairs_size(lists in arb_lists(), n in 0usize..10) {
            let distinct = pool_unique(&lists).len();
            prop_assert_eq!(highest_probability_pairs(&lists, n, false).n(), n.min(distinct));
        }

        #[test]
        fn clustered_with_k_equal_points_returns_all(lists in arb_lists()) {
            let distinct = pool_unique(&lists).len();
            let out = clustered_pairs(&lists, distinct, &HashEmbedder::new(16), 5).unwrap();
            prop_assert_eq!(canonical_form(&out.pairs), canonical_form(&joined_agent(&lists)));
        }

        #[test]
        fn confident_agent_scale_invariant(lists in arb_lists(), shift in 1i32..6) {
            // powers of two scale exactly, so ties survive
            let c = 2f64.powi(-shift);
            let scaled: Vec<ScoredList> = lists.iter().map(|l| ScoredList::new(
                l.pairs.iter().map(|p| ScoredPair { confidence: p.confidence * c, ..p.clone() }).collect())).collect();
            prop_assert_eq!(
                most_confident_agent(&[lists.clone()]),
                most_confident_agent(&[scaled])
            );
        }
    }
}
