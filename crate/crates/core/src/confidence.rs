//! Pair and list confidence from token log-probabilities.
//!
//! A pair's confidence is the arithmetic mean of `exp(logprob)` over every
//! token that overlaps its category or polarity literal, skipping tokens made
//! only of punctuation, brackets, quotes or whitespace.

use thiserror::Error;

use crate::domain::{ElementOrder, ScoredList, ScoredPair};
use crate::llm::TokenProb;
use crate::parse::{ParsedList, ParsedPair, Span};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AlignmentError {
    #[error("span {span:?} extends past token coverage ending at byte {covered}")]
    OutsideCoverage { span: Span, covered: usize },
}

fn overlaps(a: Span, b: Span) -> bool {
    a.0 < b.1 && b.0 < a.1
}

/// True when the token carries no letters or digits.
pub fn is_special_token(token: &str) -> bool {
    !token.chars().any(char::is_alphanumeric)
}

pub fn score_pair(pair: &ParsedPair, tokens: &[TokenProb]) -> Result<f64, AlignmentError> {
    let covered = tokens.last().map_or(0, |t| t.char_span.1);
    for span in [pair.category_span, pair.polarity_span] {
        if span.1 > covered {
            return Err(AlignmentError::OutsideCoverage { span, covered });
        }
    }
    let (sum, count) = tokens
        .iter()
        .filter(|t| overlaps(t.char_span, pair.category_span) || overlaps(t.char_span, pair.polarity_span))
        .filter(|t| !is_special_token(&t.token_text))
        .fold((0.0, 0usize), |(s, n), t| (s + t.prob(), n + 1));
    if count == 0 {
        return Ok(0.0);
    }
    Ok((sum / count as f64).clamp(0.0, 1.0))
}

/// Mean of the pair confidences; 0 for an empty list.
pub fn score_list(pairs: &[ScoredPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|p| p.confidence).sum::<f64>() / pairs.len() as f64
}

/// Scores every parsed pair of one agent's generation.
pub fn score_parsed(
    parsed: &ParsedList,
    tokens: &[TokenProb],
    agent: ElementOrder,
) -> Result<ScoredList, AlignmentError> {
    let pairs = parsed
        .pairs
        .iter()
        .map(|p| {
            Ok(ScoredPair {
                pair: p.pair(),
                confidence: score_pair(p, tokens)?,
                source_agent: agent,
            })
        })
        .collect::<Result<Vec<_>, AlignmentError>>()?;
    Ok(ScoredList::new(pairs))
}

/// Sum of list confidences over a dataset for one agent.
pub fn agent_dataset_confidence<'a>(lists: impl IntoIterator<Item = &'a ScoredList>) -> f64 {
    lists.into_iter().map(|l| l.list_confidence).sum()
}
