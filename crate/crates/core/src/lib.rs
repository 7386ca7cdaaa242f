//! Zero-shot aspect-category sentiment analysis with an ensemble of
//! chain-of-thought agents.
//!
//! Six agents prompt the same model with the aspect, category and opinion
//! extraction steps in each possible order. Their answer lists are parsed,
//! scored from token log-probabilities and combined by one of several
//! aggregation techniques before micro-F1 evaluation.

pub mod aggregate;
pub mod confidence;
pub mod datasets;
pub mod domain;
pub mod eval;
pub mod llm;
pub mod parse;
pub mod pipeline;
pub mod prompts;

pub use domain::{
    all_element_orders, canonical_form, CategorySchema, Element, ElementOrder, Instance, Pair, PairList, Polarity,
    ScoredList, ScoredPair, Split,
};
