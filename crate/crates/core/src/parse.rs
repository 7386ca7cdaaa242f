//! Post-processing of raw generations.
//!
//! The answer is expected to be a Python-style list of 2-tuples of string
//! literals somewhere in the generation. Everything outside that list is
//! ignored. Categories are repaired against the schema with a
//! `SequenceMatcher.ratio`-style similarity (longest common block, recursing
//! on both sides), and polarities are normalised the same way.
//!
//! All spans are UTF-8 byte offsets into the generation text.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{CategorySchema, Pair, PairList, Polarity};

pub type Span = (usize, usize);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no list of tuples found in generation")]
    EmptyParse,
}

/// A tuple as it appeared in the generation, before schema mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTuple {
    pub category: String,
    pub polarity: String,
    pub category_span: Span,
    pub polarity_span: Span,
}

/// The list literal chosen from a generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedList {
    pub tuples: Vec<RawTuple>,
    pub list_char_span: Span,
    /// Tuples skipped because of arity other than two or non-string items.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedPair {
    pub raw_category: String,
    pub raw_polarity: String,
    pub mapped_category: String,
    pub mapped_polarity: Polarity,
    pub category_span: Span,
    pub polarity_span: Span,
    pub match_ratio: f64,
}

impl ParsedPair {
    pub fn pair(&self) -> Pair {
        Pair::new(self.mapped_category.clone(), self.mapped_polarity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedList {
    pub pairs: Vec<ParsedPair>,
    pub list_char_span: Span,
    pub dropped: usize,
    /// Pairs removed because their category similarity fell below the floor.
    pub below_floor: usize,
}

impl ParsedList {
    pub fn pair_list(&self) -> PairList {
        self.pairs.iter().map(ParsedPair::pair).collect()
    }
}

/// Mapping knobs. The default floor of 0 maps every raw category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MappingOptions {
    pub min_ratio: f64,
}

enum Item {
    Str(String, Span),
    Other,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while let Some(b) = self.peek() {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn eat(&mut self, b: u8) -> bool {
        if self.peek() == Some(b) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    /// A quoted literal with backslash escapes; returns decoded content and
    /// the span between the quotes.
    fn string(&mut self) -> Option<(String, Span)> {
        let quote = self.peek()?;
        if quote != b'\'' && quote != b'"' {
            return None;
        }
        self.pos += 1;
        let start = self.pos;
        let mut out = String::new();
        loop {
            let b = self.peek()?;
            if b == quote {
                let end = self.pos;
                self.pos += 1;
                return Some((out, (start, end)));
            }
            if b == b'\n' {
                return None;
            }
            if b == b'\\' {
                self.pos += 1;
                let esc = self.peek()?;
                let ch = self.text[self.pos..].chars().next()?;
                match esc {
                    b'n' => out.push('\n'),
                    b't' => out.push('\t'),
                    _ => out.push(ch),
                }
                self.pos += ch.len_utf8();
                continue;
            }
            let ch = self.text[self.pos..].chars().next()?;
            out.push(ch);
            self.pos += ch.len_utf8();
        }
    }

    /// A bare item inside a tuple, e.g. `positive` or `3`; consumed up to the
    /// next `,` or `)`.
    fn bare(&mut self) -> bool {
        let start = self.pos;
        while let Some(b) = self.peek() {
            if matches!(b, b',' | b')' | b'(' | b'[' | b']' | b'\n') {
                break;
            }
            self.pos += 1;
        }
        self.pos > start
    }

    fn tuple(&mut self) -> Option<Vec<Item>> {
        if !self.eat(b'(') {
            return None;
        }
        let mut items = Vec::new();
        loop {
            self.skip_ws();
            if self.eat(b')') {
                return Some(items);
            }
            match self.peek()? {
                b'\'' | b'"' => {
                    let (s, span) = self.string()?;
                    items.push(Item::Str(s, span));
                }
                _ => {
                    if !self.bare() {
                        return None;
                    }
                    items.push(Item::Other);
                }
            }
            self.skip_ws();
            if self.eat(b',') {
                continue;
            }
            if self.eat(b')') {
                return Some(items);
            }
            return None;
        }
    }

    /// `[` tuple (`,` tuple)* `,`? `]` starting at the current position.
    fn list(&mut self) -> Option<(Vec<Vec<Item>>, Span)> {
        let start = self.pos;
        if !self.eat(b'[') {
            return None;
        }
        let mut tuples = Vec::new();
        loop {
            self.skip_ws();
            if self.eat(b']') {
                return Some((tuples, (start, self.pos)));
            }
            tuples.push(self.tuple()?);
            self.skip_ws();
            if self.eat(b',') {
                continue;
            }
            if self.eat(b']') {
                return Some((tuples, (start, self.pos)));
            }
            return None;
        }
    }
}

/// Finds the last list-of-tuples literal in `text`.
pub fn extract_list(text: &str) -> Result<ExtractedList, ParseError> {
    let bytes = text.as_bytes();
    let mut best = None;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'[' {
            i += 1;
            continue;
        }
        let mut cur = Cursor { bytes, text, pos: i };
        match cur.list() {
            Some(found) => {
                i = cur.pos;
                best = Some(found);
            }
            None => i += 1,
        }
    }
    let (tuples, span) = best.ok_or(ParseError::EmptyParse)?;
    let mut out = Vec::new();
    let mut dropped = 0;
    for items in tuples {
        match items.as_slice() {
            [Item::Str(c, cs), Item::Str(p, ps)] => out.push(RawTuple {
                category: c.clone(),
                polarity: p.clone(),
                category_span: *cs,
                polarity_span: *ps,
            }),
            _ => dropped += 1,
        }
    }
    Ok(ExtractedList {
        tuples: out,
        list_char_span: span,
        dropped,
    })
}

fn fold(s: &str) -> Vec<char> {
    s.to_lowercase().chars().collect()
}

/// Longest common contiguous block of `a[alo..ahi]` and `b[blo..bhi]`.
///
/// Among blocks of maximal length the one starting earliest in `a` wins, then
/// earliest in `b`. Returns `(i, j, len)`.
fn longest_block(a: &[char], b: &[char], alo: usize, ahi: usize, blo: usize, bhi: usize) -> (usize, usize, usize) {
    let (mut bi, mut bj, mut bk) = (alo, blo, 0);
    // run[j + 1] = length of the common suffix ending at a[i], b[j]
    let width = bhi - blo + 1;
    let mut prev = vec![0usize; width];
    let mut cur = vec![0usize; width];
    for i in alo..ahi {
        for j in blo..bhi {
            let k = if a[i] == b[j] { prev[j - blo] + 1 } else { 0 };
            cur[j - blo + 1] = k;
            if k > bk {
                bi = i + 1 - k;
                bj = j + 1 - k;
                bk = k;
            }
        }
        std::mem::swap(&mut prev, &mut cur);
        cur.iter_mut().for_each(|v| *v = 0);
    }
    (bi, bj, bk)
}

fn matched_chars(a: &[char], b: &[char]) -> usize {
    let mut total = 0;
    let mut queue = vec![(0, a.len(), 0, b.len())];
    while let Some((alo, ahi, blo, bhi)) = queue.pop() {
        if alo >= ahi || blo >= bhi {
            continue;
        }
        let (i, j, k) = longest_block(a, b, alo, ahi, blo, bhi);
        if k == 0 {
            continue;
        }
        total += k;
        queue.push((alo, i, blo, j));
        queue.push((i + k, ahi, j + k, bhi));
    }
    total
}

/// `2M / (|a| + |b|)` over case-folded characters, where `M` is the total
/// length of the recursively found longest common blocks. Two empty strings
/// are identical (1.0).
pub fn similarity(a: &str, b: &str) -> f64 {
    let a = fold(a);
    let b = fold(b);
    let total = a.len() + b.len();
    if total == 0 {
        return 1.0;
    }
    2.0 * matched_chars(&a, &b) as f64 / total as f64
}

/// Best-matching schema label for `raw`; earlier labels win ties.
///
/// # Panics
///
/// If `schema` is empty. Schemas built through ingestion never are.
pub fn map_category(raw: &str, schema: &CategorySchema) -> (String, f64) {
    let mut best: Option<(&String, f64)> = None;
    for label in schema.labels() {
        let r = similarity(raw, label);
        if best.map_or(true, |(_, b)| r > b) {
            best = Some((label, r));
        }
    }
    let (label, ratio) = best.expect("map_category needs a non-empty schema");
    (label.clone(), ratio)
}

/// Exact case-folded match, else the most similar of the three labels
/// (ties resolved positive, neutral, negative).
pub fn map_polarity(raw: &str) -> Polarity {
    if let Ok(p) = raw.trim().parse::<Polarity>() {
        return p;
    }
    let mut best = (Polarity::TIE_ORDER[0], f64::NEG_INFINITY);
    for pol in Polarity::TIE_ORDER {
        let r = similarity(raw, pol.as_str());
        if r > best.1 {
            best = (pol, r);
        }
    }
    best.0
}

/// Extracts the answer list and maps every tuple onto the schema.
pub fn parse_generation(
    text: &str,
    schema: &CategorySchema,
    opts: MappingOptions,
) -> Result<ParsedList, ParseError> {
    let extracted = extract_list(text)?;
    let mut pairs = Vec::with_capacity(extracted.tuples.len());
    let mut below_floor = 0;
    for t in extracted.tuples {
        let (label, ratio) = map_category(&t.category, schema);
        if ratio < opts.min_ratio {
            below_floor += 1;
            continue;
        }
        pairs.push(ParsedPair {
            mapped_polarity: map_polarity(&t.polarity),
            raw_category: t.category,
            raw_polarity: t.polarity,
            mapped_category: label,
            category_span: t.category_span,
            polarity_span: t.polarity_span,
            match_ratio: ratio,
        });
    }
    Ok(ParsedList {
        pairs,
        list_char_span: extracted.list_char_span,
        dropped: extracted.dropped,
        below_floor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent brute force of the block recursion: enumerate every
    /// substring of `a` from longest to shortest, first by start in `a`, and
    /// look it up in `b` with a linear scan.
    fn oracle_matched(a: &[char], b: &[char]) -> usize {
        if a.is_empty() || b.is_empty() {
            return 0;
        }
        for len in (1..=a.len().min(b.len())).rev() {
            for i in 0..=a.len() - len {
                let needle = &a[i..i + len];
                if let Some(j) = (0..=b.len() - len).find(|&j| &b[j..j + len] == needle) {
                    return len
                        + oracle_matched(&a[..i], &b[..j])
                        + oracle_matched(&a[i + len..], &b[j + len..]);
                }
            }
        }
        0
    }

    fn oracle_similarity(a: &str, b: &str) -> f64 {
        let a = fold(a);
        let b = fold(b);
        if a.is_empty() && b.is_empty() {
            return 1.0;
        }
        2.0 * oracle_matched(&a, &b) as f64 / (a.len() + b.len()) as f64
    }

    fn schema(labels: &[&str]) -> CategorySchema {
        CategorySchema::new("restaurant", labels.iter().copied()).unwrap()
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity("food", "food"), 1.0);
        assert_eq!(similarity("", "x"), 0.0);
        assert_eq!(similarity("", ""), 1.0);
        assert!((similarity("foood", "food") - 8.0 / 9.0).abs() < 1e-12);
        assert!((oracle_similarity("foood", "food") - 8.0 / 9.0).abs() < 1e-12);
        assert_eq!(similarity("FOOD#QUALITY", "food#quality"), 1.0);
    }

    #[test]
    fn block_tie_break_prefers_earliest_in_a() {
        // "ab" matches at a[0] and a[3]; difflib takes a[0] and then finds
        // nothing on the right that b still has.
        assert_eq!(matched_chars(&fold("abxab"), &fold("ab")), 2);
        assert_eq!(oracle_matched(&fold("abxab"), &fold("ab")), 2);
    }

    #[test]
    fn map_category_examples() {
        let s = schema(&["food", "menu"]);
        let (l, r) = map_category("fod", &s);
        assert_eq!(l, "food");
        assert!((r - 6.0 / 7.0).abs() < 1e-12);
        // no character of "fod" occurs in "menu"
        assert_eq!(oracle_similarity("fod", "menu"), 0.0);
        assert_eq!(similarity("fod", "menu"), 0.0);
        assert_eq!(map_category("", &s), ("food".to_string(), 0.0));
        let r16 = schema(&["FOOD#QUALITY", "SERVICE#GENERAL"]);
        assert_eq!(map_category("SERVICE#GENERAL", &r16), ("SERVICE#GENERAL".to_string(), 1.0));
        assert_eq!(map_category("service#general", &r16).1, 1.0);
    }

    #[test]
    fn map_polarity_examples() {
        assert_eq!(map_polarity("Negative"), Polarity::Negative);
        assert_eq!(map_polarity("positive"), Polarity::Positive);
        // oracle ratios: neutral 14/15, negative 2*4/16, positive 2*3/16
        assert!((oracle_similarity("neutral.", "neutral") - 14.0 / 15.0).abs() < 1e-12);
        assert_eq!(map_polarity("neutral."), Polarity::Neutral);
        assert_eq!(map_polarity(""), Polarity::Positive);
    }

    #[test]
    fn extract_simple_list() {
        let text = "blah [('food','positive')] bye";
        let l = extract_list(text).unwrap();
        assert_eq!(l.tuples.len(), 1);
        let t = &l.tuples[0];
        assert_eq!(&text[t.category_span.0..t.category_span.1], "food");
        assert_eq!(&text[t.polarity_span.0..t.polarity_span.1], "positive");
        assert!(l.list_char_span.0 <= t.category_span.0 && t.polarity_span.1 <= l.list_char_span.1);
        assert_eq!(&text[l.list_char_span.0..l.list_char_span.1], "[('food','positive')]");
    }

    #[test]
    fn last_list_wins() {
        let text = "1. Categories: [menu, service]\nDraft: [('menu', 'positive')]\nFinal:\n[('menu', 'negative'), ('food', 'negative'),]";
        let l = extract_list(text).unwrap();
        assert_eq!(l.list_char_span, (text.find("[('menu', 'negative')").unwrap(), text.len()));
        assert_eq!(l.tuples.len(), 2);
        assert_eq!(l.tuples[0].polarity, "negative");
    }

    #[test]
    fn appendix_thread_answer() {
        let l = extract_list("[('menu', 'negative'),\n ('food', 'negative')]").unwrap();
        assert_eq!(l.tuples.len(), 2);
        assert_eq!(l.tuples[1].category, "food");
    }

    #[test]
    fn quotes_and_bad_arity() {
        let text = r#"[("food", 'positive'), ('service',), ('a', 'b', 'c'), ('price', negative)]"#;
        let l = extract_list(text).unwrap();
        assert_eq!(l.tuples.len(), 1);
        assert_eq!(l.dropped, 3);
        assert_eq!(extract_list("no list here"), Err(ParseError::EmptyParse));
        assert_eq!(extract_list("['menu', 'food']"), Err(ParseError::EmptyParse));
        assert!(extract_list("[]").unwrap().tuples.is_empty());
    }

    #[test]
    fn escaped_quote_in_literal() {
        let l = extract_list(r"[('chef\'s special', 'positive')]").unwrap();
        assert_eq!(l.tuples[0].category, "chef's special");
    }

    #[test]
    fn parse_generation_maps_and_floors() {
        let s = schema(&["food", "menu", "service"]);
        let text = "[('Fooood', 'Positive'), ('servce', 'neg'), ('zzzz', 'neutral')]";
        let parsed = parse_generation(text, &s, MappingOptions::default()).unwrap();
        assert_eq!(parsed.pairs.len(), 3);
        assert_eq!(parsed.pairs[0].pair(), Pair::new("food", Polarity::Positive));
        assert_eq!(parsed.pairs[1].pair(), Pair::new("service", Polarity::Negative));
        let floored = parse_generation(text, &s, MappingOptions { min_ratio: 0.5 }).unwrap();
        assert_eq!(floored.pairs.len(), 2);
        assert_eq!(floored.below_floor, 1);
    }

    proptest! {
        #[test]
        fn similarity_matches_oracle(a in "[abc]{0,9}", b in "[abc]{0,9}") {
            let fast = similarity(&a, &b);
            let slow = oracle_similarity(&a, &b);
            prop_assert!((fast - slow).abs() < 1e-12, "{a} {b} {fast} {slow}");
            prop_assert!((0.0..=1.0).contains(&fast));
            prop_assert_eq!(fast == 1.0, a.to_lowercase() == b.to_lowercase());
        }

        #[test]
        fn extract_spans_in_bounds(text in "[\\[\\]()'\", a-z]{0,40}") {
            if let Ok(l) = extract_list(&text) {
                prop_assert!(l.list_char_span.1 <= text.len());
                for t in &l.tuples {
                    prop_assert!(t.category_span.1 <= text.len() && t.polarity_span.1 <= text.len());
                    prop_assert!(l.list_char_span.0 <= t.category_span.0);
                    prop_assert!(t.polarity_span.1 <= l.list_char_span.1);
                }
            }
        }

        #[test]
        fn map_category_total(raw in "\\PC{0,20}") {
            let s = schema(&["FOOD#QUALITY", "SERVICE#GENERAL", "AMBIENCE#GENERAL"]);
            let (label, ratio) = map_category(&raw, &s);
            prop_assert!(s.contains(&label));
            prop_assert!((ratio - similarity(&raw, &label)).abs() < 1e-15);
        }
    }
}
