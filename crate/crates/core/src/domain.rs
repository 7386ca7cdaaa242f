//! Core vocabulary: polarities, category/polarity pairs, category schemas,
//! chain-of-thought element orders and scored agent outputs.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("unknown polarity `{0}`; expected positive, neutral or negative")]
    UnknownPolarity(String),
    #[error("invalid element order `{0}`")]
    InvalidOrder(String),
    #[error("invalid category schema: {0}")]
    InvalidSchema(String),
    #[error("unknown split `{0}`")]
    UnknownSplit(String),
}

/// Sentiment polarity of a category mention.
///
/// Variant order follows byte-wise order of the labels so that sorting pairs
/// by `(category, polarity)` agrees with sorting their string forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Negative,
    Neutral,
    Positive,
}

impl Polarity {
    /// Fixed order used whenever a tie between polarities has to be broken.
    pub const TIE_ORDER: [Polarity; 3] = [Polarity::Positive, Polarity::Neutral, Polarity::Negative];

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Neutral => "neutral",
            Polarity::Negative => "negative",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Polarity {
    type Err = DomainError;

    /// Case-folded exact match; anything else is an error.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_lowercase().as_str() {
            "positive" => Ok(Polarity::Positive),
            "neutral" => Ok(Polarity::Neutral),
            "negative" => Ok(Polarity::Negative),
            _ => Err(DomainError::UnknownPolarity(s.to_string())),
        }
    }
}

impl Serialize for Polarity {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Polarity {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// One `(category, polarity)` prediction.
///
/// Serialized as a two-element array `["FOOD#QUALITY", "positive"]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Pair {
    pub category: String,
    pub polarity: Polarity,
}

impl Pair {
    pub fn new(category: impl Into<String>, polarity: Polarity) -> Self {
        Self {
            category: category.into(),
            polarity,
        }
    }
}

impl PartialOrd for Pair {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pair {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.category
            .as_bytes()
            .cmp(other.category.as_bytes())
            .then(self.polarity.cmp(&other.polarity))
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "('{}', '{}')", self.category, self.polarity)
    }
}

impl Serialize for Pair {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        (&self.category, self.polarity).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pair {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let (category, polarity) = <(String, Polarity)>::deserialize(deserializer)?;
        Ok(Pair { category, polarity })
    }
}

/// Ordered sequence of pairs; duplicates are allowed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PairList(pub Vec<Pair>);

impl PairList {
    pub fn new(pairs: Vec<Pair>) -> Self {
        Self(pairs)
    }

    /// Number of pairs, duplicates included.
    pub fn n(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Pair> {
        self.0.iter()
    }

    /// Renders the list the way a Python `repr` of a list of tuples looks.
    pub fn to_python_literal(&self) -> String {
        let items: Vec<String> = self.0.iter().map(|p| p.to_string()).collect();
        format!("[{}]", items.join(", "))
    }
}

impl FromIterator<Pair> for PairList {
    fn from_iter<I: IntoIterator<Item = Pair>>(iter: I) -> Self {
        PairList(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a PairList {
    type Item = &'a Pair;
    type IntoIter = std::slice::Iter<'a, Pair>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Exact dedup followed by a byte-wise sort on `(category, polarity)`.
pub fn canonical_form(list: &PairList) -> PairList {
    let mut pairs = list.0.clone();
    pairs.sort();
    pairs.dedup();
    PairList(pairs)
}

/// Ordered list of admissible category labels for a domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySchema {
    labels: Vec<String>,
    domain_name: String,
}

impl CategorySchema {
    pub fn new(
        domain_name: impl Into<String>,
        labels: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<Self, DomainError> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for label in &labels {
            if label.is_empty() {
                return Err(DomainError::InvalidSchema("empty label".into()));
            }
            if !seen.insert(label.to_lowercase()) {
                return Err(DomainError::InvalidSchema(format!("duplicate label `{label}`")));
            }
        }
        Ok(Self {
            labels,
            domain_name: domain_name.into(),
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn domain_name(&self) -> &str {
        &self.domain_name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    /// Same labels in a seeded pseudo-random order.
    pub fn shuffled(&self, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut labels = self.labels.clone();
        labels.shuffle(&mut rng);
        Self {
            labels,
            domain_name: self.domain_name.clone(),
        }
    }
}

/// One of the three reasoning steps in a chain-of-thought prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    Aspect,
    Category,
    Opinion,
}

impl Element {
    pub fn letter(self) -> char {
        match self {
            Element::Aspect => 'A',
            Element::Category => 'C',
            Element::Opinion => 'O',
        }
    }

    /// Plural noun used in answer slots and back-references ("Aspects").
    pub fn plural(self) -> &'static str {
        match self {
            Element::Aspect => "Aspects",
            Element::Category => "Categories",
            Element::Opinion => "Opinions",
        }
    }

    fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'A' => Some(Element::Aspect),
            'C' => Some(Element::Category),
            'O' => Some(Element::Opinion),
            _ => None,
        }
    }
}

/// A permutation of the three elements; identifies one CoT agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ElementOrder([Element; 3]);

impl ElementOrder {
    pub fn new(sequence: [Element; 3]) -> Result<Self, DomainError> {
        let [a, b, c] = sequence;
        if a == b || b == c || a == c {
            return Err(DomainError::InvalidOrder(format!("{sequence:?}")));
        }
        Ok(Self(sequence))
    }

    pub fn elements(&self) -> [Element; 3] {
        self.0
    }

    /// Short identifier such as `AOC`.
    pub fn code(&self) -> String {
        self.0.iter().map(|e| e.letter()).collect()
    }

    /// 1-based position of an element within the order.
    pub fn step_of(&self, element: Element) -> usize {
        self.0.iter().position(|e| *e == element).map(|i| i + 1).unwrap_or(0)
    }

    /// Index of this order within [`all_element_orders`].
    pub fn agent_index(&self) -> usize {
        all_element_orders()
            .iter()
            .position(|o| o == self)
            .expect("every permutation is enumerated")
    }
}

impl fmt::Display for ElementOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.0;
        write!(f, "{}>{}>{}", a.letter(), b.letter(), c.letter())
    }
}

impl FromStr for ElementOrder {
    type Err = DomainError;

    /// Accepts `AOC`, `A>O>C` or `A▷O▷C`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let letters: Vec<Element> = s
            .chars()
            .filter(|c| !matches!(c, '>' | '▷' | ' ' | '-'))
            .map(|c| Element::from_letter(c).ok_or_else(|| DomainError::InvalidOrder(s.into())))
            .collect::<Result<_, _>>()?;
        let seq: [Element; 3] = letters
            .try_into()
            .map_err(|_| DomainError::InvalidOrder(s.into()))?;
        ElementOrder::new(seq).map_err(|_| DomainError::InvalidOrder(s.into()))
    }
}

impl Serialize for ElementOrder {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.code())
    }
}

impl<'de> Deserialize<'de> for ElementOrder {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// All six element orders, lexicographic with Aspect < Category < Opinion.
pub fn all_element_orders() -> [ElementOrder; 6] {
    use Element::*;
    [
        ElementOrder([Aspect, Category, Opinion]),
        ElementOrder([Aspect, Opinion, Category]),
        ElementOrder([Category, Aspect, Opinion]),
        ElementOrder([Category, Opinion, Aspect]),
        ElementOrder([Opinion, Aspect, Category]),
        ElementOrder([Opinion, Category, Aspect]),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" | "dev" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(DomainError::UnknownSplit(s.into())),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A review (or review sentence) with its conflict-free gold pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub text: String,
    pub gold: PairList,
    pub split: Split,
    pub dataset: String,
}

/// Returns true when some category carries two different polarities.
pub fn has_conflict(list: &PairList) -> bool {
    let canon = canonical_form(list);
    canon.0.windows(2).any(|w| w[0].category == w[1].category)
}

/// A pair annotated with the confidence derived from token probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub pair: Pair,
    pub confidence: f64,
    pub source_agent: ElementOrder,
}

/// One agent's answer list together with its mean pair confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredList {
    pub pairs: Vec<ScoredPair>,
    pub list_confidence: f64,
}

impl ScoredList {
    /// Builds the list, computing `list_confidence` as the mean of the pair
    /// confidences (0 for an empty list).
    pub fn new(pairs: Vec<ScoredPair>) -> Self {
        let list_confidence = crate::confidence::score_list(&pairs);
        Self {
            pairs,
            list_confidence,
        }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    pub fn pair_list(&self) -> PairList {
        self.pairs.iter().map(|sp| sp.pair.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(c: &str, pol: Polarity) -> Pair {
        Pair::new(c, pol)
    }

    #[test]
    fn six_orders_first_and_last() {
        let orders = all_element_orders();
        assert_eq!(orders.len(), 6);
        assert_eq!(orders[0].code(), "ACO");
        assert_eq!(orders[5].code(), "OCA");
        let set: HashSet<_> = orders.iter().collect();
        assert_eq!(set.len(), 6);
        for o in orders {
            let els: HashSet<_> = o.elements().into_iter().collect();
            assert_eq!(els.len(), 3);
        }
        let mut sorted = orders;
        sorted.sort();
        assert_eq!(sorted, orders);
    }

    #[test]
    fn order_parsing() {
        assert_eq!("A>O>C".parse::<ElementOrder>().unwrap().code(), "AOC");
        assert_eq!("O▷C▷A".parse::<ElementOrder>().unwrap().code(), "OCA");
        assert!("AAC".parse::<ElementOrder>().is_err());
        assert!("AC".parse::<ElementOrder>().is_err());
        assert_eq!("OCA".parse::<ElementOrder>().unwrap().agent_index(), 5);
    }

    #[test]
    fn canonical_form_examples() {
        use Polarity::*;
        let l = PairList(vec![p("food", Positive), p("food", Positive), p("service", Negative)]);
        assert_eq!(canonical_form(&l), PairList(vec![p("food", Positive), p("service", Negative)]));
        assert_eq!(canonical_form(&PairList::default()), PairList::default());
        let l = PairList(vec![p("b", Negative), p("a", Positive)]);
        assert_eq!(canonical_form(&l), PairList(vec![p("a", Positive), p("b", Negative)]));
    }

    #[test]
    fn polarity_strictness() {
        assert_eq!("Negative".parse::<Polarity>().unwrap(), Polarity::Negative);
        assert!("conflict".parse::<Polarity>().is_err());
        assert!("neutral.".parse::<Polarity>().is_err());
    }

    #[test]
    fn pair_serializes_as_tuple() {
        let json = serde_json::to_string(&p("FOOD#QUALITY", Polarity::Positive)).unwrap();
        assert_eq!(json, r#"["FOOD#QUALITY","positive"]"#);
        let back: Pair = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p("FOOD#QUALITY", Polarity::Positive));
    }

    #[test]
    fn schema_rejects_casefold_duplicates() {
        assert!(CategorySchema::new("r", ["food", "FOOD"]).is_err());
        assert!(CategorySchema::new("r", ["food", ""]).is_err());
        let s = CategorySchema::new("r", ["food", "menu"]).unwrap();
        assert_eq!(s.labels(), ["food", "menu"]);
        let sh = s.shuffled(7);
        assert_eq!(sh.len(), 2);
        assert_eq!(sh, s.shuffled(7));
    }

    #[test]
    fn empty_scored_list_has_zero_confidence() {
        assert_eq!(ScoredList::empty().list_confidence, 0.0);
    }

    #[test]
    fn conflict_detection() {
        use Polarity::*;
        assert!(has_conflict(&PairList(vec![p("food", Positive), p("food", Negative)])));
        assert!(!has_conflict(&PairList(vec![p("food", Positive), p("food", Positive)])));
    }

    fn arb_pair() -> impl Strategy<Value = Pair> {
        ("[a-d]{1,2}", 0..3usize).prop_map(|(c, i)| Pair::new(c, Polarity::TIE_ORDER[i]))
    }

    proptest! {
        #[test]
        fn canonical_form_idempotent_and_order_insensitive(
            pairs in prop::collection::vec(arb_pair(), 0..12),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let list = PairList(pairs);
            let once = canonical_form(&list);
            prop_assert_eq!(canonical_form(&once), once.clone());
            let mut shuffled = list.0.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(canonical_form(&PairList(shuffled)), once);
        }

        #[test]
        fn scored_list_mean(confs in prop::collection::vec(0.0f64..=1.0, 1..8)) {
            let order = all_element_orders()[0];
            let pairs: Vec<ScoredPair> = confs
                .iter()
                .map(|&c| ScoredPair { pair: Pair::new("x", Polarity::Neutral), confidence: c, source_agent: order })
                .collect();
            let list = ScoredList::new(pairs);
            let mean = confs.iter().sum::<f64>() / confs.len() as f64;
            prop_assert!((list.list_confidence - mean).abs() < 1e-12);
        }
    }
}
