//! Dataset ingestion into a normalised JSONL corpus.
//!
//! Supported inputs:
//!
//! * SemEval-2016 Task 5 XML (`laptop16`, `restaurant16`): every `sentence`
//!   element with a `text` child and `Opinion` descendants carrying
//!   `category` and `polarity` attributes.
//! * MAMS aspect-category XML (`mams`): `sentence` elements with `text` and
//!   `aspectCategories/aspectCategory[category, polarity]`.
//! * Shoes quads (`shoes`), either JSONL, one review per line:
//!   `{"id": .., "text": .., "quads": [{"aspect", "category", "opinion", "sentiment"}, ..]}`
//!   (quads may also be 4-element arrays, `review` may replace `text`), or
//!   TSV, one quad per line: `id  text  aspect  category  opinion  sentiment`.
//!
//! Gold pairs are deduplicated in first-appearance order. Instances whose
//! gold has a category with two polarities, an unrecognised polarity, or no
//! pairs at all are dropped and counted in the [`IngestReport`].

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{has_conflict, CategorySchema, DomainError, Instance, Pair, PairList, Polarity, Split};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: malformed XML: {message}")]
    Xml {
        path: PathBuf,
        line: u32,
        column: u32,
        message: String,
    },
    #[error("{path}:{line}: {message}")]
    Record { path: PathBuf, line: usize, message: String },
    #[error("unknown dataset `{0}` (expected laptop16, restaurant16, mams or shoes)")]
    UnknownDataset(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Sentence,
    Review,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Laptop16,
    Restaurant16,
    Mams,
    Shoes,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Laptop16 => "laptop16",
            DatasetKind::Restaurant16 => "restaurant16",
            DatasetKind::Mams => "mams",
            DatasetKind::Shoes => "shoes",
        }
    }

    /// Domain word substituted into prompts.
    pub fn domain(self) -> &'static str {
        match self {
            DatasetKind::Laptop16 => "laptop",
            DatasetKind::Restaurant16 | DatasetKind::Mams => "restaurant",
            DatasetKind::Shoes => "shoes",
        }
    }

    pub fn granularity(self) -> Granularity {
        match self {
            DatasetKind::Shoes => Granularity::Review,
            _ => Granularity::Sentence,
        }
    }

    /// Fixed label order where one is known; other datasets take the order
    /// in which labels first appear in the data.
    pub fn builtin_labels(self) -> Option<&'static [&'static str]> {
        match self {
            DatasetKind::Restaurant16 => Some(&[
                "FOOD#QUALITY",
                "AMBIENCE#GENERAL",
                "SERVICE#GENERAL",
                "RESTAURANT#PRICES",
                "DRINKS#QUALITY",
                "FOOD#PRICES",
                "RESTAURANT#MISCELLANEOUS",
                "LOCATION#GENERAL",
                "DRINKS#STYLE_OPTIONS",
                "DRINKS#PRICES",
                "FOOD#STYLE_OPTIONS",
                "RESTAURANT#GENERAL",
            ]),
            DatasetKind::Mams => Some(&[
                "menu",
                "service",
                "price",
                "ambience",
                "place",
                "staff",
                "miscellaneous",
                "food",
            ]),
            _ => None,
        }
    }
}

impl FromStr for DatasetKind {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "laptop16" | "laptop" => Ok(DatasetKind::Laptop16),
            "restaurant16" | "restaurant" => Ok(DatasetKind::Restaurant16),
            "mams" => Ok(DatasetKind::Mams),
            "shoes" => Ok(DatasetKind::Shoes),
            _ => Err(DatasetError::UnknownDataset(s.to_string())),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Counts of what ingestion kept and dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub kept: usize,
    pub dropped_conflict: usize,
    pub dropped_empty_gold: usize,
    pub dropped_unknown_polarity: usize,
    /// Shoes quads or TSV lines lacking a category or sentiment.
    pub skipped_records: usize,
}

impl IngestReport {
    pub fn merge(&mut self, other: &IngestReport) {
        self.kept += other.kept;
        self.dropped_conflict += other.dropped_conflict;
        self.dropped_empty_gold += other.dropped_empty_gold;
        self.dropped_unknown_polarity += other.dropped_unknown_polarity;
        self.skipped_records += other.skipped_records;
    }
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub instances: Vec<Instance>,
    pub report: IngestReport,
}

/// Raw annotations of one text before filtering.
struct Candidate {
    id: String,
    text: String,
    labels: Vec<(String, String)>,
}

fn finish(candidates: Vec<Candidate>, dataset: &str, split: Split, skipped: usize) -> Ingested {
    let mut out = Ingested::default();
    out.report.skipped_records = skipped;
    for c in candidates {
        let mut gold: Vec<Pair> = Vec::new();
        let mut unknown = false;
        for (category, polarity) in c.labels {
            match polarity.trim().parse::<Polarity>() {
                Ok(p) => {
                    let pair = Pair::new(category.trim(), p);
                    if !gold.contains(&pair) {
                        gold.push(pair);
                    }
                }
                Err(_) => unknown = true,
            }
        }
        let gold = PairList(gold);
        if unknown {
            out.report.dropped_unknown_polarity += 1;
        } else if gold.is_empty() {
            out.report.dropped_empty_gold += 1;
        } else if has_conflict(&gold) {
            out.report.dropped_conflict += 1;
        } else {
            out.instances.push(Instance {
                id: c.id,
                text: c.text,
                gold,
                split,
                dataset: dataset.to_string(),
            });
        }
    }
    out.report.kept = out.instances.len();
    out
}

fn read_to_string(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn parse_xml<'a>(path: &Path, src: &'a str) -> Result<roxmltree::Document<'a>, DatasetError> {
    roxmltree::Document::parse(src).map_err(|e| {
        let pos = e.pos();
        DatasetError::Xml {
            path: path.to_path_buf(),
            line: pos.row,
            column: pos.col,
            message: e.to_string(),
        }
    })
}

fn child_text(node: roxmltree::Node<'_, '_>, name: &str) -> Option<String> {
    node.children()
        .find(|c| c.has_tag_name(name))
        .map(|t| t.text().unwrap_or("").trim().to_string())
}

fn xml_candidates(
    path: &Path,
    dataset: &str,
    split: Split,
    label_tag: &str,
) -> Result<Vec<Candidate>, DatasetError> {
    let src = read_to_string(path)?;
    let doc = parse_xml(path, &src)?;
    let mut out = Vec::new();
    for (idx, sentence) in doc.descendants().filter(|n| n.has_tag_name("sentence")).enumerate() {
        let Some(text) = child_text(sentence, "text") else {
            continue;
        };
        let id = sentence
            .attribute("id")
            .map(str::to_string)
            .unwrap_or_else(|| format!("{dataset}-{split}-{idx}"));
        let labels = sentence
            .descendants()
            .filter(|n| n.has_tag_name(label_tag))
            .map(|n| {
                (
                    n.attribute("category").unwrap_or("").to_string(),
                    n.attribute("polarity").unwrap_or("").to_string(),
                )
            })
            .collect();
        out.push(Candidate { id, text, labels });
    }
    Ok(out)
}

pub fn ingest_semeval_xml(path: &Path, dataset: &str, split: Split) -> Result<Ingested, DatasetError> {
    let candidates = xml_candidates(path, dataset, split, "Opinion")?;
    Ok(finish(candidates, dataset, split, 0))
}

pub fn ingest_mams_xml(path: &Path, split: Split) -> Result<Ingested, DatasetError> {
    let candidates = xml_candidates(path, "mams", split, "aspectCategory")?;
    Ok(finish(candidates, "mams", split, 0))
}

fn quad_fields(q: &Value) -> (Option<String>, Option<String>) {
    let s = |v: Option<&Value>| v.and_then(Value::as_str).map(str::to_string).filter(|s| !s.trim().is_empty());
    match q {
        Value::Array(items) if items.len() == 4 => (s(items.get(1)), s(items.get(3))),
        Value::Object(m) => (s(m.get("category")), s(m.get("sentiment").or_else(|| m.get("polarity")))),
        _ => (None, None),
    }
}

fn shoes_jsonl(path: &Path, src: &str, split: Split) -> Result<(Vec<Candidate>, usize), DatasetError> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for (i, line) in src.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = |message: String| DatasetError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let v: Value = serde_json::from_str(line).map_err(|e| record(e.to_string()))?;
        let text = v
            .get("text")
            .or_else(|| v.get("review"))
            .and_then(Value::as_str)
            .ok_or_else(|| record("missing `text`".into()))?
            .to_string();
        let id = match v.get("id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => format!("shoes-{split}-{}", out.len()),
        };
        let quads = v
            .get("quads")
            .and_then(Value::as_array)
            .ok_or_else(|| record("missing `quads` array".into()))?;
        let mut labels = Vec::new();
        for q in quads {
            match quad_fields(q) {
                (Some(c), Some(s)) => labels.push((c, s)),
                _ => skipped += 1,
            }
        }
        out.push(Candidate { id, text, labels });
    }
    Ok((out, skipped))
}

fn shoes_tsv(src: &str) -> (Vec<Candidate>, usize) {
    let mut out: Vec<Candidate> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut skipped = 0;
    for (i, line) in src.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if i == 0 && f.first().map(|s| s.trim().eq_ignore_ascii_case("id")).unwrap_or(false) {
            continue;
        }
        if f.len() < 6 || f[3].trim().is_empty() || f[5].trim().is_empty() {
            skipped += 1;
            continue;
        }
        let id = f[0].trim().to_string();
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            out.push(Candidate {
                id,
                text: f[1].trim().to_string(),
                labels: Vec::new(),
            });
            out.len() - 1
        });
        out[slot].labels.push((f[3].to_string(), f[5].to_string()));
    }
    (out, skipped)
}

/// Reads Shoes quads (JSONL or TSV, detected from the first non-blank
/// character) and projects them onto (category, sentiment) pairs.
pub fn ingest_shoes(path: &Path, split: Split) -> Result<Ingested, DatasetError> {
    let src = read_to_string(path)?;
    let (candidates, skipped) = if src.trim_start().starts_with('{') {
        shoes_jsonl(path, &src, split)?
    } else {
        shoes_tsv(&src)
    };
    Ok(finish(candidates, "shoes", split, skipped))
}

pub fn ingest(kind: DatasetKind, path: &Path, split: Split) -> Result<Ingested, DatasetError> {
    match kind {
        DatasetKind::Laptop16 | DatasetKind::Restaurant16 => ingest_semeval_xml(path, kind.name(), split),
        DatasetKind::Mams => ingest_mams_xml(path, split),
        DatasetKind::Shoes => ingest_shoes(path, split),
    }
}

/// Schema for a dataset: the built-in label order if there is one, then any
/// further labels found in `instances` in first-appearance order.
pub fn schema_for(kind: DatasetKind, instances: &[Instance]) -> Result<CategorySchema, DatasetError> {
    let mut labels: Vec<String> = kind
        .builtin_labels()
        .unwrap_or(&[])
        .iter()
        .map(|s| s.to_string())
        .collect();
    let builtin = labels.len();
    for inst in instances {
        for p in inst.gold.iter() {
            if !labels.contains(&p.category) {
                labels.push(p.category.clone());
            }
        }
    }
    if builtin > 0 && labels.len() > builtin {
        log::warn!(
            "{kind}: {} label(s) outside the built-in schema appended: {:?}",
            labels.len() - builtin,
            &labels[builtin..]
        );
    }
    Ok(CategorySchema::new(kind.domain(), labels)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub granularity: Granularity,
    pub schema: CategorySchema,
    pub splits: BTreeMap<Split, PathBuf>,
    pub report: IngestReport,
}

/// `corpus.jsonl` -> `corpus.manifest.json`.
pub fn manifest_path_for(corpus: &Path) -> PathBuf {
    corpus.with_extension("manifest.json")
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    let body = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, body + "\n").map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let src = read_to_string(path)?;
    serde_json::from_str(&src).map_err(|e| DatasetError::Record {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn write_jsonl(instances: &[Instance], path: &Path) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        let line = serde_json::to_string(inst).expect("instance serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Instance>, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line).map_err(|e| DatasetError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(inst);
    }
    Ok(out)
}
