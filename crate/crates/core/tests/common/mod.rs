#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use acsa_core::aggregate::{EmbedError, Embedder};
use acsa_core::datasets::{self, DatasetKind, Ingested};
use acsa_core::llm::{ClientConfig, DecodeParams, LlmClient, MockFixture, ResponseCache, RetryPolicy, ScriptedMock};
use acsa_core::pipeline::{self, RunConfig, RunData, RunOutcome};
use acsa_core::prompts::PromptMode;
use acsa_core::{all_element_orders, CategorySchema, Instance, Pair, PairList, Polarity, Split};
use serde_json::Value;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn read_fixture(rel: &str) -> String {
    let path = fixtures().join(rel);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn json_fixture(rel: &str) -> Value {
    serde_json::from_str(&read_fixture(rel)).unwrap()
}

pub fn pair_list(v: &Value) -> PairList {
    PairList(
        v.as_array()
            .unwrap()
            .iter()
            .map(|p| {
                let c = p[0].as_str().unwrap();
                let pol: Polarity = p[1].as_str().unwrap().parse().unwrap();
                Pair::new(c, pol)
            })
            .collect(),
    )
}

/// Embeds category names from a fixed lookup table; unknown names fail.
pub struct TableEmbedder(pub BTreeMap<String, Vec<f64>>);

impl TableEmbedder {
    /// Five well-separated groups over the restaurant labels.
    pub fn restaurant_groups() -> Self {
        let rows: [(&str, [f64; 2]); 8] = [
            ("food", [0.0, 0.0]),
            ("menu", [0.1, 0.0]),
            ("staff", [10.0, 0.0]),
            ("service", [10.1, 0.0]),
            ("price", [0.0, 10.0]),
            ("ambience", [-10.0, 0.0]),
            ("place", [-10.1, 0.0]),
            ("miscellaneous", [0.0, -10.0]),
        ];
        Self(rows.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect())
    }
}

impl Embedder for TableEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        texts
            .iter()
            .map(|t| {
                self.0
                    .get(t)
                    .cloned()
                    .ok_or_else(|| EmbedError::BadResponse(format!("no vector for `{t}`")))
            })
            .collect()
    }
}

pub struct GoldenRun {
    pub ingested: Ingested,
    pub schema: CategorySchema,
    pub config: RunConfig,
    pub outcome: RunOutcome,
    pub data: RunData,
    pub backend_calls: usize,
}

pub fn golden_instances() -> (Ingested, CategorySchema) {
    let ingested = datasets::ingest(DatasetKind::Mams, &fixtures().join("pipeline/corpus.xml"), Split::Test).unwrap();
    let schema = datasets::schema_for(DatasetKind::Mams, &ingested.instances).unwrap();
    (ingested, schema)
}

pub fn golden_config(schema: CategorySchema) -> RunConfig {
    RunConfig {
        corpus: PathBuf::from("corpus.jsonl"),
        dataset: "mams".into(),
        split: Split::Test,
        mode: PromptMode::Enumerated,
        orders: all_element_orders().to_vec(),
        model: "mock".into(),
        backend: "mock".into(),
        decode: DecodeParams::greedy(1024),
        fewshot_k: 0,
        seed: 42,
        shuffle_categories: None,
        min_ratio: 0.0,
        workers: 4,
        limit: None,
        schema,
    }
}

/// Runs the scripted six-agent fixture over the five-instance corpus.
pub fn golden_run_with(cache: Arc<ResponseCache>) -> GoldenRun {
    let (ingested, schema) = golden_instances();
    let config = golden_config(schema.clone());
    let fixture = MockFixture::load(fixtures().join("pipeline/mock.json")).unwrap();
    let mock = Arc::new(ScriptedMock::new(fixture));
    let client = LlmClient::new(
        mock.clone(),
        cache,
        ClientConfig {
            experiment_mode: true,
            retry: RetryPolicy::none(),
        },
    );
    let outcome = pipeline::run_agents(&client, &config, &ingested.instances, &[]);
    let data = RunData::from_records(&config.orders, &outcome.records).unwrap();
    GoldenRun {
        ingested,
        schema,
        config,
        outcome,
        data,
        backend_calls: mock.calls(),
    }
}

pub fn golden_run() -> GoldenRun {
    golden_run_with(Arc::new(ResponseCache::in_memory()))
}

pub fn gold_of<'a>(instances: &'a [Instance], id: &str) -> &'a PairList {
    &instances.iter().find(|i| i.id == id).unwrap().gold
}
