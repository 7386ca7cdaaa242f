//! Run-directory orchestration: agent runs, aggregation, evaluation and
//! analysis.
//!
//! Layout of a run directory:
//!
//! ```text
//! run.json                 configuration snapshot
//! cache.jsonl              response cache (replays the run offline)
//! records/records.jsonl    one record per (instance, agent), instance-major
//! predictions/             one JSONL file per technique
//! reports/                 evaluation and analysis outputs
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{
    self, clustered_pairs, dataset_median, estimate_n, AlphaPolicy, EmbedError, Embedder, Technique,
};
use crate::confidence::{score_parsed, AlignmentError};
use crate::datasets::DatasetError;
use crate::domain::{CategorySchema, ElementOrder, Instance, PairList, ScoredList, Split};
use crate::eval::{
    self, count_conflicts, pair_count_summary, score_dataset, score_instance, ComparisonTable, CorrelationReport,
    MicroCounts, PairCountSummary, Prf, StatsError,
};
use crate::llm::{
    run_multihop_thread, single_turn_messages, DecodeParams, GenerationRequest, GenerationResponse, LlmClient, LlmError,
    TokenProb,
};
use crate::parse::{parse_generation, MappingOptions, ParseError, Span};
use crate::prompts::{self, FewShotExample, PromptError, PromptMode};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("instance {instance}, agent {agent}: {source}")]
    Alignment {
        instance: String,
        agent: String,
        #[source]
        source: AlignmentError,
    },
    #[error("run records incomplete: instance {instance} has no record for agent {agent}")]
    MissingRecord { instance: String, agent: String },
    #[error("{failed} of {total} generations failed; first: {first}")]
    Incomplete { failed: usize, total: usize, first: String },
    #[error("id mismatch between predictions and corpus: {0}")]
    IdMismatch(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Creates the directory skeleton if missing.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let dir = Self::new(root);
        for p in [dir.root.clone(), dir.records_dir(), dir.predictions_dir(), dir.reports_dir()] {
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn cache_path(&self) -> PathBuf {
        self.root.join("cache.jsonl")
    }

    pub fn records_dir(&self) -> PathBuf {
        self.root.join("records")
    }

    pub fn records_path(&self) -> PathBuf {
        self.records_dir().join("records.jsonl")
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.root.join("predictions")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }
}

/// Everything needed to reproduce an agent run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub dataset: String,
    pub split: Split,
    pub mode: PromptMode,
    pub orders: Vec<ElementOrder>,
    pub model: String,
    pub backend: String,
    pub decode: DecodeParams,
    pub fewshot_k: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle_categories: Option<u64>,
    pub min_ratio: f64,
    pub workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    /// Schema as rendered into the prompts (after any shuffle).
    pub schema: CategorySchema,
}

impl RunConfig {
    pub fn save(&self, dir: &RunDir) -> Result<(), PipelineError> {
        let path = dir.config_path();
        let body = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(&path, body + "\n").map_err(io_err(&path))
    }

    pub fn load(dir: &RunDir) -> Result<Self, PipelineError> {
        let path = dir.config_path();
        let src = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&src).map_err(|e| PipelineError::Format {
            path,
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    EmptyParse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseSummary {
    pub status: ParseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub list_char_span: Option<Span>,
    pub dropped_tuples: usize,
    pub below_floor: usize,
}

/// One agent's result on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub instance_id: String,
    pub agent: ElementOrder,
    pub agent_index: usize,
    pub request_hashes: Vec<String>,
    /// Assistant replies preceding the final one (multi-hop only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hops: Vec<String>,
    pub text: String,
    pub tokens: Vec<TokenProb>,
    pub parse: ParseSummary,
    pub scored: ScoredList,
}

/// Seeded sample of `k` training instances used as few-shot examples.
pub fn sample_fewshot(pool: &[Instance], k: usize, seed: u64) -> Vec<FewShotExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = k.min(pool.len());
    rand::seq::index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| FewShotExample {
            text: pool[i].text.clone(),
            gold: pool[i].gold.clone(),
        })
        .collect()
}

fn generate_for(
    client: &LlmClient,
    config: &RunConfig,
    instance: &Instance,
    order: ElementOrder,
    examples: &[FewShotExample],
) -> Result<(Vec<String>, Vec<GenerationResponse>, usize), PipelineError> {
    let bundle = prompts::build(
        config.mode,
        order,
        &instance.text,
        &config.schema,
        config.schema.domain_name(),
        examples,
    )?;
    if config.mode == PromptMode::Multihop {
        let responses = run_multihop_thread(client, &bundle, &config.model, &config.decode)?;
        // rebuild the hashes the thread used
        let mut messages = vec![crate::llm::Message::new(crate::llm::Role::System, bundle.system.clone())];
        let mut hashes = Vec::new();
        for (turn, resp) in bundle.user_turns.iter().zip(&responses) {
            messages.push(crate::llm::Message::new(crate::llm::Role::User, turn.clone()));
            hashes.push(
                GenerationRequest {
                    model: config.model.clone(),
                    messages: messages.clone(),
                    decode: config.decode.clone(),
                }
                .hash(),
            );
            messages.push(crate::llm::Message::new(crate::llm::Role::Assistant, resp.text.clone()));
        }
        let hits = responses.iter().filter(|r| r.cached).count();
        Ok((hashes, responses, hits))
    } else {
        let req = GenerationRequest {
            model: config.model.clone(),
            messages: single_turn_messages(&bundle),
            decode: config.decode.clone(),
        };
        let resp = client.generate(&req)?;
        let hits = resp.cached as usize;
        Ok((vec![req.hash()], vec![resp], hits))
    }
}

/// Generates, parses and scores one (instance, agent) job.
pub fn process_job(
    client: &LlmClient,
    config: &RunConfig,
    instance: &Instance,
    order: ElementOrder,
    examples: &[FewShotExample],
) -> Result<(AgentRecord, usize), PipelineError> {
    let (hashes, mut responses, hits) = generate_for(client, config, instance, order, examples)?;
    let last = responses.pop().expect("at least one response");
    let hops = responses.into_iter().map(|r| r.text).collect();
    let opts = MappingOptions {
        min_ratio: config.min_ratio,
    };
    let (parse, scored) = match parse_generation(&last.text, &config.schema, opts) {
        Ok(parsed) => {
            let scored = score_parsed(&parsed, &last.tokens, order).map_err(|source| PipelineError::Alignment {
                instance: instance.id.clone(),
                agent: order.code(),
                source,
            })?;
            (
                ParseSummary {
                    status: ParseStatus::Ok,
                    list_char_span: Some(parsed.list_char_span),
                    dropped_tuples: parsed.dropped,
                    below_floor: parsed.below_floor,
                },
                scored,
            )
        }
        Err(ParseError::EmptyParse) => (
            ParseSummary {
                status: ParseStatus::EmptyParse,
                list_char_span: None,
                dropped_tuples: 0,
                below_floor: 0,
            },
            ScoredList::empty(),
        ),
    };
    Ok((
        AgentRecord {
            instance_id: instance.id.clone(),
            agent: order,
            agent_index: order.agent_index(),
            request_hashes: hashes,
            hops,
            text: last.text,
            tokens: last.tokens,
            parse,
            scored,
        },
        hits,
    ))
}

#[derive(Debug, Default)]
pub struct RunOutcome {
    pub records: Vec<AgentRecord>,
    pub failures: Vec<(String, ElementOrder, String)>,
    /// Generation calls answered from the cache.
    pub cache_hits: usize,
    pub empty_parses: usize,
}

/// Runs every (instance, order) job with up to `config.workers` threads.
/// Records come back instance-major in corpus order, agents in `config.orders`
/// order; failed jobs are listed instead.
pub fn run_agents(
    client: &LlmClient,
    config: &RunConfig,
    instances: &[Instance],
    examples: &[FewShotExample],
) -> RunOutcome {
    let jobs: Vec<(usize, ElementOrder)> = (0..instances.len())
        .flat_map(|i| config.orders.iter().map(move |&o| (i, o)))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<(AgentRecord, usize), String>>>> = Mutex::new(vec![None; jobs.len()]);
    let workers = config.workers.max(1).min(jobs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(i, order)) = jobs.get(j) else {
                    break;
                };
                let r = process_job(client, config, &instances[i], order, examples).map_err(|e| e.to_string());
                if let Err(e) = &r {
                    log::warn!("instance {} agent {}: {e}", instances[i].id, order.code());
                }
                results.lock().unwrap()[j] = Some(r);
            });
        }
    });
    let mut out = RunOutcome::default();
    for ((i, order), r) in jobs.into_iter().zip(results.into_inner().unwrap()) {
        match r.expect("every job ran") {
            Ok((rec, hits)) => {
                out.cache_hits += hits;
                out.empty_parses += (rec.parse.status == ParseStatus::EmptyParse) as usize;
                out.records.push(rec);
            }
            Err(e) => out.failures.push((instances[i].id.clone(), order, e)),
        }
    }
    out
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(&item).expect("record serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_records(dir: &RunDir, records: &[AgentRecord]) -> Result<(), PipelineError> {
    write_lines(&dir.records_path(), records)
}

pub fn read_records(dir: &RunDir) -> Result<Vec<AgentRecord>, PipelineError> {
    read_lines(&dir.records_path())
}

/// Agent lists grouped per instance, in run order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunData {
    pub agents: Vec<ElementOrder>,
    pub instances: Vec<(String, Vec<ScoredList>)>,
}

impl RunData {
    /// Groups records; every instance must have a record for every agent in
    /// `agents`.
    pub fn from_records(agents: &[ElementOrder], records: &[AgentRecord]) -> Result<Self, PipelineError> {
        let mut order: Vec<String> = Vec::new();
        let mut by_id: HashMap<&str, Vec<Option<ScoredList>>> = HashMap::new();
        for r in records {
            let slot = by_id.entry(r.instance_id.as_str()).or_insert_with(|| {
                order.push(r.instance_id.clone());
                vec![None; agents.len()]
            });
            if let Some(a) = agents.iter().position(|&o| o == r.agent) {
                slot[a] = Some(r.scored.clone());
            }
        }
        let mut instances = Vec::with_capacity(order.len());
        for id in order {
            let lists = by_id.remove(id.as_str()).unwrap();
            let mut full = Vec::with_capacity(agents.len());
            for (a, l) in lists.into_iter().enumerate() {
                full.push(l.ok_or_else(|| PipelineError::MissingRecord {
                    instance: id.clone(),
                    agent: agents[a].code(),
                })?);
            }
            instances.push((id, full));
        }
        Ok(Self {
            agents: agents.to_vec(),
            instances,
        })
    }

    pub fn load(dir: &RunDir) -> Result<(RunConfig, Self), PipelineError> {
        let config = RunConfig::load(dir)?;
        let records = read_records(dir)?;
        let data = Self::from_records(&config.orders, &records)?;
        Ok((config, data))
    }

    pub fn median(&self) -> f64 {
        dataset_median(self.instances.iter().flat_map(|(_, ls)| ls.iter()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateOptions {
    pub technique: Technique,
    pub alpha: AlphaPolicy,
    pub resolve_conflicts: bool,
    pub seed: u64,
    /// Use highest-probability pairs when clustering has no embedder.
    pub fallback_highest_pairs: bool,
}

impl AggregateOptions {
    pub fn new(technique: Technique) -> Self {
        Self {
            technique,
            alpha: AlphaPolicy::Float(1.0),
            resolve_conflicts: false,
            seed: aggregate::DEFAULT_SEED,
            fallback_highest_pairs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionHeader {
    pub technique: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median: Option<f64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_agent: Option<ElementOrder>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub resolve_conflicts: bool,
    /// Instances where clustering fell back to highest-probability pairs.
    #[serde(default)]
    pub degraded_instances: usize,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub pairs: PairList,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
}

/// Applies one technique to every instance of a run.
pub fn aggregate_run(
    data: &RunData,
    opts: &AggregateOptions,
    embedder: Option<&dyn Embedder>,
) -> Result<(PredictionHeader, Vec<Prediction>), PipelineError> {
    let t = opts.technique;
    if t == Technique::ClusteredPairs && embedder.is_none() && !opts.fallback_highest_pairs {
        return Err(PipelineError::Usage(
            "clustered_pairs needs an embedder (--embedder); pass --fallback-highest-pairs to use highest_prob_pairs instead"
                .into(),
        ));
    }
    let median = t.uses_alpha().then(|| data.median());
    let per_instance: Vec<Vec<ScoredList>> = data.instances.iter().map(|(_, l)| l.clone()).collect();
    let selected = match t {
        Technique::MostConfidentAgent => aggregate::most_confident_agent(&per_instance),
        Technique::Agent(order) => Some(data.agents.iter().position(|&o| o == order).ok_or_else(|| {
            PipelineError::Usage(format!("agent {} is not part of this run", order.code()))
        })?),
        _ => None,
    };
    let mut preds = Vec::with_capacity(data.instances.len());
    let mut degraded_instances = 0;
    for (id, lists) in &data.instances {
        let mut n = None;
        let mut degraded = false;
        let pairs = match t {
            Technique::HighestProbList => aggregate::highest_probability_list(lists),
            Technique::LowestProbList => aggregate::lowest_probability_list(lists),
            Technique::MostCommonList => aggregate::most_common_list(lists),
            Technique::Joined => aggregate::joined_agent(lists),
            Technique::MostConfidentAgent | Technique::Agent(_) => {
                selected.map(|a| lists[a].pair_list()).unwrap_or_default()
            }
            Technique::HighestProbPairs | Technique::ClusteredPairs => {
                let k = estimate_n(lists, median.unwrap_or(0.0), opts.alpha);
                n = Some(k);
                match (t, embedder) {
                    (Technique::ClusteredPairs, Some(e)) => {
                        let out = clustered_pairs(lists, k, e, opts.seed)?;
                        degraded = out.degraded;
                        out.pairs
                    }
                    (Technique::ClusteredPairs, None) => {
                        degraded = true;
                        aggregate::highest_probability_pairs(lists, k, opts.resolve_conflicts)
                    }
                    _ => aggregate::highest_probability_pairs(lists, k, opts.resolve_conflicts),
                }
            }
        };
        degraded_instances += degraded as usize;
        preds.push(Prediction {
            id: id.clone(),
            pairs,
            n,
            degraded,
        });
    }
    let header = PredictionHeader {
        technique: t.to_string(),
        alpha: t.uses_alpha().then(|| opts.alpha.to_string()),
        median,
        seed: opts.seed,
        selected_agent: selected.map(|a| data.agents[a]),
        resolve_conflicts: opts.resolve_conflicts,
        degraded_instances,
        instances: preds.len(),
    };
    Ok((header, preds))
}

/// Default file name for a technique's predictions.
pub fn prediction_file_name(opts: &AggregateOptions) -> String {
    let mut name = opts.technique.to_string().replace(':', "-");
    if opts.technique.uses_alpha() {
        name.push_str(&format!("_alpha-{}", opts.alpha));
    }
    name + ".jsonl"
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: PredictionHeader,
}

pub fn write_predictions(path: &Path, header: &PredictionHeader, preds: &[Prediction]) -> Result<(), PipelineError> {
    let mut lines = vec![serde_json::to_value(HeaderLine { header: header.clone() }).unwrap()];
    lines.extend(preds.iter().map(|p| serde_json::to_value(p).unwrap()));
    write_lines(path, lines)
}

/// Reads a predictions file; the header line is optional.
pub fn read_predictions(path: &Path) -> Result<(Option<PredictionHeader>, Vec<Prediction>), PipelineError> {
    let values: Vec<serde_json::Value> = read_lines(path)?;
    let mut header = None;
    let mut preds = Vec::new();
    for (i, v) in values.into_iter().enumerate() {
        let bad = |e: serde_json::Error| PipelineError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        };
        if i == 0 && v.get("header").is_some() {
            header = Some(serde_json::from_value::<HeaderLine>(v).map_err(bad)?.header);
        } else {
            preds.push(serde_json::from_value(v).map_err(bad)?);
        }
    }
    Ok((header, preds))
}

/// Pairs each prediction with its gold instance. Every prediction id must be
/// in the corpus, and every corpus instance of the predicted split must be
/// predicted.
pub fn align<'a>(preds: &'a [Prediction], corpus: &'a [Instance]) -> Result<Vec<(&'a Prediction, &'a Instance)>, PipelineError> {
    let index: HashMap<&str, &Instance> = corpus.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut out = Vec::with_capacity(preds.len());
    for p in preds {
        let inst = index
            .get(p.id.as_str())
            .ok_or_else(|| PipelineError::IdMismatch(format!("prediction `{}` is not in the corpus", p.id)))?;
        out.push((p, *inst));
    }
    if let Some((_, first)) = out.first() {
        let split = first.split;
        let predicted: std::collections::HashSet<&str> = preds.iter().map(|p| p.id.as_str()).collect();
        if let Some(missing) = corpus.iter().find(|i| i.split == split && !predicted.contains(i.id.as_str())) {
            return Err(PipelineError::IdMismatch(format!(
                "corpus instance `{}` has no prediction",
                missing.id
            )));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictSummary {
    /// Predictions with at least one conflicting category.
    pub instances_with_conflicts: usize,
    /// Conflicting categories summed over predictions.
    pub conflicting_categories: usize,
}

/// Scores of one prediction set against gold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemScores {
    pub name: String,
    pub counts: MicroCounts,
    pub scores: Prf,
    pub conflicts: ConflictSummary,
    pub pair_counts: PairCountSummary,
}

pub fn score_system(name: &str, preds: &[PairList], golds: &[PairList]) -> SystemScores {
    let counts: Vec<MicroCounts> = preds.iter().zip(golds).map(|(p, g)| score_instance(p, g)).collect();
    let per: Vec<usize> = preds.iter().map(count_conflicts).collect();
    SystemScores {
        name: name.to_string(),
        counts: counts.iter().copied().sum(),
        scores: score_dataset(counts),
        conflicts: ConflictSummary {
            instances_with_conflicts: per.iter().filter(|&&c| c > 0).count(),
            conflicting_categories: per.iter().sum(),
        },
        pair_counts: pair_count_summary(preds, golds),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header: Option<PredictionHeader>,
    pub instances: usize,
    pub system: SystemScores,
    /// Per-agent and joined scores when the run records were supplied.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agents: Vec<SystemScores>,
    /// Whether the joined agent's recall is at least every single agent's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joined_recall_dominates: Option<bool>,
}

/// Scores predictions; with run data, also scores every agent and the joined
/// agent on the same instances.
pub fn evaluate(
    header: Option<PredictionHeader>,
    preds: &[Prediction],
    corpus: &[Instance],
    run: Option<&RunData>,
) -> Result<EvaluationReport, PipelineError> {
    let aligned = align(preds, corpus)?;
    let golds: Vec<PairList> = aligned.iter().map(|(_, i)| i.gold.clone()).collect();
    let pred_lists: Vec<PairList> = aligned.iter().map(|(p, _)| p.pairs.clone()).collect();
    let name = header.as_ref().map_or("predictions".to_string(), |h| h.technique.clone());
    let system = score_system(&name, &pred_lists, &golds);
    let mut agents = Vec::new();
    let mut dominates = None;
    if let Some(run) = run {
        let by_id: HashMap<&str, &Vec<ScoredList>> = run.instances.iter().map(|(id, l)| (id.as_str(), l)).collect();
        let mut rows: Vec<&Vec<ScoredList>> = Vec::with_capacity(aligned.len());
        for (p, _) in &aligned {
            rows.push(by_id.get(p.id.as_str()).copied().ok_or_else(|| {
                PipelineError::IdMismatch(format!("prediction `{}` has no run records", p.id))
            })?);
        }
        for (a, order) in run.agents.iter().enumerate() {
            let lists: Vec<PairList> = rows.iter().map(|ls| ls[a].pair_list()).collect();
            agents.push(score_system(&format!("agent:{}", order.code()), &lists, &golds));
        }
        let joined: Vec<PairList> = rows.iter().map(|ls| aggregate::joined_agent(ls)).collect();
        let joined_scores = score_system("joined", &joined, &golds);
        let ok = agents.iter().all(|s| joined_scores.scores.recall >= s.scores.recall);
        if !ok {
            log::error!("joined-agent recall fell below a single agent's recall");
        }
        dominates = Some(ok);
        agents.push(joined_scores);
    }
    Ok(EvaluationReport {
        header,
        instances: aligned.len(),
        system,
        agents,
        joined_recall_dominates: dominates,
    })
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

impl EvaluationReport {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let h = &self.system;
        s.push_str(&format!("technique: {}\n", h.name));
        if let Some(hd) = &self.header {
            if let Some(a) = &hd.alpha {
                s.push_str(&format!("alpha: {a}\n"));
            }
            if let Some(m) = hd.median {
                s.push_str(&format!("median pairs: {m}\n"));
            }
            if let Some(a) = hd.selected_agent {
                s.push_str(&format!("selected agent: {}\n", a.code()));
            }
            if hd.degraded_instances > 0 {
                s.push_str(&format!("degraded instances: {}\n", hd.degraded_instances));
            }
        }
        s.push_str(&format!("instances: {}\n", self.instances));
        s.push_str(&format!(
            "micro P/R/F1: {}% / {}% / {}%\n",
            pct(h.scores.precision),
            pct(h.scores.recall),
            pct(h.scores.f1)
        ));
        s.push_str(&format!(
            "tp/fp/fn: {}/{}/{}\n",
            h.counts.tp, h.counts.fp, h.counts.fn_
        ));
        s.push_str(&format!(
            "conflicts: {} categories in {} predictions\n",
            h.conflicts.conflicting_categories, h.conflicts.instances_with_conflicts
        ));
        s.push_str(&pair_count_line(&h.pair_counts));
        if !self.agents.is_empty() {
            s.push('\n');
            let mut t = ComparisonTable::new(vec!["P".into(), "R".into(), "F1".into()]);
            for a in &self.agents {
                t.push_row(
                    a.name.clone(),
                    vec![
                        Some(100.0 * a.scores.precision),
                        Some(100.0 * a.scores.recall),
                        Some(100.0 * a.scores.f1),
                    ],
                );
            }
            s.push_str(&t.render_text());
            if let Some(d) = self.joined_recall_dominates {
                s.push_str(&format!("joined recall >= every agent: {d}\n"));
            }
        }
        s
    }

    /// Per-agent rows for radar plots: `system,precision,recall,f1,conflicts,mean_pairs,mean_gold`.
    pub fn agents_csv(&self) -> String {
        let mut s = String::from("system,precision,recall,f1,conflicting_categories,mean_predicted_pairs,mean_gold_pairs\n");
        for a in self.agents.iter().chain(std::iter::once(&self.system)) {
            s.push_str(&format!(
                "{},{},{},{},{},{:.4},{:.4}\n",
                a.name,
                pct(a.scores.precision),
                pct(a.scores.recall),
                pct(a.scores.f1),
                a.conflicts.conflicting_categories,
                a.pair_counts.mean_predicted,
                a.pair_counts.mean_gold
            ));
        }
        s
    }
}

fn pair_count_line(p: &PairCountSummary) -> String {
    let ratio = p.ratio.map_or("n/a".to_string(), |r| format!("{r:.2}"));
    format!(
        "mean pairs: predicted {:.2} vs gold {:.2} (ratio {ratio}{})\n",
        p.mean_predicted,
        p.mean_gold,
        if p.flagged { ", over 2x gold" } else { "" }
    )
}

fn write_file(path: &Path, body: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, body).map_err(io_err(path))
}

/// Writes `report.json`, `report.txt` and, with agent rows, `agents.csv`.
pub fn write_evaluation(out_dir: &Path, report: &EvaluationReport) -> Result<(), PipelineError> {
    let json = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    write_file(&out_dir.join("report.json"), &json)?;
    write_file(&out_dir.join("report.txt"), &report.render_text())?;
    if !report.agents.is_empty() {
        write_file(&out_dir.join("agents.csv"), &report.agents_csv())?;
    }
    Ok(())
}

/// Correlation of agent confidence statistics with per-instance F1 of a
/// designated prediction set, plus the per-instance points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub technique: String,
    pub correlation: CorrelationReport,
    pub points: Vec<AnalysisPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisPoint {
    pub id: String,
    pub mean_confidence: f64,
    pub variance: f64,
    pub f1: f64,
}

pub fn analyze(
    data: &RunData,
    corpus: &[Instance],
    technique: Technique,
    embedder: Option<&dyn Embedder>,
) -> Result<AnalysisReport, PipelineError> {
    let mut opts = AggregateOptions::new(technique);
    opts.fallback_highest_pairs = true;
    let (_, preds) = aggregate_run(data, &opts, embedder)?;
    let aligned = align(&preds, corpus)?;
    let lists: Vec<Vec<ScoredList>> = data.instances.iter().map(|(_, l)| l.clone()).collect();
    let pred_lists: Vec<PairList> = aligned.iter().map(|(p, _)| p.pairs.clone()).collect();
    let golds: Vec<PairList> = aligned.iter().map(|(_, i)| i.gold.clone()).collect();
    let correlation = eval::confidence_correlation(&lists, &pred_lists, &golds)?;
    let points = data
        .instances
        .iter()
        .zip(pred_lists.iter().zip(&golds))
        .map(|((id, ls), (p, g))| {
            let confs: Vec<f64> = ls.iter().map(|l| l.list_confidence).collect();
            let (m, v) = eval::mean_variance(&confs);
            AnalysisPoint {
                id: id.clone(),
                mean_confidence: m,
                variance: v,
                f1: eval::instance_f1(p, g).0,
            }
        })
        .collect();
    Ok(AnalysisReport {
        technique: technique.to_string(),
        correlation,
        points,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map_or("undefined".to_string(), |v| format!("{v:.6}"))
}

impl AnalysisReport {
    pub fn render_text(&self) -> String {
        let c = &self.correlation;
        format!(
            "technique: {}\ninstances: {}\nboth-empty instances (F1 = 1): {}\n\
             spearman(mean confidence, F1): {}\nspearman(variance, F1): {}\n\
             spearman(variance, F1), sign flipped: {}\n",
            self.technique,
            c.instances,
            c.both_empty_instances,
            opt(c.rho_mean_confidence_vs_f1),
            opt(c.rho_variance_vs_f1),
            opt(c.rho_variance_vs_f1_sign_flipped)
        )
    }

    pub fn points_csv(&self) -> String {
        let mut s = String::from("id,mean_confidence,variance,f1\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{},{}\n", p.id, p.mean_confidence, p.variance, p.f1));
        }
        s
    }
}

pub fn write_analysis(out_dir: &Path, report: &AnalysisReport) -> Result<(), PipelineError> {
    let json = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    write_file(&out_dir.join("correlation.json"), &json)?;
    write_file(&out_dir.join("correlation.txt"), &report.render_text())?;
    write_file(&out_dir.join("points.csv"), &report.points_csv())
}

/// Builds a comparison table from long-format CSV rows
/// `technique,column,value` or `technique,column,dataset,value`; the second
/// form is macro-averaged over datasets. Rows and columns keep first
/// appearance order.
pub fn table_from_long_csv(src: &str) -> Result<ComparisonTable, String> {
    let mut rows: Vec<String> = Vec::new();
    let mut cols: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut width = None;
    for (i, line) in src.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if !matches!(f.len(), 3 | 4) {
            return Err(format!("line {}: expected 3 or 4 fields, got {}", i + 1, f.len()));
        }
        if *width.get_or_insert(f.len()) != f.len() {
            return Err(format!("line {}: inconsistent field count", i + 1));
        }
        let raw = f[f.len() - 1];
        let value: f64 = match raw.parse() {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(_) if raw.is_empty() || raw == "—" => f64::NAN,
            Err(_) => return Err(format!("line {}: `{raw}` is not a number", i + 1)),
        };
        let r = rows.iter().position(|x| x == f[0]).unwrap_or_else(|| {
            rows.push(f[0].to_string());
            rows.len() - 1
        });
        let c = cols.iter().position(|x| x == f[1]).unwrap_or_else(|| {
            cols.push(f[1].to_string());
            cols.len() - 1
        });
        cells.entry((r, c)).or_default().push(value);
    }
    let mut table = ComparisonTable::new(cols.clone());
    for (r, label) in rows.iter().enumerate() {
        let values = (0..cols.len())
            .map(|c| {
                cells.get(&(r, c)).and_then(|vs| {
                    let present: Vec<Option<f64>> = vs.iter().map(|v| (!v.is_nan()).then_some(*v)).collect();
                    eval::macro_average(&present)
                })
            })
            .collect();
        table.push_row(label.clone(), values);
    }
    Ok(table)
}
