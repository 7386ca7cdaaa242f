//! `acsa`: ingest datasets, run CoT agents, aggregate, evaluate and analyze.
//!
//! Exit codes: 0 ok, 1 usage error, 2 data error, 3 backend error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use acsa_core::aggregate::{AlphaPolicy, Embedder, Technique};
use acsa_core::datasets::{self, DatasetError, DatasetKind, DatasetManifest, IngestReport};
use acsa_core::llm::{Backend, ClientConfig, DecodeParams, GenerationRequest, LlmClient, LlmError, RawCompletion, ResponseCache};
use acsa_core::pipeline::{self, AggregateOptions, PipelineError, RunConfig, RunData, RunDir};
use acsa_core::prompts::PromptMode;
use acsa_core::{all_element_orders, ElementOrder, Instance, Split};
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Dataset(DatasetError::UnknownDataset(_)) => 1,
            CliError::Dataset(_) => 2,
            CliError::Pipeline(e) => match e {
                PipelineError::Usage(_) => 1,
                PipelineError::Llm(_) | PipelineError::Embed(_) | PipelineError::Incomplete { .. } => 3,
                _ => 2,
            },
        }
    }
}

#[derive(Parser)]
#[command(name = "acsa", version, about = "Aspect-category sentiment analysis with permuted CoT agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalise a dataset into a JSONL corpus plus manifest.
    Ingest(IngestArgs),
    /// Generate, parse and score every (instance, agent) job.
    Run(RunArgs),
    /// Combine agent lists into one prediction per instance.
    Aggregate(AggregateArgs),
    /// Micro-F1, per-agent scores, conflict counts and pair-count summary.
    Evaluate(EvaluateArgs),
    /// Spearman correlation of agent confidence with per-instance F1.
    Analyze(AnalyzeArgs),
    /// Render a comparison table with podium ranks from long-format CSV.
    Table(TableArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// laptop16, restaurant16, mams or shoes.
    #[arg(long)]
    dataset: String,
    /// Source file, optionally prefixed with its split (`train=path`);
    /// unprefixed inputs are the test split. Repeatable.
    #[arg(long, required = true)]
    input: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// enumerated, multihop or fewshot.
    #[arg(long, default_value = "enumerated")]
    mode: String,
    /// `all` or comma-separated order codes such as `AOC,OCA`.
    #[arg(long, default_value = "all")]
    orders: String,
    /// `mock:<fixture.json>`, `openai`, or a JSON config file.
    #[arg(long)]
    backend: String,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the model named by the backend config or `ACSA_MODEL`.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Few-shot examples drawn from the corpus train split.
    #[arg(long, default_value_t = 10)]
    fewshot_k: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Shuffle the category list in the prompts with this seed.
    #[arg(long)]
    shuffle_categories: Option<u64>,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 1024)]
    max_tokens: u32,
    /// Drop mapped categories whose similarity falls below this ratio.
    #[arg(long, default_value_t = 0.0)]
    min_ratio: f64,
    /// Only the first N instances of the split.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long)]
    rundir: PathBuf,
    /// Technique name, `agent:<ORDER>`, or `all` for the five headline
    /// techniques. Repeatable.
    #[arg(long, required = true)]
    technique: Vec<String>,
    /// Pair-count policy: a float in [0, 1], `mean` or `max`.
    #[arg(long, default_value = "1")]
    alpha: String,
    /// `hash`, `hash:<dim>`, `http`, or a JSON config file.
    #[arg(long)]
    embedder: Option<String>,
    /// Use highest_prob_pairs where clustering has no embedder.
    #[arg(long)]
    fallback_highest_pairs: bool,
    /// Keep only the most confident polarity per category.
    #[arg(long)]
    resolve_conflicts: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output file (one technique) or directory (several). Defaults to the
    /// run's predictions directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also score every agent and the joined agent from this run.
    #[arg(long)]
    rundir: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    rundir: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Defaults to `<rundir>/reports/analysis`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Technique whose predictions define per-instance F1.
    #[arg(long, default_value = "highest_prob_list")]
    technique: String,
    #[arg(long)]
    embedder: Option<String>,
}

#[derive(Args)]
struct TableArgs {
    /// Rows `technique,column,value` or `technique,column,dataset,value`.
    #[arg(long)]
    input: PathBuf,
    /// Write the table as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Run(a) => cmd_run(a),
        Command::Aggregate(a) => cmd_aggregate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Table(a) => cmd_table(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn split_input(spec: &str) -> Result<(Split, PathBuf), CliError> {
    match spec.split_once('=') {
        Some((split, path)) => Ok((split.parse().map_err(usage)?, PathBuf::from(path))),
        None => Ok((Split::Test, PathBuf::from(spec))),
    }
}

fn cmd_ingest(a: IngestArgs) -> Result<(), CliError> {
    let kind: DatasetKind = a.dataset.parse()?;
    let mut instances = Vec::new();
    let mut report = IngestReport::default();
    let mut splits = std::collections::BTreeMap::new();
    for spec in &a.input {
        let (split, path) = split_input(spec)?;
        if splits.insert(split, path.clone()).is_some() {
            return Err(usage(format!("split {split} given twice")));
        }
        let got = datasets::ingest(kind, &path, split)?;
        println!(
            "{split}: kept {}, dropped {} with conflicts, {} with empty gold, {} with unknown polarity, skipped {} records",
            got.report.kept,
            got.report.dropped_conflict,
            got.report.dropped_empty_gold,
            got.report.dropped_unknown_polarity,
            got.report.skipped_records
        );
        report.merge(&got.report);
        instances.extend(got.instances);
    }
    let schema = datasets::schema_for(kind, &instances)?;
    datasets::write_jsonl(&instances, &a.out)?;
    let manifest = DatasetManifest {
        name: kind.name().to_string(),
        granularity: kind.granularity(),
        schema,
        splits,
        report,
    };
    datasets::write_manifest(&manifest, &datasets::manifest_path_for(&a.out))?;
    println!("wrote {} instances to {}", instances.len(), a.out.display());
    Ok(())
}

/// Counts requests that reach the backend (cache misses).
struct Counting {
    inner: Arc<dyn Backend>,
    calls: AtomicUsize,
}

impl Backend for Counting {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, req: &GenerationRequest) -> Result<RawCompletion, LlmError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.complete(req)
    }
}

fn parse_orders(s: &str) -> Result<Vec<ElementOrder>, CliError> {
    if s == "all" {
        return Ok(all_element_orders().to_vec());
    }
    let mut orders: Vec<ElementOrder> = Vec::new();
    for code in s.split(',').map(str::trim).filter(|c| !c.is_empty()) {
        let o: ElementOrder = code.parse().map_err(usage)?;
        if !orders.contains(&o) {
            orders.push(o);
        }
    }
    if orders.is_empty() {
        return Err(usage("no element orders given"));
    }
    orders.sort_by_key(|o| o.agent_index());
    Ok(orders)
}

fn cmd_run(a: RunArgs) -> Result<(), CliError> {
    let mode: PromptMode = a.mode.parse().map_err(usage)?;
    let orders = parse_orders(&a.orders)?;
    let split: Split = a.split.parse().map_err(usage)?;
    if a.workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    if mode == PromptMode::Fewshot && !(1..=10).contains(&a.fewshot_k) {
        return Err(usage("--fewshot-k must be between 1 and 10"));
    }
    let choice = config::backend(&a.backend)?;
    let model = a
        .model
        .or(choice.model)
        .or_else(|| a.backend.starts_with("mock:").then(|| "mock".to_string()))
        .ok_or_else(|| usage("no model: pass --model, set ACSA_MODEL, or name one in the backend config"))?;

    let manifest = datasets::read_manifest(&datasets::manifest_path_for(&a.corpus))?;
    let corpus = datasets::read_jsonl(&a.corpus)?;
    let mut instances: Vec<Instance> = corpus.iter().filter(|i| i.split == split).cloned().collect();
    if let Some(n) = a.limit {
        instances.truncate(n);
    }
    if instances.is_empty() {
        return Err(usage(format!("corpus has no {split} instances")));
    }
    let examples = if mode == PromptMode::Fewshot {
        let pool: Vec<Instance> = corpus.into_iter().filter(|i| i.split == Split::Train).collect();
        if pool.is_empty() {
            return Err(usage("few-shot mode needs train instances in the corpus"));
        }
        pipeline::sample_fewshot(&pool, a.fewshot_k, a.seed)
    } else {
        Vec::new()
    };
    let schema = match a.shuffle_categories {
        Some(seed) => manifest.schema.shuffled(seed),
        None => manifest.schema.clone(),
    };

    let run_config = RunConfig {
        corpus: a.corpus.clone(),
        dataset: manifest.name.clone(),
        split,
        mode,
        orders,
        model,
        backend: choice.label,
        decode: DecodeParams::greedy(a.max_tokens),
        fewshot_k: if mode == PromptMode::Fewshot { examples.len() } else { 0 },
        seed: a.seed,
        shuffle_categories: a.shuffle_categories,
        min_ratio: a.min_ratio,
        workers: a.workers,
        limit: a.limit,
        schema,
    };
    let dir = RunDir::create(&a.out)?;
    run_config.save(&dir)?;
    let cache = ResponseCache::open(dir.cache_path()).map_err(PipelineError::from)?;
    let counting = Arc::new(Counting {
        inner: choice.backend,
        calls: AtomicUsize::new(0),
    });
    let client = LlmClient::new(counting.clone(), Arc::new(cache), ClientConfig::default());
    let outcome = pipeline::run_agents(&client, &run_config, &instances, &examples);
    pipeline::write_records(&dir, &outcome.records)?;
    println!(
        "records: {}, cache hits: {}, backend calls: {}, empty parses: {}, failures: {}",
        outcome.records.len(),
        outcome.cache_hits,
        counting.calls.load(Ordering::Relaxed),
        outcome.empty_parses,
        outcome.failures.len()
    );
    if let Some((id, order, msg)) = outcome.failures.first() {
        return Err(PipelineError::Incomplete {
            failed: outcome.failures.len(),
            total: instances.len() * run_config.orders.len(),
            first: format!("{id} / {}: {msg}", order.code()),
        }
        .into());
    }
    Ok(())
}

fn parse_techniques(names: &[String]) -> Result<Vec<Technique>, CliError> {
    let mut out = Vec::new();
    for name in names {
        let ts = if name == "all" {
            Technique::HEADLINE.to_vec()
        } else {
            vec![name.parse::<Technique>().map_err(usage)?]
        };
        for t in ts {
            if !out.contains(&t) {
                out.push(t);
            }
        }
    }
    Ok(out)
}

fn cmd_aggregate(a: AggregateArgs) -> Result<(), CliError> {
    let techniques = parse_techniques(&a.technique)?;
    let alpha: AlphaPolicy = a.alpha.parse().map_err(usage)?;
    let embedder: Option<Box<dyn Embedder>> = a.embedder.as_deref().map(config::embedder).transpose()?;
    let dir = RunDir::new(&a.rundir);
    let (_, data) = RunData::load(&dir)?;
    for &t in &techniques {
        let opts = AggregateOptions {
            technique: t,
            alpha: alpha.clone(),
            resolve_conflicts: a.resolve_conflicts,
            seed: a.seed,
            fallback_highest_pairs: a.fallback_highest_pairs,
        };
        let (header, preds) = pipeline::aggregate_run(&data, &opts, embedder.as_deref())?;
        let name = pipeline::prediction_file_name(&opts);
        let path = match &a.out {
            Some(p) if techniques.len() == 1 => p.clone(),
            Some(d) => d.join(name),
            None => dir.predictions_dir().join(name),
        };
        pipeline::write_predictions(&path, &header, &preds)?;
        let mut line = format!("{t}: {} predictions -> {}", preds.len(), path.display());
        if header.degraded_instances > 0 {
            line.push_str(&format!(" ({} fell back to highest_prob_pairs)", header.degraded_instances));
        }
        println!("{line}");
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let (header, preds) = pipeline::read_predictions(&a.predictions)?;
    let corpus = datasets::read_jsonl(&a.corpus)?;
    let run = a.rundir.map(|d| RunData::load(&RunDir::new(d))).transpose()?.map(|(_, d)| d);
    let report = pipeline::evaluate(header, &preds, &corpus, run.as_ref())?;
    pipeline::write_evaluation(&a.out, &report)?;
    print!("{}", report.render_text());
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<(), CliError> {
    let technique: Technique = a.technique.parse().map_err(usage)?;
    let embedder: Option<Box<dyn Embedder>> = a.embedder.as_deref().map(config::embedder).transpose()?;
    let dir = RunDir::new(&a.rundir);
    let (_, data) = RunData::load(&dir)?;
    let corpus = datasets::read_jsonl(&a.corpus)?;
    let report = pipeline::analyze(&data, &corpus, technique, embedder.as_deref())?;
    let out = a.out.unwrap_or_else(|| dir.reports_dir().join("analysis"));
    pipeline::write_analysis(&out, &report)?;
    print!("{}", report.render_text());
    Ok(())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn cmd_table(a: TableArgs) -> Result<(), CliError> {
    let src = read_text(&a.input)?;
    let table = pipeline::table_from_long_csv(&src).map_err(|message| PipelineError::Format {
        path: a.input.clone(),
        line: 0,
        message,
    })?;
    if let Some(out) = &a.out {
        std::fs::write(out, table.to_csv()).map_err(|source| PipelineError::Io {
            path: out.clone(),
            source,
        })?;
    }
    print!("{}", table.render_text());
    Ok(())
}
