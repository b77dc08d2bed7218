//! Commands behind the `medsum` binary: dataset validation, corpus runs,
//! metric evaluation and blinded review packets.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{
    CompletionBackend, Embedder, HashEmbedder, HttpBackend, HttpEmbedder, LlmClient, RecordingBackend, ReplayBackend,
    RetryPolicy, API_KEY_ENV,
};
use crate::chain::{ChainConfig, Pipeline, Pools};
use crate::metrics::{
    aggregate, evaluate_encounter, write_csv, write_jsonl, Averaging, ConceptExtractor, EncounterScores,
    ExactMatchVerifier, LexicalConceptExtractor, LlmConceptExtractor, LlmVerifier, MetricError, MetricReport, Verifier,
};
use crate::model::{validate_encounter, Encounter, ExampleKind, LabeledExample, Method, RunRecord, StructuredSummary};
use crate::promptkit::{render_summary, PromptSet};
use crate::selection::{build_index, stable_hash64, ExamplePool};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_BACKEND: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("backend: {0}")]
    Backend(String),

    #[error("{failed} of {attempted} encounters failed")]
    Partial { attempted: usize, failed: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) | CliError::Io { .. } => EXIT_INVALID,
            CliError::Backend(_) => EXIT_BACKEND,
            CliError::Partial { .. } => EXIT_PARTIAL,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let file = File::open(path).map_err(io_err(path))?;
    BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineResult {
    pub line: usize,
    pub id: Option<String>,
    pub errors: Vec<String>,
}

impl LineResult {
    pub fn ok(&self) -> bool {
        self.errors.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub encounters: usize,
    pub mean_turns: f64,
    pub min_turns: usize,
    pub max_turns: usize,
    pub mean_whitespace_tokens: f64,
}

impl CorpusStats {
    pub fn of(encounters: &[Encounter]) -> Option<Self> {
        if encounters.is_empty() {
            return None;
        }
        let n = encounters.len() as f64;
        let turns = encounters.iter().map(|e| e.turns.len());
        Some(Self {
            encounters: encounters.len(),
            mean_turns: turns.clone().sum::<usize>() as f64 / n,
            min_turns: turns.clone().min().unwrap_or(0),
            max_turns: turns.max().unwrap_or(0),
            mean_whitespace_tokens: encounters.iter().map(Encounter::whitespace_tokens).sum::<usize>() as f64 / n,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetReport {
    pub lines: Vec<LineResult>,
    pub encounters: Vec<Encounter>,
}

impl DatasetReport {
    pub fn failures(&self) -> impl Iterator<Item = &LineResult> {
        self.lines.iter().filter(|l| !l.ok())
    }

    pub fn is_valid(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn stats(&self) -> Option<CorpusStats> {
        CorpusStats::of(&self.encounters)
    }
}

impl fmt::Display for DatasetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            let id = l.id.as_deref().unwrap_or("?");
            if l.ok() {
                writeln!(f, "line {}: ok ({id})", l.line)?;
            } else {
                writeln!(f, "line {}: FAIL ({id}): {}", l.line, l.errors.join("; "))?;
            }
        }
        match self.stats() {
            Some(s) => write!(
                f,
                "encounters: {}\nturns: mean {:.1}, min {}, max {}\nmean whitespace tokens: {:.1}",
                s.encounters, s.mean_turns, s.min_turns, s.max_turns, s.mean_whitespace_tokens
            ),
            None => write!(f, "encounters: 0"),
        }
    }
}

/// Checks every line of a JSONL dataset. Line numbers are 1-based; blank
/// lines are ignored. Only an unreadable or empty file is an error.
pub fn read_dataset(path: &Path) -> Result<DatasetReport, CliError> {
    let mut report = DatasetReport {
        lines: Vec::new(),
        encounters: Vec::new(),
    };
    let mut first_line: HashMap<String, usize> = HashMap::new();
    for (i, text) in read_lines(path)?.iter().enumerate() {
        if text.trim().is_empty() {
            continue;
        }
        let line = i + 1;
        let mut result = LineResult {
            line,
            id: None,
            errors: Vec::new(),
        };
        match serde_json::from_str::<Value>(text) {
            Err(e) => result.errors.push(format!("invalid JSON: {e}")),
            Ok(raw) => {
                result.id = raw.get("id").and_then(Value::as_str).map(str::to_string);
                match validate_encounter(&raw) {
                    Err(e) => result.errors.extend(e.violations),
                    Ok(enc) => match first_line.get(&enc.id) {
                        Some(prev) => result
                            .errors
                            .push(format!("duplicate id `{}` (lines {prev} and {line})", enc.id)),
                        None => {
                            first_line.insert(enc.id.clone(), line);
                            report.encounters.push(enc);
                        }
                    },
                }
            }
        }
        report.lines.push(result);
    }
    if report.lines.is_empty() {
        return Err(CliError::Invalid(format!("{}: dataset is empty", path.display())));
    }
    Ok(report)
}

pub fn cmd_validate(path: &Path) -> Result<DatasetReport, CliError> {
    read_dataset(path)
}

/// Loads a dataset that must be entirely valid.
pub fn load_dataset(path: &Path) -> Result<Vec<Encounter>, CliError> {
    let report = read_dataset(path)?;
    if let Some(bad) = report.failures().next() {
        return Err(CliError::Invalid(format!(
            "{}: line {}: {}",
            path.display(),
            bad.line,
            bad.errors.join("; ")
        )));
    }
    Ok(report.encounters)
}

/// Reads a labeled-example JSONL file and splits it by kind.
pub fn load_pools(path: &Path) -> Result<Pools, CliError> {
    let mut by_kind: BTreeMap<&'static str, Vec<LabeledExample>> = BTreeMap::new();
    for (i, text) in read_lines(path)?.iter().enumerate() {
        if text.trim().is_empty() {
            continue;
        }
        let ex: LabeledExample = serde_json::from_str(text)
            .map_err(|e| CliError::Invalid(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        by_kind.entry(ex.kind.as_str()).or_default().push(ex);
    }
    let mut take = |kind: ExampleKind| {
        ExamplePool::new(kind, by_kind.remove(kind.as_str()).unwrap_or_default())
            .map_err(|e| CliError::Invalid(format!("{}: {kind} pool: {e}", path.display())))
    };
    Ok(Pools {
        rfe: take(ExampleKind::RfeExtraction)?,
        dialogue: take(ExampleKind::DialogueExtraction)?,
        summarization: take(ExampleKind::Summarization)?,
    })
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>, CliError> {
    read_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Invalid(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    Live,
    Record,
    #[default]
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    #[default]
    Hash,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerifierKind {
    #[default]
    Llm,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Llm,
    Lexical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub completion_url: String,
    pub completion_model: String,
    pub embedding_url: String,
    pub embedding_model: String,
    pub embedding_dimension: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            completion_url: "https://api.openai.com/v1/completions".into(),
            completion_model: "text-davinci-003".into(),
            embedding_url: "https://api.openai.com/v1/embeddings".into(),
            embedding_model: "text-embedding-ada-002".into(),
            embedding_dimension: 1536,
        }
    }
}

/// The TOML run configuration. Every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub workers: usize,
    pub backend: BackendMode,
    pub replay_store: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub embedder: EmbedderKind,
    pub hash_dimension: usize,
    pub max_in_flight: Option<usize>,
    pub chain: ChainConfig,
    pub retry: RetryPolicy,
    pub endpoint: EndpointConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::MedsumEnt,
            workers: 4,
            backend: BackendMode::Replay,
            replay_store: None,
            pool: None,
            templates: None,
            embedder: EmbedderKind::Hash,
            hash_dimension: 64,
            max_in_flight: None,
            chain: ChainConfig::default(),
            retry: RetryPolicy::default(),
            endpoint: EndpointConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a TOML file. Relative paths inside it are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.replay_store, &mut cfg.pool, &mut cfg.templates]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies the command-line overrides on top of the file (or defaults).
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        let o = overrides;
        if let Some(v) = o.method {
            cfg.method = v;
        }
        if let Some(v) = o.workers {
            cfg.workers = v;
        }
        if let Some(v) = o.backend {
            cfg.backend = v;
        }
        if let Some(v) = &o.replay_store {
            cfg.replay_store = Some(v.clone());
        }
        if let Some(v) = &o.pool {
            cfg.pool = Some(v.clone());
        }
        if let Some(v) = o.seed {
            cfg.chain.seed = v;
        }
        if let Some(v) = o.extraction_k {
            cfg.chain.extraction_k = v;
        }
        if let Some(v) = o.summarization_k {
            cfg.chain.summarization_k = v;
        }
        if let Some(v) = o.selection {
            cfg.chain.selection_mode = v;
        }
        if let Some(v) = o.resolver {
            cfg.chain.resolver_enabled = v;
        }
        if cfg.workers == 0 {
            return Err(CliError::Invalid("workers must be at least 1".into()));
        }
        cfg.retry.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn prompts(&self) -> Result<PromptSet, CliError> {
        match &self.templates {
            Some(dir) => PromptSet::load_dir(dir).map_err(|e| CliError::Invalid(format!("{}: {e}", dir.display()))),
            None => Ok(PromptSet::default()),
        }
    }

    fn store_path(&self) -> Result<&Path, CliError> {
        self.replay_store
            .as_deref()
            .ok_or_else(|| CliError::Invalid(format!("backend {:?} needs a replay store", self.backend)))
    }

    pub fn transport(&self) -> Result<Arc<dyn CompletionBackend>, CliError> {
        let live = || -> Arc<dyn CompletionBackend> {
            if std::env::var(API_KEY_ENV).is_err() {
                log::warn!("{API_KEY_ENV} is not set; sending requests without a key");
            }
            Arc::new(HttpBackend::from_env(
                self.endpoint.completion_url.clone(),
                self.endpoint.completion_model.clone(),
            ))
        };
        let backend_err = |e: crate::backend::BackendError| CliError::Invalid(e.to_string());
        Ok(match self.backend {
            BackendMode::Live => live(),
            BackendMode::Record => Arc::new(RecordingBackend::create(self.store_path()?, live()).map_err(backend_err)?),
            BackendMode::Replay => Arc::new(ReplayBackend::open(self.store_path()?).map_err(backend_err)?),
        })
    }

    pub fn client(&self) -> Result<LlmClient, CliError> {
        self.client_with(self.transport()?)
    }

    pub fn client_with(&self, transport: Arc<dyn CompletionBackend>) -> Result<LlmClient, CliError> {
        let mut client = LlmClient::new(transport)
            .with_retry(self.retry)
            .map_err(|e| CliError::Invalid(e.to_string()))?
            .with_jitter_seed(self.chain.seed);
        if let Some(n) = self.max_in_flight {
            client = client.with_max_in_flight(n);
        }
        Ok(client)
    }

    pub fn embedder(&self) -> Box<dyn Embedder> {
        match self.embedder {
            EmbedderKind::Hash => Box::new(HashEmbedder::new(self.hash_dimension)),
            EmbedderKind::Http => Box::new(HttpEmbedder::new(
                self.endpoint.embedding_url.clone(),
                self.endpoint.embedding_model.clone(),
                std::env::var(API_KEY_ENV).ok(),
                self.endpoint.embedding_dimension,
            )),
        }
    }

    /// Example pools, indexed when selection is semantic.
    pub fn pools(&self, embedder: &dyn Embedder) -> Result<Pools, CliError> {
        let pools = match &self.pool {
            Some(p) => load_pools(p)?,
            None => Pools::empty(),
        };
        if self.chain.selection_mode != crate::model::SelectionMode::Semantic {
            return Ok(pools);
        }
        let index = |pool: ExamplePool| -> Result<ExamplePool, CliError> {
            if pool.is_empty() {
                return Ok(pool);
            }
            build_index(pool, embedder).map_err(|e| CliError::Backend(e.to_string()))
        };
        Ok(Pools {
            rfe: index(pools.rfe)?,
            dialogue: index(pools.dialogue)?,
            summarization: index(pools.summarization)?,
        })
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub method: Option<Method>,
    pub workers: Option<usize>,
    pub backend: Option<BackendMode>,
    pub replay_store: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub seed: Option<u64>,
    pub extraction_k: Option<usize>,
    pub summarization_k: Option<usize>,
    pub selection: Option<crate::model::SelectionMode>,
    pub resolver: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub already_done: usize,
    pub written: usize,
    pub failures: Vec<String>,
}

fn ensure_trailing_newline(path: &Path) -> Result<(), CliError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.last().is_some_and(|b| *b != b'\n') {
        let mut f = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        f.write_all(b"\n").map_err(io_err(path))?;
    }
    Ok(())
}

/// Runs every encounter not already present in `output`, appending one
/// record per line in dataset order.
pub fn cmd_run(dataset: &Path, cfg: &RunConfig, output: &Path) -> Result<RunSummary, CliError> {
    cmd_run_with(dataset, cfg, output, || cfg.transport())
}

/// [`cmd_run`] with the transport supplied by the caller. It is only built
/// once the dataset and configuration have been checked.
pub fn cmd_run_with<F>(dataset: &Path, cfg: &RunConfig, output: &Path, transport: F) -> Result<RunSummary, CliError>
where
    F: FnOnce() -> Result<Arc<dyn CompletionBackend>, CliError>,
{
    let encounters = load_dataset(dataset)?;
    cfg.chain
        .validate(cfg.method)
        .map_err(|e| CliError::Invalid(e.to_string()))?;

    let done: HashSet<String> = if output.exists() {
        ensure_trailing_newline(output)?;
        read_records(output)?.into_iter().map(|r| r.encounter_id).collect()
    } else {
        HashSet::new()
    };
    let pending: Vec<Encounter> = encounters.into_iter().filter(|e| !done.contains(&e.id)).collect();
    log::info!(
        "{} encounters already in {}, {} to run",
        done.len(),
        output.display(),
        pending.len()
    );

    let client = cfg.client_with(transport()?)?;
    let embedder = cfg.embedder();
    let prompts = cfg.prompts()?;
    let pools = cfg.pools(embedder.as_ref())?;
    let pipeline = Pipeline::new(&client, embedder.as_ref(), &prompts, &pools);

    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(output)
        .map_err(io_err(output))?;
    let mut out = BufWriter::new(file);
    let mut summary = RunSummary {
        already_done: done.len(),
        written: 0,
        failures: Vec::new(),
    };
    let mut backend_failures = 0;
    // Chunks bound the work lost if the process dies mid-run.
    for chunk in pending.chunks(cfg.workers * 4) {
        let results = pipeline
            .run_corpus(cfg.method, chunk, &cfg.chain, cfg.workers)
            .map_err(|e| CliError::Invalid(e.to_string()))?;
        for result in results {
            match result {
                Ok(record) => {
                    let line = serde_json::to_string(&record).expect("records serialize");
                    writeln!(out, "{line}").map_err(io_err(output))?;
                    summary.written += 1;
                }
                Err(e) => {
                    log::error!("{e}");
                    if e.is_backend() {
                        backend_failures += 1;
                    }
                    summary.failures.push(e.to_string());
                }
            }
        }
        out.flush().map_err(io_err(output))?;
    }

    if summary.failures.is_empty() {
        Ok(summary)
    } else if summary.written == 0 && backend_failures == summary.failures.len() {
        Err(CliError::Backend(summary.failures.join("\n")))
    } else {
        Err(CliError::Partial {
            attempted: pending.len(),
            failed: summary.failures.len(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub verifier: VerifierKind,
    /// Defaults to lexical with the exact verifier and llm otherwise.
    pub extractor: Option<ExtractorKind>,
    pub averaging: Averaging,
    pub per_concept: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            verifier: VerifierKind::Exact,
            extractor: None,
            averaging: Averaging::Macro,
            per_concept: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub rows: Vec<MetricReport>,
    pub encounters: Vec<EncounterScores>,
    /// Records skipped for lack of a reference summary.
    pub skipped: Vec<String>,
}

impl EvalOutput {
    pub fn csv(&self) -> Result<String, CliError> {
        let mut buf = Vec::new();
        write_csv(&self.rows, &mut buf).map_err(|e| CliError::Invalid(e.to_string()))?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }

    pub fn jsonl(&self) -> Result<String, CliError> {
        let mut buf = Vec::new();
        write_jsonl(&self.encounters, &mut buf).map_err(|e| CliError::Invalid(e.to_string()))?;
        Ok(String::from_utf8(buf).expect("json is utf-8"))
    }
}

fn metric_error(e: MetricError) -> CliError {
    match e {
        MetricError::Backend(b) => CliError::Backend(b.to_string()),
        other => CliError::Invalid(other.to_string()),
    }
}

/// Scores records against the dataset's reference summaries.
pub fn evaluate_records(
    records: &[RunRecord],
    dataset: &[Encounter],
    extractor: &dyn ConceptExtractor,
    verifier: &dyn Verifier,
    averaging: Averaging,
) -> Result<EvalOutput, CliError> {
    let references: HashMap<&str, &StructuredSummary> = dataset
        .iter()
        .filter_map(|e| e.reference_summary.as_ref().map(|s| (e.id.as_str(), s)))
        .collect();
    let mut skipped = Vec::new();
    let mut pairs = Vec::new();
    for r in records {
        match references.get(r.encounter_id.as_str()) {
            Some(gt) => pairs.push((r, *gt)),
            None => {
                log::warn!("{}: no reference summary; skipped", r.encounter_id);
                skipped.push(r.encounter_id.clone());
            }
        }
    }
    let encounters = pairs
        .par_iter()
        .map(|(r, gt)| {
            evaluate_encounter(&r.summary, gt, extractor, verifier).map(|scores| EncounterScores {
                encounter_id: r.encounter_id.clone(),
                config: (&r.config).into(),
                scores,
            })
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(metric_error)?;
    let rows = aggregate(&encounters, averaging).map_err(metric_error)?;
    Ok(EvalOutput {
        rows,
        encounters,
        skipped,
    })
}

/// Loads record files and a dataset, scores, and returns the reports.
/// `cfg` supplies the backend for the model-driven extractor and verifier.
pub fn cmd_eval(
    record_files: &[PathBuf],
    dataset: &Path,
    cfg: &RunConfig,
    opts: &EvalOptions,
) -> Result<EvalOutput, CliError> {
    cmd_eval_with(record_files, dataset, cfg, opts, || cfg.transport())
}

/// [`cmd_eval`] with the transport supplied by the caller; it is only built
/// when the chosen extractor or verifier needs a model.
pub fn cmd_eval_with<F>(
    record_files: &[PathBuf],
    dataset: &Path,
    cfg: &RunConfig,
    opts: &EvalOptions,
    transport: F,
) -> Result<EvalOutput, CliError>
where
    F: FnOnce() -> Result<Arc<dyn CompletionBackend>, CliError>,
{
    let mut records = Vec::new();
    for path in record_files {
        records.extend(read_records(path)?);
    }
    let dataset = load_dataset(dataset)?;
    let extractor_kind = opts.extractor.unwrap_or(match opts.verifier {
        VerifierKind::Exact => ExtractorKind::Lexical,
        VerifierKind::Llm => ExtractorKind::Llm,
    });

    let needs_model = extractor_kind == ExtractorKind::Llm || opts.verifier == VerifierKind::Llm;
    let client = if needs_model {
        Some(cfg.client_with(transport()?)?)
    } else {
        None
    };
    let prompts = cfg.prompts()?;
    let budget = cfg.chain.budget;

    let llm_extractor;
    let extractor: &dyn ConceptExtractor = match extractor_kind {
        ExtractorKind::Lexical => &LexicalConceptExtractor,
        ExtractorKind::Llm => {
            llm_extractor = LlmConceptExtractor::new(client.as_ref().expect("client built"), &prompts, budget);
            &llm_extractor
        }
    };
    let llm_verifier;
    let verifier: &dyn Verifier = match opts.verifier {
        VerifierKind::Exact => &ExactMatchVerifier,
        VerifierKind::Llm => {
            llm_verifier = LlmVerifier::new(client.as_ref().expect("client built"), &prompts, budget)
                .per_concept(opts.per_concept);
            &llm_verifier
        }
    };
    evaluate_records(&records, &dataset, extractor, verifier, opts.averaging)
}

pub const REVIEW_INSTRUCTIONS: &str = "\
You will see the patient's age and sex, the reason for encounter, the \
dialogue, and two candidate visit summaries labeled A and B. Read both \
summaries against the dialogue before answering. Use your own clinical \
judgment: consider whether the summary is accurate, whether it leaves out \
anything a provider would need, whether it adds anything that was not said, \
and how easy it is to read.";

pub const REVIEW_QUESTIONS: [&str; 3] = [
    "Q1. Which summary would you rather use as the visit summary for this encounter: A or B?",
    "Q2. For each summary, how much of the clinically relevant information from the dialogue does it capture? (All, Most, Some, None)",
    "Q3. For each summary, does it contain incorrect information that could change the course of treatment and harm the patient if another provider relied on it? (Yes, No)",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyEntry {
    pub encounter_id: String,
    pub packet: String,
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReviewSummary {
    pub packets: Vec<PathBuf>,
    pub key_file: PathBuf,
    pub skipped: Vec<String>,
}

fn config_label(source: &Path, r: &RunRecord) -> String {
    let c = &r.config;
    let mut label = format!("{} [{}]", r.method, source.display());
    if let Some(k) = c.extraction_k {
        label.push_str(&format!(" extraction_k={k}"));
    }
    label.push_str(&format!(" summarization_k={}", c.summarization_k));
    if let Some(s) = c.selection {
        label.push_str(&format!(" selection={s}"));
    }
    if r.method == Method::MedsumEnt {
        label.push_str(&format!(" resolver={}", c.resolver));
    }
    label
}

/// Whether the first file's summary is shown as B for this encounter.
pub fn swap_for(encounter_id: &str, seed: u64) -> bool {
    ChaCha8Rng::seed_from_u64(stable_hash64(encounter_id) ^ seed).next_u64() & 1 == 1
}

fn packet_name(index: usize, encounter_id: &str) -> String {
    let safe: String = encounter_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("packet-{:04}-{safe}.md", index + 1)
}

/// Writes one packet per encounter present in both files, plus `key.json`
/// mapping each packet's letters back to their sources.
pub fn cmd_review_packets(
    first: &Path,
    second: &Path,
    dataset: Option<&Path>,
    seed: u64,
    out_dir: &Path,
) -> Result<ReviewSummary, CliError> {
    let a_records = read_records(first)?;
    let b_records = read_records(second)?;
    let b_by_id: HashMap<&str, &RunRecord> = b_records.iter().map(|r| (r.encounter_id.as_str(), r)).collect();
    let a_ids: HashSet<&str> = a_records.iter().map(|r| r.encounter_id.as_str()).collect();
    let context: HashMap<String, Encounter> = match dataset {
        Some(p) => load_dataset(p)?.into_iter().map(|e| (e.id.clone(), e)).collect(),
        None => HashMap::new(),
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut summary = ReviewSummary {
        packets: Vec::new(),
        key_file: out_dir.join("key.json"),
        skipped: Vec::new(),
    };
    let mut key = Vec::new();
    for a in &a_records {
        let Some(b) = b_by_id.get(a.encounter_id.as_str()) else {
            log::warn!("{}: missing from {}; skipped", a.encounter_id, second.display());
            summary.skipped.push(a.encounter_id.clone());
            continue;
        };
        let (shown_a, shown_b, src_a, src_b) = if swap_for(&a.encounter_id, seed) {
            (*b, a, second, first)
        } else {
            (a, *b, first, second)
        };
        let name = packet_name(summary.packets.len(), &a.encounter_id);
        let path = out_dir.join(&name);
        let body = render_packet(
            &a.encounter_id,
            context.get(&a.encounter_id),
            &shown_a.summary,
            &shown_b.summary,
        );
        fs::write(&path, body).map_err(io_err(&path))?;
        key.push(KeyEntry {
            encounter_id: a.encounter_id.clone(),
            packet: name,
            a: config_label(src_a, shown_a),
            b: config_label(src_b, shown_b),
        });
        summary.packets.push(path);
    }
    for b in &b_records {
        if !a_ids.contains(b.encounter_id.as_str()) {
            log::warn!("{}: missing from {}; skipped", b.encounter_id, first.display());
            summary.skipped.push(b.encounter_id.clone());
        }
    }
    let key_text = serde_json::to_string_pretty(&key).expect("key serializes");
    fs::write(&summary.key_file, key_text + "\n").map_err(io_err(&summary.key_file))?;
    Ok(summary)
}

fn render_packet(id: &str, enc: Option<&Encounter>, a: &StructuredSummary, b: &StructuredSummary) -> String {
    let mut out = format!("# Encounter {id}\n\n## Instructions\n\n{REVIEW_INSTRUCTIONS}\n\n");
    if let Some(e) = enc {
        out.push_str(&format!("## Patient\n\n{} year old {}\n\n", e.age, e.sex));
        out.push_str(&format!("## Dialogue\n\n{}\n\n", e.dialogue_text()));
    }
    out.push_str(&format!("## Summary A\n\n{}\n\n", render_summary(a)));
    out.push_str(&format!("## Summary B\n\n{}\n\n", render_summary(b)));
    out.push_str("## Questions\n\n");
    for q in REVIEW_QUESTIONS {
        out.push_str(q);
        out.push_str("\n\n");
    }
    out
}
