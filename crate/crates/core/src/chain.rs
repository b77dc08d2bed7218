//! The staged summarization chain and the single-prompt baseline.
//!
//! A chained run makes `1 + windows + resolver_fired + 1` model calls:
//! RFE extraction, one extraction per turn window, an optional unknown-entity
//! resolver pass, and the final summarization. The baseline makes exactly one.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{prompt_hash, BackendError, CompletionRequest, Embedder, LlmClient};
use crate::model::{
    AffirmationStatus, ConfigSnapshot, Encounter, EntityLedger, ExampleKind, LabeledExample, LlmCall, MedicalEntity,
    Method, Provenance, RunRecord, SelectionMode, StructuredSummary, Turn,
};
use crate::promptkit::{
    parse_entity_list, parse_summary, serialize_entities, serialize_ledger, ParseError, PromptSet, RenderError,
    TemplateName, TokenBudget,
};
use crate::selection::{select_random, select_semantic, stable_hash64, ExamplePool, SelectionError, SelectionQuery};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    RfeExtraction,
    TurnExtraction(usize),
    Resolver,
    Summarization,
    BaselineSummarization,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::RfeExtraction => f.write_str("rfe extraction"),
            Stage::TurnExtraction(i) => write!(f, "turn-pair {i} extraction"),
            Stage::Resolver => f.write_str("unknown-entity resolver"),
            Stage::Summarization => f.write_str("summarization"),
            Stage::BaselineSummarization => f.write_str("baseline summarization"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StageError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("encounter `{encounter_id}` failed at {stage}: {source}")]
    Stage {
        encounter_id: String,
        stage: Stage,
        #[source]
        source: StageError,
    },
}

impl ChainError {
    /// True when the failure came from the model transport rather than from
    /// the data or the configuration.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            ChainError::Stage {
                source: StageError::Backend(_),
                ..
            }
        )
    }
}

/// Knobs for one experimental configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    /// Shots for both extraction prompts: 1, 3 or 5.
    pub extraction_k: usize,
    /// Shots for the summarization prompt: 0 or 1.
    pub summarization_k: usize,
    pub selection_mode: SelectionMode,
    pub resolver_enabled: bool,
    /// Fail the encounter when the resolver completion does not parse,
    /// instead of keeping the collated ledger.
    pub resolver_fail_closed: bool,
    /// Run seed; each encounter uses `stable_hash64(id) ^ seed`.
    pub seed: u64,
    pub budget: TokenBudget,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            extraction_k: 3,
            summarization_k: 1,
            selection_mode: SelectionMode::Random,
            resolver_enabled: true,
            resolver_fail_closed: false,
            seed: 0,
            budget: TokenBudget::default(),
        }
    }
}

impl ChainConfig {
    pub fn validate(&self, method: Method) -> Result<(), ChainError> {
        if self.summarization_k > 1 {
            return Err(ChainError::Config(format!(
                "summarization_k = {} but summarization prompts support at most 1 shot",
                self.summarization_k
            )));
        }
        if method == Method::MedsumEnt && ![1, 3, 5].contains(&self.extraction_k) {
            return Err(ChainError::Config(format!(
                "extraction_k = {} must be one of 1, 3, 5",
                self.extraction_k
            )));
        }
        if self.budget.inflation_factor.is_nan()
            || self.budget.inflation_factor < 1.0
            || self.budget.max_context_tokens == 0
        {
            return Err(ChainError::Config(format!("invalid token budget {:?}", self.budget)));
        }
        Ok(())
    }

    pub fn snapshot(&self, method: Method) -> ConfigSnapshot {
        match method {
            Method::MedsumEnt => ConfigSnapshot {
                method,
                extraction_k: Some(self.extraction_k),
                summarization_k: self.summarization_k,
                selection: Some(self.selection_mode),
                resolver: self.resolver_enabled,
                seed: self.seed,
            },
            Method::NaiveBaseline => ConfigSnapshot {
                method,
                extraction_k: None,
                summarization_k: self.summarization_k,
                selection: (self.summarization_k > 0).then_some(self.selection_mode),
                resolver: false,
                seed: self.seed,
            },
        }
    }

    pub fn encounter_seed(&self, encounter_id: &str) -> u64 {
        stable_hash64(encounter_id) ^ self.seed
    }
}

/// A doctor→patient exchange, or a lone turn that could not be paired.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnWindow<'a> {
    pub index: usize,
    pub turns: Vec<&'a Turn>,
}

impl TurnWindow<'_> {
    pub fn text(&self) -> String {
        self.turns
            .iter()
            .map(|t| format!("{}: {}", t.speaker.label(), t.text.trim()))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Groups consecutive doctor→patient turns; any other turn stands alone.
pub fn pair_turns(turns: &[Turn]) -> Vec<TurnWindow<'_>> {
    use crate::model::Speaker::{Doctor, Patient};
    let mut windows = Vec::new();
    let mut i = 0;
    while i < turns.len() {
        let pair = turns[i].speaker == Doctor && turns.get(i + 1).is_some_and(|t| t.speaker == Patient);
        let width = if pair { 2 } else { 1 };
        windows.push(TurnWindow {
            index: windows.len(),
            turns: turns[i..i + width].iter().collect(),
        });
        i += width;
    }
    windows
}

/// Merges entity lists, RFE first then windows in order.
///
/// Names are deduplicated. A later definite status replaces an earlier one; a
/// later `unknown` never replaces `present` or `absent`. Provenance is the
/// union in first-seen order, and entries keep first-mention order.
pub fn collate<I>(lists: I) -> EntityLedger
where
    I: IntoIterator<Item = Vec<MedicalEntity>>,
{
    let mut ledger = EntityLedger::new();
    for entity in lists.into_iter().flatten() {
        match ledger.get_mut(&entity.name) {
            Some(existing) => {
                if entity.status.is_definite() {
                    existing.status = entity.status;
                }
                for p in entity.provenance {
                    if !existing.provenance.contains(&p) {
                        existing.provenance.push(p);
                    }
                }
            }
            None => ledger.push(entity).expect("name checked absent"),
        }
    }
    ledger
}

/// Labeled pools for the three example-consuming prompts.
#[derive(Debug, Clone)]
pub struct Pools {
    pub rfe: ExamplePool,
    pub dialogue: ExamplePool,
    pub summarization: ExamplePool,
}

impl Pools {
    pub fn empty() -> Self {
        Self {
            rfe: ExamplePool::new(ExampleKind::RfeExtraction, vec![]).expect("empty pool"),
            dialogue: ExamplePool::new(ExampleKind::DialogueExtraction, vec![]).expect("empty pool"),
            summarization: ExamplePool::new(ExampleKind::Summarization, vec![]).expect("empty pool"),
        }
    }
}

/// Calls and warnings accumulated while processing one encounter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub calls: Vec<LlmCall>,
    pub warnings: Vec<String>,
}

impl Trace {
    fn absorb(&mut self, other: Trace) {
        self.calls.extend(other.calls);
        self.warnings.extend(other.warnings);
    }
}

/// Everything a stage needs besides the encounter and the configuration.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub client: &'a LlmClient,
    pub embedder: &'a dyn Embedder,
    pub prompts: &'a PromptSet,
    pub pools: &'a Pools,
}

impl<'a> Pipeline<'a> {
    pub fn new(client: &'a LlmClient, embedder: &'a dyn Embedder, prompts: &'a PromptSet, pools: &'a Pools) -> Self {
        Self {
            client,
            embedder,
            prompts,
            pools,
        }
    }

    fn select(
        &self,
        pool: &'a ExamplePool,
        k: usize,
        cfg: &ChainConfig,
        enc: &Encounter,
        salt: &str,
        text: &str,
    ) -> Result<Vec<&'a LabeledExample>, SelectionError> {
        if k == 0 {
            return Ok(Vec::new());
        }
        match cfg.selection_mode {
            SelectionMode::Random => select_random(pool, k, cfg.encounter_seed(&enc.id) ^ stable_hash64(salt)),
            SelectionMode::Semantic => {
                let query = SelectionQuery::new(enc.age, enc.sex.clone(), text);
                select_semantic(pool, &query, k, self.embedder)
            }
        }
    }

    fn call(&self, template: TemplateName, prompt: String, trace: &mut Trace) -> Result<String, BackendError> {
        let req = CompletionRequest::new(template.prompt_kind(), prompt);
        trace.calls.push(LlmCall {
            prompt_kind: req.kind,
            prompt_hash: prompt_hash(&req.prompt),
            params: req.params,
        });
        self.client.complete(&req)
    }

    #[allow(clippy::too_many_arguments)]
    fn extract(
        &self,
        template: TemplateName,
        pool: &'a ExamplePool,
        input: &str,
        enc: &Encounter,
        cfg: &ChainConfig,
        salt: &str,
        source: Provenance,
        trace: &mut Trace,
    ) -> Result<Vec<MedicalEntity>, StageError> {
        let examples = self.select(pool, cfg.extraction_k, cfg, enc, salt, input)?;
        let prompt = self
            .prompts
            .render(template, input, enc.age, &enc.sex, &examples, &cfg.budget)?;
        let raw = self.call(template, prompt, trace)?;
        let parsed = parse_entity_list(&raw)?;
        trace
            .warnings
            .extend(parsed.warnings.into_iter().map(|w| format!("{source}: {w}")));
        Ok(parsed.entities.into_iter().map(|e| e.with_provenance(source)).collect())
    }

    pub fn extract_rfe_entities(
        &self,
        enc: &Encounter,
        cfg: &ChainConfig,
        trace: &mut Trace,
    ) -> Result<Vec<MedicalEntity>, ChainError> {
        self.extract(
            TemplateName::RfeExtraction,
            &self.pools.rfe,
            enc.rfe.trim(),
            enc,
            cfg,
            "rfe",
            Provenance::Rfe,
            trace,
        )
        .map_err(|source| stage_error(enc, Stage::RfeExtraction, source))
    }

    pub fn extract_turn_entities(
        &self,
        window: &TurnWindow<'_>,
        enc: &Encounter,
        cfg: &ChainConfig,
        trace: &mut Trace,
    ) -> Result<Vec<MedicalEntity>, ChainError> {
        let source = Provenance::TurnPair(window.index);
        self.extract(
            TemplateName::DialogueExtraction,
            &self.pools.dialogue,
            &window.text(),
            enc,
            cfg,
            &source.to_string(),
            source,
            trace,
        )
        .map_err(|e| stage_error(enc, Stage::TurnExtraction(window.index), e))
    }

    /// One refinement pass over the unknown-status entries.
    ///
    /// Only entries that were `unknown` can change; everything else is
    /// returned untouched. Makes no call when the resolver is disabled or
    /// nothing is unknown.
    pub fn resolve_unknowns(
        &self,
        ledger: &EntityLedger,
        enc: &Encounter,
        cfg: &ChainConfig,
        trace: &mut Trace,
    ) -> Result<EntityLedger, ChainError> {
        let unknowns: Vec<_> = ledger.with_status(AffirmationStatus::Unknown).collect();
        if !cfg.resolver_enabled || unknowns.is_empty() {
            return Ok(ledger.clone());
        }
        let input = format!(
            "Unknown entities:\n{}\n\nConversation:\n{}",
            serialize_entities(unknowns.iter().copied()),
            enc.dialogue_text()
        );
        let fail = |e: StageError| stage_error(enc, Stage::Resolver, e);
        let prompt = self
            .prompts
            .render(
                TemplateName::UnknownResolver,
                &input,
                enc.age,
                &enc.sex,
                &[],
                &cfg.budget,
            )
            .map_err(|e| fail(e.into()))?;
        let raw = self
            .call(TemplateName::UnknownResolver, prompt, trace)
            .map_err(|e| fail(e.into()))?;

        let parsed = match parse_entity_list(&raw) {
            Ok(p) => p,
            Err(e) if cfg.resolver_fail_closed => return Err(fail(e.into())),
            Err(e) => {
                trace.warnings.push(format!("resolver: {e}; ledger kept as collated"));
                return Ok(ledger.clone());
            }
        };
        trace
            .warnings
            .extend(parsed.warnings.into_iter().map(|w| format!("resolver: {w}")));

        let mut resolved = ledger.clone();
        for candidate in parsed.entities {
            match resolved.get_mut(&candidate.name) {
                Some(entry) if entry.status == AffirmationStatus::Unknown => {
                    if candidate.status.is_definite() {
                        entry.status = candidate.status;
                        entry.provenance.push(Provenance::Resolver);
                    }
                }
                Some(entry) if entry.provenance.last() == Some(&Provenance::Resolver) => {
                    trace.warnings.push(format!(
                        "resolver: `{}` listed more than once; first answer kept",
                        candidate.name
                    ));
                }
                _ => trace.warnings.push(format!(
                    "resolver: `{}` was not an unknown entity; ignored",
                    candidate.name
                )),
            }
        }
        Ok(resolved)
    }

    /// Summarizes the dialogue conditioned on the serialized ledger.
    pub fn summarize(
        &self,
        enc: &Encounter,
        ledger: &EntityLedger,
        cfg: &ChainConfig,
        trace: &mut Trace,
    ) -> Result<StructuredSummary, ChainError> {
        let input = format!(
            "Entities:\n{}\n\nConversation:\n{}",
            serialize_ledger(ledger),
            enc.dialogue_text()
        );
        self.summarize_with(TemplateName::Summarization, &input, enc, cfg, trace)
            .map_err(|e| stage_error(enc, Stage::Summarization, e))
    }

    fn summarize_with(
        &self,
        template: TemplateName,
        input: &str,
        enc: &Encounter,
        cfg: &ChainConfig,
        trace: &mut Trace,
    ) -> Result<StructuredSummary, StageError> {
        let dialogue = enc.dialogue_text();
        let examples = self.select(
            &self.pools.summarization,
            cfg.summarization_k,
            cfg,
            enc,
            "summarization",
            &dialogue,
        )?;
        let prompt = self
            .prompts
            .render(template, input, enc.age, &enc.sex, &examples, &cfg.budget)?;
        let raw = self.call(template, prompt, trace)?;
        let parsed = parse_summary(&raw)?;
        trace
            .warnings
            .extend(parsed.warnings.into_iter().map(|w| format!("{template}: {w}")));
        Ok(parsed.summary)
    }

    pub fn run_medsum_ent(&self, enc: &Encounter, cfg: &ChainConfig) -> Result<RunRecord, ChainError> {
        cfg.validate(Method::MedsumEnt)?;
        let mut trace = Trace::default();

        let rfe = self.extract_rfe_entities(enc, cfg, &mut trace)?;
        let windows = pair_turns(&enc.turns);
        // Windows are independent; results are merged back in window order.
        let per_window: Vec<_> = windows
            .par_iter()
            .map(|w| {
                let mut t = Trace::default();
                let r = self.extract_turn_entities(w, enc, cfg, &mut t);
                (r, t)
            })
            .collect();
        let mut lists = vec![rfe];
        for (result, t) in per_window {
            trace.absorb(t);
            lists.push(result?);
        }

        let collated = collate(lists);
        let ledger = self.resolve_unknowns(&collated, enc, cfg, &mut trace)?;
        let summary = self.summarize(enc, &ledger, cfg, &mut trace)?;

        Ok(RunRecord {
            encounter_id: enc.id.clone(),
            method: Method::MedsumEnt,
            config: cfg.snapshot(Method::MedsumEnt),
            ledger,
            summary,
            llm_call_trace: trace.calls,
            warnings: trace.warnings,
        })
    }

    pub fn run_naive_baseline(&self, enc: &Encounter, cfg: &ChainConfig) -> Result<RunRecord, ChainError> {
        cfg.validate(Method::NaiveBaseline)?;
        let mut trace = Trace::default();
        let summary = self
            .summarize_with(
                TemplateName::BaselineSummarization,
                &enc.dialogue_text(),
                enc,
                cfg,
                &mut trace,
            )
            .map_err(|e| stage_error(enc, Stage::BaselineSummarization, e))?;
        Ok(RunRecord {
            encounter_id: enc.id.clone(),
            method: Method::NaiveBaseline,
            config: cfg.snapshot(Method::NaiveBaseline),
            ledger: EntityLedger::new(),
            summary,
            llm_call_trace: trace.calls,
            warnings: trace.warnings,
        })
    }

    pub fn run(&self, method: Method, enc: &Encounter, cfg: &ChainConfig) -> Result<RunRecord, ChainError> {
        match method {
            Method::MedsumEnt => self.run_medsum_ent(enc, cfg),
            Method::NaiveBaseline => self.run_naive_baseline(enc, cfg),
        }
    }

    /// Runs every encounter on a pool of `workers` threads. Results come back
    /// in input order; one encounter failing does not affect the others.
    pub fn run_corpus(
        &self,
        method: Method,
        encounters: &[Encounter],
        cfg: &ChainConfig,
        workers: usize,
    ) -> Result<Vec<Result<RunRecord, ChainError>>, ChainError> {
        cfg.validate(method)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| ChainError::Config(format!("worker pool: {e}")))?;
        Ok(pool.install(|| encounters.par_iter().map(|enc| self.run(method, enc, cfg)).collect()))
    }
}

fn stage_error(enc: &Encounter, stage: Stage, source: StageError) -> ChainError {
    ChainError::Stage {
        encounter_id: enc.id.clone(),
        stage,
        source,
    }
}
