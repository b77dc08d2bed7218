//! Concept-level precision, recall and F1 for summary sections.
//!
//! Concepts are extracted from both the reference and the predicted section,
//! then each side's concepts are checked for presence in the other side's
//! text. Recall counts reference concepts found in the prediction; precision
//! counts predicted concepts found in the reference.

use std::io::Write;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, CompletionRequest, LlmClient};
use crate::model::{ConfigSnapshot, Method, Section, SelectionMode, StructuredSummary};
use crate::promptkit::{PromptSet, RenderError, TemplateName, TokenBudget};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error(transparent)]
    Render(#[from] RenderError),

    #[error("concept extraction returned no usable line: {raw:?}")]
    ExtractionParse { raw: String },

    #[error("unparseable verification answer {line:?} in {raw:?}")]
    VerdictParse { line: String, raw: String },

    #[error("verification answered {got} of {expected} concepts: {raw:?}")]
    VerdictCount { expected: usize, got: usize, raw: String },

    #[error("nothing to aggregate")]
    EmptyCorpus,

    #[error("report output failed: {0}")]
    Output(String),
}

/// Case-folded, whitespace-collapsed form used for deduplication and exact
/// matching. Lowercasing is per character so that a substring of a text
/// still normalizes to a substring of the normalized text.
pub fn normalize_concept(text: &str) -> String {
    let folded: String = text.chars().flat_map(char::to_lowercase).collect();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn dedupe(concepts: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    concepts
        .into_iter()
        .filter(|c| seen.insert(normalize_concept(c)))
        .collect()
}

pub trait ConceptExtractor: Send + Sync {
    fn extract(&self, text: &str) -> Result<Vec<String>, MetricError>;
}

pub trait Verifier: Send + Sync {
    /// One flag per concept, aligned with `concepts`.
    fn verify(&self, concepts: &[String], target: &str) -> Result<Vec<bool>, MetricError>;
}

/// Extraction through the metric-extraction prompt; one call per non-blank
/// text.
pub struct LlmConceptExtractor<'a> {
    client: &'a LlmClient,
    prompts: &'a PromptSet,
    budget: TokenBudget,
}

impl<'a> LlmConceptExtractor<'a> {
    pub fn new(client: &'a LlmClient, prompts: &'a PromptSet, budget: TokenBudget) -> Self {
        Self {
            client,
            prompts,
            budget,
        }
    }
}

impl ConceptExtractor for LlmConceptExtractor<'_> {
    fn extract(&self, text: &str) -> Result<Vec<String>, MetricError> {
        if text.trim().is_empty() {
            return Ok(Vec::new());
        }
        let template = TemplateName::MetricExtraction;
        let prompt = self.prompts.render(template, text.trim(), 0, "", &[], &self.budget)?;
        let raw = self
            .client
            .complete(&CompletionRequest::new(template.prompt_kind(), prompt))?;
        parse_concepts(&raw)
    }
}

static LIST_MARKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(?:[-*•]|\d+[.)])\s*").unwrap());

fn strip_quotes(s: &str) -> &str {
    let s = s.trim();
    for q in ['"', '\''] {
        if s.len() >= 2 && s.starts_with(q) && s.ends_with(q) {
            return s[1..s.len() - 1].trim();
        }
    }
    s
}

/// Parses an extraction completion: one concept per line, optionally
/// bulleted or numbered, or a single bracketed list of quoted strings.
/// `None` means no concepts. Duplicates are dropped, first spelling kept.
pub fn parse_concepts(raw: &str) -> Result<Vec<String>, MetricError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    let pieces: Vec<&str> = if trimmed.starts_with('[') && trimmed.ends_with(']') {
        trimmed[1..trimmed.len() - 1].split(',').collect()
    } else {
        trimmed.lines().collect()
    };

    let mut concepts = Vec::new();
    let mut saw_none = false;
    for piece in pieces {
        let line = piece.trim();
        if line.is_empty() || line.eq_ignore_ascii_case("concepts:") {
            continue;
        }
        let unmarked = LIST_MARKER.replace(line, "");
        let item = strip_quotes(&unmarked).trim_end_matches(['.', ',', ';']).trim();
        if item.eq_ignore_ascii_case("none") {
            saw_none = true;
        } else if !item.is_empty() {
            concepts.push(item.to_string());
        }
    }
    if concepts.is_empty() && !saw_none {
        return Err(MetricError::ExtractionParse { raw: raw.to_string() });
    }
    Ok(dedupe(concepts))
}

/// Deterministic extractor that splits on list punctuation and on the words
/// "and"/"or". Every concept it returns is a verbatim span of the input, so
/// it pairs with [`ExactMatchVerifier`] for model-free scoring.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalConceptExtractor;

static LEXICAL_SPLIT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)[,;\n]|\.(?:\s|$)|\b(?:and|or)\b").unwrap());

impl ConceptExtractor for LexicalConceptExtractor {
    fn extract(&self, text: &str) -> Result<Vec<String>, MetricError> {
        Ok(dedupe(
            LEXICAL_SPLIT
                .split(text)
                .map(|p| LIST_MARKER.replace(p.trim(), "").trim().to_string())
                .filter(|p| !p.is_empty() && !p.eq_ignore_ascii_case("none")),
        ))
    }
}

/// True iff the normalized concept is a substring of the normalized target.
pub fn exact_match_verifier(concepts: &[String], target: &str) -> Vec<bool> {
    let target = normalize_concept(target);
    concepts
        .iter()
        .map(|c| {
            let c = normalize_concept(c);
            !c.is_empty() && target.contains(&c)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatchVerifier;

impl Verifier for ExactMatchVerifier {
    fn verify(&self, concepts: &[String], target: &str) -> Result<Vec<bool>, MetricError> {
        Ok(exact_match_verifier(concepts, target))
    }
}

/// Paraphrase-tolerant verification through the metric-verification prompt.
/// By default all concepts for one target share a single numbered call.
pub struct LlmVerifier<'a> {
    client: &'a LlmClient,
    prompts: &'a PromptSet,
    budget: TokenBudget,
    per_concept: bool,
}

impl<'a> LlmVerifier<'a> {
    pub fn new(client: &'a LlmClient, prompts: &'a PromptSet, budget: TokenBudget) -> Self {
        Self {
            client,
            prompts,
            budget,
            per_concept: false,
        }
    }

    /// One call per concept instead of one batched call.
    pub fn per_concept(mut self, enabled: bool) -> Self {
        self.per_concept = enabled;
        self
    }

    fn ask(&self, concepts: &[String], target: &str) -> Result<Vec<bool>, MetricError> {
        let numbered: Vec<String> = concepts
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {}", i + 1, c))
            .collect();
        let input = format!("Target text:\n{}\n\nConcepts:\n{}", target.trim(), numbered.join("\n"));
        let template = TemplateName::MetricVerification;
        let prompt = self.prompts.render(template, &input, 0, "", &[], &self.budget)?;
        let raw = self
            .client
            .complete(&CompletionRequest::new(template.prompt_kind(), prompt))?;
        parse_verdicts(&raw, concepts.len())
    }
}

impl Verifier for LlmVerifier<'_> {
    fn verify(&self, concepts: &[String], target: &str) -> Result<Vec<bool>, MetricError> {
        if concepts.is_empty() {
            return Ok(Vec::new());
        }
        if target.trim().is_empty() {
            return Ok(vec![false; concepts.len()]);
        }
        if self.per_concept {
            let mut out = Vec::with_capacity(concepts.len());
            for c in concepts {
                out.extend(self.ask(std::slice::from_ref(c), target)?);
            }
            Ok(out)
        } else {
            self.ask(concepts, target)
        }
    }
}

static VERDICT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^(?:(?P<n>\d+)\s*[.):\-]?\s*)?(?P<v>yes|no|true|false)\b").unwrap());

/// Parses `N. yes|no` lines. Unnumbered lines are accepted positionally when
/// no line is numbered. Anything else is an error.
pub fn parse_verdicts(raw: &str, expected: usize) -> Result<Vec<bool>, MetricError> {
    let mut numbered = Vec::new();
    let mut bare = Vec::new();
    for line in raw.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let caps = VERDICT.captures(line).ok_or_else(|| MetricError::VerdictParse {
            line: line.to_string(),
            raw: raw.to_string(),
        })?;
        let v = caps["v"].to_ascii_lowercase();
        let flag = v == "yes" || v == "true";
        match caps.name("n") {
            Some(n) => numbered.push((n.as_str().parse::<usize>().unwrap_or(0), flag)),
            None => bare.push(flag),
        }
    }
    let mismatch = |got| MetricError::VerdictCount {
        expected,
        got,
        raw: raw.to_string(),
    };
    if !numbered.is_empty() && !bare.is_empty() {
        return Err(mismatch(numbered.len()));
    }
    if numbered.is_empty() {
        return if bare.len() == expected {
            Ok(bare)
        } else {
            Err(mismatch(bare.len()))
        };
    }
    let mut out = vec![None; expected];
    for (n, flag) in &numbered {
        match out.get_mut(n.wrapping_sub(1)) {
            Some(slot @ None) => *slot = Some(*flag),
            _ => return Err(mismatch(numbered.len())),
        }
    }
    out.into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| mismatch(numbered.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionScore {
    pub section: Section,
    pub tp_gt: usize,
    pub f_n: usize,
    pub tp_pred: usize,
    pub f_p: usize,
    pub gpt_recall: f64,
    pub gpt_precision: f64,
    pub gpt_f1: f64,
}

impl SectionScore {
    /// Empty denominators score 1.0; F1 is 0 when both scores are 0.
    pub fn from_counts(section: Section, tp_gt: usize, f_n: usize, tp_pred: usize, f_p: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let gpt_recall = ratio(tp_gt, tp_gt + f_n);
        let gpt_precision = ratio(tp_pred, tp_pred + f_p);
        Self {
            section,
            tp_gt,
            f_n,
            tp_pred,
            f_p,
            gpt_recall,
            gpt_precision,
            gpt_f1: f1(gpt_precision, gpt_recall),
        }
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn score_section(
    section: Section,
    gt_text: &str,
    pred_text: &str,
    extractor: &dyn ConceptExtractor,
    verifier: &dyn Verifier,
) -> Result<SectionScore, MetricError> {
    let gt_concepts = extractor.extract(gt_text)?;
    let pred_concepts = extractor.extract(pred_text)?;
    let in_pred = verifier.verify(&gt_concepts, pred_text)?;
    let in_gt = verifier.verify(&pred_concepts, gt_text)?;
    let tp_gt = in_pred.iter().filter(|f| **f).count();
    let tp_pred = in_gt.iter().filter(|f| **f).count();
    Ok(SectionScore::from_counts(
        section,
        tp_gt,
        gt_concepts.len() - tp_gt,
        tp_pred,
        pred_concepts.len() - tp_pred,
    ))
}

/// Scores the four scored sections, in [`Section::SCORED`] order.
pub fn evaluate_encounter(
    pred: &StructuredSummary,
    gt: &StructuredSummary,
    extractor: &dyn ConceptExtractor,
    verifier: &dyn Verifier,
) -> Result<Vec<SectionScore>, MetricError> {
    Section::SCORED
        .iter()
        .map(|s| score_section(*s, gt.get(*s), pred.get(*s), extractor, verifier))
        .collect()
}

/// The columns that identify one experimental configuration.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfigKey {
    pub method: Method,
    pub extraction_k: Option<usize>,
    pub summarization_k: usize,
    pub selection: Option<SelectionMode>,
    pub resolver: bool,
}

impl From<&ConfigSnapshot> for ConfigKey {
    fn from(c: &ConfigSnapshot) -> Self {
        Self {
            method: c.method,
            extraction_k: c.extraction_k,
            summarization_k: c.summarization_k,
            selection: c.selection,
            resolver: c.resolver,
        }
    }
}

/// Per-encounter detail, one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncounterScores {
    pub encounter_id: String,
    pub config: ConfigKey,
    pub scores: Vec<SectionScore>,
}

impl EncounterScores {
    pub fn average_f1(&self) -> f64 {
        self.scores.iter().map(|s| s.gpt_f1).sum::<f64>() / self.scores.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Mean of per-encounter F1 within each section.
    #[default]
    Macro,
    /// F1 of counts pooled over encounters within each section.
    Micro,
}

/// One table row: per-section F1 over a configuration's encounters and their
/// mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: ConfigKey,
    pub encounters: usize,
    pub section_f1: Vec<(Section, f64)>,
    pub average: f64,
}

/// Groups by configuration in first-seen order.
pub fn aggregate(scores: &[EncounterScores], averaging: Averaging) -> Result<Vec<MetricReport>, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let mut groups: Vec<(ConfigKey, Vec<&EncounterScores>)> = Vec::new();
    for s in scores {
        match groups.iter_mut().find(|(k, _)| *k == s.config) {
            Some((_, members)) => members.push(s),
            None => groups.push((s.config.clone(), vec![s])),
        }
    }

    Ok(groups
        .into_iter()
        .map(|(config, members)| {
            let section_f1: Vec<(Section, f64)> = Section::SCORED
                .iter()
                .map(|section| {
                    let rows: Vec<&SectionScore> = members
                        .iter()
                        .flat_map(|m| m.scores.iter().filter(|s| s.section == *section))
                        .collect();
                    let value = match averaging {
                        Averaging::Macro => rows.iter().map(|s| s.gpt_f1).sum::<f64>() / rows.len().max(1) as f64,
                        Averaging::Micro => {
                            let sum = |f: fn(&SectionScore) -> usize| rows.iter().map(|s| f(s)).sum();
                            SectionScore::from_counts(
                                *section,
                                sum(|s| s.tp_gt),
                                sum(|s| s.f_n),
                                sum(|s| s.tp_pred),
                                sum(|s| s.f_p),
                            )
                            .gpt_f1
                        }
                    };
                    (*section, value)
                })
                .collect();
            let average = section_f1.iter().map(|(_, v)| v).sum::<f64>() / section_f1.len() as f64;
            MetricReport {
                config,
                encounters: members.len(),
                section_f1,
                average,
            }
        })
        .collect())
}

/// Percent with one decimal.
pub fn percent(value: f64) -> String {
    format!("{:.1}", value * 100.0)
}

pub fn write_csv<W: Write>(reports: &[MetricReport], out: W) -> Result<(), MetricError> {
    let err = |e: csv::Error| MetricError::Output(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "method",
        "extraction_k",
        "summarization_k",
        "selection",
        "resolver",
        "encounters",
    ];
    header.extend(Section::SCORED.iter().map(|s| s.key()));
    header.push("average");
    w.write_record(&header).map_err(err)?;
    for r in reports {
        let c = &r.config;
        let mut row = vec![
            c.method.to_string(),
            c.extraction_k.map(|k| k.to_string()).unwrap_or_default(),
            c.summarization_k.to_string(),
            c.selection.map(|s| s.to_string()).unwrap_or_default(),
            c.resolver.to_string(),
            r.encounters.to_string(),
        ];
        row.extend(r.section_f1.iter().map(|(_, v)| percent(*v)));
        row.push(percent(r.average));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| MetricError::Output(e.to_string()))
}

pub fn write_jsonl<W: Write>(scores: &[EncounterScores], mut out: W) -> Result<(), MetricError> {
    for s in scores {
        let line = serde_json::to_string(s).map_err(|e| MetricError::Output(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| MetricError::Output(e.to_string()))?;
    }
    Ok(())
}
