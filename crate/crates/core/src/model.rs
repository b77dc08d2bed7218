//! Domain types shared by every pipeline stage.
//!
//! Everything here is plain data: immutable once built and `Send + Sync`, so a
//! single [`Encounter`] or [`ExamplePool`](crate::selection::ExamplePool) can be
//! shared across worker threads without copying.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{CompletionParams, PromptKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("entity name is empty after normalization")]
    EmptyName,

    #[error("unknown affirmation status `{0}`")]
    UnknownStatus(String),

    #[error("unknown provenance tag `{0}`")]
    UnknownProvenance(String),

    #[error("duplicate entity `{0}` in ledger")]
    DuplicateEntity(String),
}

/// Every violated field of one raw encounter record.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid encounter{}: {}", id.as_ref().map(|i| format!(" `{i}`")).unwrap_or_default(), violations.join("; "))]
pub struct ValidationError {
    pub id: Option<String>,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Doctor,
    Patient,
}

impl Speaker {
    pub fn label(self) -> &'static str {
        match self {
            Speaker::Doctor => "Doctor",
            Speaker::Patient => "Patient",
        }
    }
}

impl FromStr for Speaker {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "doctor" => Ok(Speaker::Doctor),
            "patient" => Ok(Speaker::Patient),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

impl Turn {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Self {
            speaker,
            text: text.into(),
        }
    }
}

/// One doctor/patient dialogue plus the patient's opening message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encounter {
    pub id: String,
    /// Reason for encounter: the patient's first message.
    pub rfe: String,
    pub age: u32,
    pub sex: String,
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_summary: Option<StructuredSummary>,
}

impl Encounter {
    /// The dialogue as one text block, RFE first.
    pub fn dialogue_text(&self) -> String {
        let mut out = format!("Patient (reason for encounter): {}", self.rfe.trim());
        for turn in &self.turns {
            out.push('\n');
            out.push_str(turn.speaker.label());
            out.push_str(": ");
            out.push_str(turn.text.trim());
        }
        out
    }

    /// Whitespace-token count over the RFE and every turn.
    pub fn whitespace_tokens(&self) -> usize {
        self.rfe.split_whitespace().count()
            + self
                .turns
                .iter()
                .map(|t| t.text.split_whitespace().count())
                .sum::<usize>()
    }
}

/// Checks a decoded dataset record and builds an [`Encounter`].
///
/// Never panics: every problem found is collected into the returned
/// [`ValidationError`] rather than stopping at the first.
pub fn validate_encounter(raw: &Value) -> Result<Encounter, ValidationError> {
    let Some(obj) = raw.as_object() else {
        return Err(ValidationError {
            id: None,
            violations: vec!["record is not a JSON object".to_string()],
        });
    };
    let mut violations = Vec::new();

    let id = required_text(obj, "id", &mut violations);
    let rfe = required_text(obj, "rfe", &mut violations);
    let sex = required_text(obj, "sex", &mut violations);

    let age = match obj.get("age") {
        None | Some(Value::Null) => {
            violations.push("missing field `age`".to_string());
            None
        }
        Some(v) => match v.as_i64() {
            Some(a) if a < 0 => {
                violations.push(format!("negative age {a}"));
                None
            }
            Some(a) if a > u32::MAX as i64 => {
                violations.push(format!("age {a} out of range"));
                None
            }
            Some(a) => Some(a as u32),
            None => {
                violations.push(format!("field `age` must be an integer, got {v}"));
                None
            }
        },
    };

    let mut turns = Vec::new();
    match obj.get("turns") {
        None | Some(Value::Null) => violations.push("missing field `turns`".to_string()),
        Some(Value::Array(items)) if items.is_empty() => violations.push("turns empty".to_string()),
        Some(Value::Array(items)) => {
            for (i, item) in items.iter().enumerate() {
                if let Some(turn) = validate_turn(i, item, &mut violations) {
                    turns.push(turn);
                }
            }
        }
        Some(_) => violations.push("field `turns` must be an array".to_string()),
    }

    let reference_summary = match obj.get("reference_summary") {
        None | Some(Value::Null) => None,
        Some(v) => match serde_json::from_value::<StructuredSummary>(v.clone()) {
            Ok(s) => Some(s),
            Err(e) => {
                violations.push(format!("reference_summary: {e}"));
                None
            }
        },
    };

    if !violations.is_empty() {
        return Err(ValidationError { id, violations });
    }
    Ok(Encounter {
        id: id.unwrap_or_default(),
        rfe: rfe.unwrap_or_default(),
        age: age.unwrap_or_default(),
        sex: sex.unwrap_or_default(),
        turns,
        reference_summary,
    })
}

fn required_text(obj: &serde_json::Map<String, Value>, field: &str, violations: &mut Vec<String>) -> Option<String> {
    match obj.get(field) {
        None | Some(Value::Null) => {
            violations.push(format!("missing field `{field}`"));
            None
        }
        Some(Value::String(s)) if s.trim().is_empty() => {
            violations.push(format!("field `{field}` is empty"));
            None
        }
        Some(Value::String(s)) => Some(s.clone()),
        Some(other) => {
            violations.push(format!("field `{field}` must be a string, got {other}"));
            None
        }
    }
}

fn validate_turn(index: usize, item: &Value, violations: &mut Vec<String>) -> Option<Turn> {
    let Some(obj) = item.as_object() else {
        violations.push(format!("turns[{index}]: not an object"));
        return None;
    };
    let speaker = match obj.get("speaker") {
        Some(Value::String(s)) => match s.parse::<Speaker>() {
            Ok(sp) => Some(sp),
            Err(_) => {
                violations.push(format!("turns[{index}]: unknown speaker \"{s}\""));
                None
            }
        },
        None | Some(Value::Null) => {
            violations.push(format!("turns[{index}]: missing field `speaker`"));
            None
        }
        Some(other) => {
            violations.push(format!("turns[{index}]: speaker must be a string, got {other}"));
            None
        }
    };
    let text = match obj.get("text") {
        Some(Value::String(s)) if s.trim().is_empty() => {
            violations.push(format!("turns[{index}]: text is empty"));
            None
        }
        Some(Value::String(s)) => Some(s.clone()),
        None | Some(Value::Null) => {
            violations.push(format!("turns[{index}]: missing field `text`"));
            None
        }
        Some(other) => {
            violations.push(format!("turns[{index}]: text must be a string, got {other}"));
            None
        }
    };
    Some(Turn::new(speaker?, text?))
}

/// Case-folds, trims, and collapses internal whitespace runs to one space.
pub fn normalize_entity_name(name: &str) -> Result<String, ModelError> {
    let folded = name.to_lowercase();
    let normalized = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    if normalized.is_empty() {
        return Err(ModelError::EmptyName);
    }
    Ok(normalized)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffirmationStatus {
    Present,
    Absent,
    Unknown,
}

impl AffirmationStatus {
    pub const ALL: [AffirmationStatus; 3] = [
        AffirmationStatus::Present,
        AffirmationStatus::Absent,
        AffirmationStatus::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AffirmationStatus::Present => "present",
            AffirmationStatus::Absent => "absent",
            AffirmationStatus::Unknown => "unknown",
        }
    }

    pub fn is_definite(self) -> bool {
        self != AffirmationStatus::Unknown
    }
}

impl fmt::Display for AffirmationStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AffirmationStatus {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "present" => Ok(AffirmationStatus::Present),
            "absent" => Ok(AffirmationStatus::Absent),
            "unknown" => Ok(AffirmationStatus::Unknown),
            _ => Err(ModelError::UnknownStatus(s.to_string())),
        }
    }
}

/// Where an entity mention came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Provenance {
    Rfe,
    TurnPair(usize),
    Resolver,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Rfe => f.write_str("rfe"),
            Provenance::TurnPair(i) => write!(f, "turn-pair-{i}"),
            Provenance::Resolver => f.write_str("resolver"),
        }
    }
}

impl From<Provenance> for String {
    fn from(p: Provenance) -> Self {
        p.to_string()
    }
}

impl TryFrom<String> for Provenance {
    type Error = ModelError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        match s.as_str() {
            "rfe" => Ok(Provenance::Rfe),
            "resolver" => Ok(Provenance::Resolver),
            _ => s
                .strip_prefix("turn-pair-")
                .and_then(|i| i.parse().ok())
                .map(Provenance::TurnPair)
                .ok_or(ModelError::UnknownProvenance(s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedicalEntity {
    pub name: String,
    pub status: AffirmationStatus,
    #[serde(default)]
    pub provenance: Vec<Provenance>,
}

impl MedicalEntity {
    /// Builds an entity with a normalized name and no provenance.
    pub fn new(name: &str, status: AffirmationStatus) -> Result<Self, ModelError> {
        Ok(Self {
            name: normalize_entity_name(name)?,
            status,
            provenance: Vec::new(),
        })
    }

    pub fn with_provenance(mut self, source: Provenance) -> Self {
        self.provenance.push(source);
        self
    }
}

/// The collated entity set for one encounter. Names are unique.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<MedicalEntity>", into = "Vec<MedicalEntity>")]
pub struct EntityLedger {
    entities: Vec<MedicalEntity>,
}

impl EntityLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entities(&self) -> &[MedicalEntity] {
        &self.entities
    }

    pub fn iter(&self) -> impl Iterator<Item = &MedicalEntity> {
        self.entities.iter()
    }

    pub fn get(&self, name: &str) -> Option<&MedicalEntity> {
        self.entities.iter().find(|e| e.name == name)
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut MedicalEntity> {
        self.entities.iter_mut().find(|e| e.name == name)
    }

    pub fn push(&mut self, entity: MedicalEntity) -> Result<(), ModelError> {
        if self.get(&entity.name).is_some() {
            return Err(ModelError::DuplicateEntity(entity.name));
        }
        self.entities.push(entity);
        Ok(())
    }

    pub fn with_status(&self, status: AffirmationStatus) -> impl Iterator<Item = &MedicalEntity> {
        self.entities.iter().filter(move |e| e.status == status)
    }
}

impl TryFrom<Vec<MedicalEntity>> for EntityLedger {
    type Error = ModelError;

    fn try_from(entities: Vec<MedicalEntity>) -> Result<Self, Self::Error> {
        let mut ledger = EntityLedger::new();
        for e in entities {
            ledger.push(e)?;
        }
        Ok(ledger)
    }
}

impl From<EntityLedger> for Vec<MedicalEntity> {
    fn from(l: EntityLedger) -> Self {
        l.entities
    }
}

/// The six sections of a visit summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    DemographicsSdoh,
    MedicalIntent,
    PertinentPositives,
    PertinentNegatives,
    PertinentUnknowns,
    MedicalHistory,
}

impl Section {
    pub const ALL: [Section; 6] = [
        Section::DemographicsSdoh,
        Section::MedicalIntent,
        Section::PertinentPositives,
        Section::PertinentNegatives,
        Section::PertinentUnknowns,
        Section::MedicalHistory,
    ];

    /// Sections that receive concept-level scores, in report column order.
    pub const SCORED: [Section; 4] = [
        Section::PertinentPositives,
        Section::PertinentNegatives,
        Section::PertinentUnknowns,
        Section::MedicalHistory,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Section::DemographicsSdoh => "demographics_sdoh",
            Section::MedicalIntent => "medical_intent",
            Section::PertinentPositives => "pertinent_positives",
            Section::PertinentNegatives => "pertinent_negatives",
            Section::PertinentUnknowns => "pertinent_unknowns",
            Section::MedicalHistory => "medical_history",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Section::DemographicsSdoh => "Demographics and Social Determinants of Health",
            Section::MedicalIntent => "Medical Intent",
            Section::PertinentPositives => "Pertinent Positives",
            Section::PertinentNegatives => "Pertinent Negatives",
            Section::PertinentUnknowns => "Pertinent Unknowns",
            Section::MedicalHistory => "Medical History",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// A six-section visit summary. Section bodies are stored trimmed; a section
/// may be empty but is never missing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "SummaryRecord", into = "SummaryRecord")]
pub struct StructuredSummary {
    sections: [String; 6],
}

impl StructuredSummary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_sections<I, S>(sections: I) -> Self
    where
        I: IntoIterator<Item = (Section, S)>,
        S: AsRef<str>,
    {
        let mut s = Self::new();
        for (section, text) in sections {
            s.set(section, text.as_ref());
        }
        s
    }

    pub fn get(&self, section: Section) -> &str {
        &self.sections[section.index()]
    }

    pub fn set(&mut self, section: Section, text: &str) {
        self.sections[section.index()] = text.trim().to_string();
    }

    pub fn iter(&self) -> impl Iterator<Item = (Section, &str)> {
        Section::ALL.into_iter().map(|s| (s, self.get(s)))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SummaryRecord {
    demographics_sdoh: String,
    medical_intent: String,
    pertinent_positives: String,
    pertinent_negatives: String,
    pertinent_unknowns: String,
    medical_history: String,
}

impl From<SummaryRecord> for StructuredSummary {
    fn from(r: SummaryRecord) -> Self {
        StructuredSummary::from_sections([
            (Section::DemographicsSdoh, r.demographics_sdoh),
            (Section::MedicalIntent, r.medical_intent),
            (Section::PertinentPositives, r.pertinent_positives),
            (Section::PertinentNegatives, r.pertinent_negatives),
            (Section::PertinentUnknowns, r.pertinent_unknowns),
            (Section::MedicalHistory, r.medical_history),
        ])
    }
}

impl From<StructuredSummary> for SummaryRecord {
    fn from(s: StructuredSummary) -> Self {
        let [demographics_sdoh, medical_intent, pertinent_positives, pertinent_negatives, pertinent_unknowns, medical_history] =
            s.sections;
        SummaryRecord {
            demographics_sdoh,
            medical_intent,
            pertinent_positives,
            pertinent_negatives,
            pertinent_unknowns,
            medical_history,
        }
    }
}

/// Which prompt family an in-context example teaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    RfeExtraction,
    DialogueExtraction,
    Summarization,
}

impl ExampleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExampleKind::RfeExtraction => "rfe_extraction",
            ExampleKind::DialogueExtraction => "dialogue_extraction",
            ExampleKind::Summarization => "summarization",
        }
    }
}

impl fmt::Display for ExampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A labeled demonstration. `label` is already in the canonical output
/// grammar of the prompt family that consumes it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub kind: ExampleKind,
    pub input_text: String,
    pub age: u32,
    pub sex: String,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MedsumEnt,
    NaiveBaseline,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::MedsumEnt => "medsum_ent",
            Method::NaiveBaseline => "naive_baseline",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Random,
    Semantic,
}

impl SelectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMode::Random => "random",
            SelectionMode::Semantic => "semantic",
        }
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The configuration a record was produced under. `extraction_k` and
/// `selection` are `None` where the method does not use them.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub method: Method,
    pub extraction_k: Option<usize>,
    pub summarization_k: usize,
    pub selection: Option<SelectionMode>,
    pub resolver: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmCall {
    pub prompt_kind: PromptKind,
    pub prompt_hash: String,
    pub params: CompletionParams,
}

/// Everything one pipeline run produced for one encounter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub encounter_id: String,
    pub method: Method,
    pub config: ConfigSnapshot,
    pub ledger: EntityLedger,
    pub summary: StructuredSummary,
    pub llm_call_trace: Vec<LlmCall>,
    #[serde(default)]
    pub warnings: Vec<String>,
}
