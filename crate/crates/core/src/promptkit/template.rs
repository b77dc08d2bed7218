use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{default_params, PromptKind};
use crate::model::{ExampleKind, LabeledExample};

pub const DEFAULT_EXAMPLE_SEPARATOR: &str = "=== EXAMPLE ===";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template `{template}` uses slot {{{slot}}} more than once")]
    DuplicateSlot { template: String, slot: String },

    #[error("template `{0}` has no {{input}} slot")]
    MissingInput(String),

    #[error("reading template {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RenderError {
    #[error(
        "prompt `{template}` needs ~{estimated} tokens plus {reserved} for the completion, \
         over the {limit}-token budget by {overflow}"
    )]
    BudgetExceeded {
        template: TemplateName,
        estimated: usize,
        reserved: usize,
        limit: usize,
        overflow: usize,
    },

    #[error("template `{template}` does not accept {found} examples (example `{example_id}`)")]
    KindMismatch {
        template: TemplateName,
        found: ExampleKind,
        example_id: String,
    },
}

/// Whitespace-token estimator with a sub-word inflation factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenBudget {
    pub max_context_tokens: usize,
    pub inflation_factor: f64,
}

impl Default for TokenBudget {
    fn default() -> Self {
        Self {
            max_context_tokens: 4097,
            inflation_factor: 1.3,
        }
    }
}

impl TokenBudget {
    pub fn estimate(&self, text: &str) -> usize {
        estimate_tokens(text, self.inflation_factor)
    }
}

/// `ceil(whitespace tokens × factor)`, never below the whitespace count for
/// factors ≥ 1. Products within 1e-9 of an integer are treated as that
/// integer so 100 × 1.3 gives 130, not 131.
pub fn estimate_tokens(text: &str, inflation_factor: f64) -> usize {
    let words = text.split_whitespace().count();
    if words == 0 {
        return 0;
    }
    let x = words as f64 * inflation_factor;
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest as usize
    } else {
        x.ceil() as usize
    }
}

/// The seven prompt templates the artifact uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    RfeExtraction,
    DialogueExtraction,
    UnknownResolver,
    Summarization,
    BaselineSummarization,
    MetricExtraction,
    MetricVerification,
}

impl TemplateName {
    pub const ALL: [TemplateName; 7] = [
        TemplateName::RfeExtraction,
        TemplateName::DialogueExtraction,
        TemplateName::UnknownResolver,
        TemplateName::Summarization,
        TemplateName::BaselineSummarization,
        TemplateName::MetricExtraction,
        TemplateName::MetricVerification,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::RfeExtraction => "rfe_extraction",
            TemplateName::DialogueExtraction => "dialogue_extraction",
            TemplateName::UnknownResolver => "unknown_resolver",
            TemplateName::Summarization => "summarization",
            TemplateName::BaselineSummarization => "baseline_summarization",
            TemplateName::MetricExtraction => "metric_extraction",
            TemplateName::MetricVerification => "metric_verification",
        }
    }

    /// The request kind (and so the sampling defaults) this template is sent with.
    pub fn prompt_kind(self) -> PromptKind {
        match self {
            TemplateName::RfeExtraction => PromptKind::RfeExtraction,
            TemplateName::DialogueExtraction => PromptKind::DialogueExtraction,
            TemplateName::UnknownResolver => PromptKind::UnknownResolver,
            TemplateName::Summarization | TemplateName::BaselineSummarization => PromptKind::Summarization,
            TemplateName::MetricExtraction => PromptKind::MetricExtraction,
            TemplateName::MetricVerification => PromptKind::MetricVerification,
        }
    }

    /// Which labeled examples may be rendered into this template.
    pub fn example_kind(self) -> Option<ExampleKind> {
        match self {
            TemplateName::RfeExtraction => Some(ExampleKind::RfeExtraction),
            TemplateName::DialogueExtraction => Some(ExampleKind::DialogueExtraction),
            TemplateName::Summarization | TemplateName::BaselineSummarization => Some(ExampleKind::Summarization),
            _ => None,
        }
    }

    fn default_text(self) -> &'static str {
        match self {
            TemplateName::RfeExtraction => include_str!("../../templates/rfe_extraction.txt"),
            TemplateName::DialogueExtraction => {
                include_str!("../../templates/dialogue_extraction.txt")
            }
            TemplateName::UnknownResolver => include_str!("../../templates/unknown_resolver.txt"),
            TemplateName::Summarization => include_str!("../../templates/summarization.txt"),
            TemplateName::BaselineSummarization => {
                include_str!("../../templates/baseline_summarization.txt")
            }
            TemplateName::MetricExtraction => include_str!("../../templates/metric_extraction.txt"),
            TemplateName::MetricVerification => {
                include_str!("../../templates/metric_verification.txt")
            }
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Age,
    Sex,
    Input,
    Examples,
}

impl Slot {
    fn parse(name: &str) -> Option<Slot> {
        match name {
            "age" => Some(Slot::Age),
            "sex" => Some(Slot::Sex),
            "input" => Some(Slot::Input),
            "examples" => Some(Slot::Examples),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Slot::Age => "age",
            Slot::Sex => "sex",
            Slot::Input => "input",
            Slot::Examples => "examples",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(Slot),
}

/// A preamble with named slots `{age}`, `{sex}`, `{input}`, `{examples}`.
/// Any other braces are literal text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: TemplateName,
    segments: Vec<Segment>,
    example_separator: String,
}

impl PromptTemplate {
    pub fn parse(name: TemplateName, text: &str) -> Result<Self, TemplateError> {
        let mut segments = Vec::new();
        let mut seen = Vec::new();
        let mut literal = String::new();
        let mut rest = text;
        while let Some(open) = rest.find('{') {
            let after = &rest[open + 1..];
            let slot = after
                .find('}')
                .and_then(|close| Slot::parse(&after[..close]).map(|s| (s, close)));
            match slot {
                Some((slot, close)) => {
                    if seen.contains(&slot) {
                        return Err(TemplateError::DuplicateSlot {
                            template: name.to_string(),
                            slot: slot.name().to_string(),
                        });
                    }
                    seen.push(slot);
                    literal.push_str(&rest[..open]);
                    if !literal.is_empty() {
                        segments.push(Segment::Text(std::mem::take(&mut literal)));
                    }
                    segments.push(Segment::Slot(slot));
                    rest = &after[close + 1..];
                }
                None => {
                    literal.push_str(&rest[..=open]);
                    rest = after;
                }
            }
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            segments.push(Segment::Text(literal));
        }
        if !seen.contains(&Slot::Input) {
            return Err(TemplateError::MissingInput(name.to_string()));
        }
        Ok(Self {
            name,
            segments,
            example_separator: DEFAULT_EXAMPLE_SEPARATOR.to_string(),
        })
    }

    pub fn with_separator(mut self, separator: impl Into<String>) -> Self {
        self.example_separator = separator.into();
        self
    }

    pub fn name(&self) -> TemplateName {
        self.name
    }

    pub fn kind(&self) -> PromptKind {
        self.name.prompt_kind()
    }

    pub fn example_separator(&self) -> &str {
        &self.example_separator
    }

    /// Fills the slots. Examples are rendered in the given order, each block
    /// opened by the separator line; the live input always comes last.
    pub fn render(
        &self,
        input_text: &str,
        age: u32,
        sex: &str,
        examples: &[&LabeledExample],
        budget: &TokenBudget,
    ) -> Result<String, RenderError> {
        for ex in examples {
            if self.name.example_kind() != Some(ex.kind) {
                return Err(RenderError::KindMismatch {
                    template: self.name,
                    found: ex.kind,
                    example_id: ex.id.clone(),
                });
            }
        }
        let examples_text = examples
            .iter()
            .map(|ex| {
                format!(
                    "{}\nPatient: {} year old {}\nInput:\n{}\nOutput:\n{}\n",
                    self.example_separator,
                    ex.age,
                    ex.sex.trim(),
                    ex.input_text.trim(),
                    ex.label.trim()
                )
            })
            .collect::<String>();

        let mut out = String::new();
        let mut skip_newline = false;
        for segment in &self.segments {
            let skip = std::mem::take(&mut skip_newline);
            match segment {
                Segment::Text(t) if skip => out.push_str(t.strip_prefix('\n').unwrap_or(t)),
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(Slot::Age) => out.push_str(&age.to_string()),
                Segment::Slot(Slot::Sex) => out.push_str(sex.trim()),
                Segment::Slot(Slot::Input) => out.push_str(input_text.trim()),
                // An empty slot on its own line takes the line with it.
                Segment::Slot(Slot::Examples) if examples_text.is_empty() => {
                    skip_newline = out.is_empty() || out.ends_with('\n');
                }
                Segment::Slot(Slot::Examples) => out.push_str(examples_text.trim_end_matches('\n')),
            }
        }

        let estimated = budget.estimate(&out);
        let reserved = default_params(self.kind()).max_tokens as usize;
        if estimated + reserved > budget.max_context_tokens {
            return Err(RenderError::BudgetExceeded {
                template: self.name,
                estimated,
                reserved,
                limit: budget.max_context_tokens,
                overflow: estimated + reserved - budget.max_context_tokens,
            });
        }
        Ok(out)
    }
}

/// One template per [`TemplateName`].
#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: Vec<PromptTemplate>,
}

impl Default for PromptSet {
    fn default() -> Self {
        let templates = TemplateName::ALL
            .iter()
            .map(|&n| PromptTemplate::parse(n, n.default_text()).expect("built-in template"))
            .collect();
        Self { templates }
    }
}

impl PromptSet {
    /// Loads `<name>.txt` for each template from `dir`, falling back to the
    /// built-in text for files that are absent.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = PromptSet::default();
        for name in TemplateName::ALL {
            let path = dir.join(format!("{}.txt", name.as_str()));
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            set.replace(PromptTemplate::parse(name, &text)?);
        }
        Ok(set)
    }

    pub fn replace(&mut self, template: PromptTemplate) {
        let slot = self
            .templates
            .iter_mut()
            .find(|t| t.name == template.name)
            .expect("every template name is present");
        *slot = template;
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        self.templates
            .iter()
            .find(|t| t.name == name)
            .expect("every template name is present")
    }

    pub fn render(
        &self,
        name: TemplateName,
        input_text: &str,
        age: u32,
        sex: &str,
        examples: &[&LabeledExample],
        budget: &TokenBudget,
    ) -> Result<String, RenderError> {
        self.get(name).render(input_text, age, sex, examples, budget)
    }
}
