//! Prompt templates, k-shot assembly under a token budget, and parsers for
//! model outputs.

mod parse;
mod template;

pub use parse::{
    parse_entity_list, parse_summary, render_summary, serialize_entities, serialize_ledger, EntityParse, ParseError,
    SummaryParse,
};
pub use template::{
    estimate_tokens, PromptSet, PromptTemplate, RenderError, TemplateError, TemplateName, TokenBudget,
    DEFAULT_EXAMPLE_SEPARATOR,
};
