//! Entity-grounded, prompt-chained summarization of doctor/patient dialogues,
//! with concept-level precision/recall/F1 evaluation.
//!
//! The pipeline extracts medical entities and their affirmation status from
//! the reason for encounter and from each doctor/patient turn pair, collates
//! them into a ledger, optionally re-examines the unknown-status entries
//! against the whole dialogue, and finally summarizes the dialogue into six
//! sections conditioned on that ledger. All model traffic goes through
//! [`backend::LlmClient`], so a replay store makes every run reproducible.

pub mod backend;
pub mod chain;
pub mod cli;
pub mod metrics;
pub mod model;
pub mod promptkit;
pub mod selection;

pub use backend::{default_params, CompletionBackend, CompletionParams, CompletionRequest, LlmClient, PromptKind};
pub use chain::{ChainConfig, Pipeline};
pub use model::{AffirmationStatus, Encounter, EntityLedger, MedicalEntity, RunRecord, Section, StructuredSummary};
