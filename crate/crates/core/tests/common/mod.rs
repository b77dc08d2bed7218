//! Shared fixtures: synthetic encounters with known ground truth and a
//! scripted backend that answers every prompt kind from the prompt content.
#![allow(dead_code)]

use std::path::Path;
use std::sync::{Arc, LazyLock, Mutex};

use regex::Regex;

use medsum::backend::{BackendError, CompletionBackend, CompletionRequest, FnBackend, LlmClient, PromptKind};
use medsum::metrics::{exact_match_verifier, ConceptExtractor, LexicalConceptExtractor};
use medsum::model::{ExampleKind, LabeledExample, Section, Speaker, Turn};
use medsum::promptkit::parse_entity_list;
use medsum::{AffirmationStatus, Encounter, StructuredSummary};

pub const SYMPTOMS: [&str; 12] = [
    "cough",
    "fever",
    "chills",
    "nausea",
    "headache",
    "fatigue",
    "wheezing",
    "rash",
    "dizziness",
    "back pain",
    "sore throat",
    "chest pain",
];

/// Tiny deterministic generator so fixtures do not depend on a PRNG crate.
pub struct SplitMix(pub u64);

impl SplitMix {
    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next() % n as u64) as usize
    }
}

fn answer(status: AffirmationStatus) -> &'static str {
    match status {
        AffirmationStatus::Present => "Yes, I do.",
        AffirmationStatus::Absent => "No.",
        AffirmationStatus::Unknown => "I am not sure.",
    }
}

/// Doctor asks about symptoms one by one; some questions are followed by a
/// second doctor turn, which produces a singleton window.
pub fn synthetic_encounter(id: &str, questions: usize, seed: u64) -> Encounter {
    let mut rng = SplitMix(seed);
    let chief = SYMPTOMS[rng.below(SYMPTOMS.len())];
    let mut turns = Vec::new();
    let mut truth: Vec<(String, AffirmationStatus)> = vec![(chief.to_string(), AffirmationStatus::Present)];
    for _ in 0..questions {
        let sym = SYMPTOMS[rng.below(SYMPTOMS.len())];
        let status = AffirmationStatus::ALL[rng.below(3)];
        if rng.below(5) == 0 {
            turns.push(Turn::new(Speaker::Doctor, "Thanks for letting me know."));
        }
        turns.push(Turn::new(Speaker::Doctor, format!("Do you have {sym}?")));
        turns.push(Turn::new(Speaker::Patient, answer(status)));
        match truth.iter_mut().find(|(n, _)| n == sym) {
            Some(entry) if status.is_definite() => entry.1 = status,
            Some(_) => {}
            None => truth.push((sym.to_string(), status)),
        }
    }
    let list = |s: AffirmationStatus| {
        truth
            .iter()
            .filter(|(_, st)| *st == s)
            .map(|(n, _)| n.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    };
    let reference = StructuredSummary::from_sections([
        (Section::DemographicsSdoh, "Adult patient.".to_string()),
        (Section::MedicalIntent, format!("Wants care for {chief}.")),
        (Section::PertinentPositives, list(AffirmationStatus::Present)),
        (Section::PertinentNegatives, list(AffirmationStatus::Absent)),
        (Section::PertinentUnknowns, list(AffirmationStatus::Unknown)),
        (Section::MedicalHistory, String::new()),
    ]);
    Encounter {
        id: id.to_string(),
        rfe: format!("I have {chief} and would like to see a doctor"),
        age: 20 + rng.below(60) as u32,
        sex: if rng.below(2) == 0 { "female" } else { "male" }.to_string(),
        turns,
        reference_summary: Some(reference),
    }
}

pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<Encounter> {
    (0..n)
        .map(|i| synthetic_encounter(&format!("enc-{i:03}"), 3 + i % 6, seed.wrapping_add(i as u64)))
        .collect()
}

pub fn write_dataset(path: &Path, encounters: &[Encounter]) {
    let text: String = encounters
        .iter()
        .map(|e| serde_json::to_string(e).unwrap() + "\n")
        .collect();
    std::fs::write(path, text).unwrap();
}

/// Labeled examples for the three example-consuming prompt families.
pub fn example_pool(per_kind: usize) -> Vec<LabeledExample> {
    let mut out = Vec::new();
    for (kind, prefix) in [
        (ExampleKind::RfeExtraction, "rfe"),
        (ExampleKind::DialogueExtraction, "dlg"),
        (ExampleKind::Summarization, "sum"),
    ] {
        for i in 0..per_kind {
            let sym = SYMPTOMS[i % SYMPTOMS.len()];
            let (input_text, label) = match kind {
                ExampleKind::RfeExtraction => (format!("My {sym} is bad"), format!("- {sym} (present)")),
                ExampleKind::DialogueExtraction => (
                    format!("Doctor: Any {sym} lately?\nPatient: Not at all."),
                    format!("- {sym} (absent)"),
                ),
                ExampleKind::Summarization => (
                    format!("Patient says their {sym} started yesterday."),
                    format!("Pertinent Positives:\n{sym}"),
                ),
            };
            out.push(LabeledExample {
                id: format!("{prefix}-{i:02}"),
                kind,
                input_text,
                age: 30 + i as u32,
                sex: "female".into(),
                label,
            });
        }
    }
    out
}

pub fn write_pool(path: &Path, examples: &[LabeledExample]) {
    let text: String = examples
        .iter()
        .map(|e| serde_json::to_string(e).unwrap() + "\n")
        .collect();
    std::fs::write(path, text).unwrap();
}

fn after_last<'a>(prompt: &'a str, marker: &str) -> &'a str {
    prompt
        .rfind(marker)
        .map(|i| &prompt[i + marker.len()..])
        .unwrap_or(prompt)
}

/// The live input block of a chain prompt.
pub fn live_input(prompt: &str) -> &str {
    let tail = after_last(prompt, "=== INPUT ===");
    let tail = tail.find("Input:\n").map(|i| &tail[i + 7..]).unwrap_or(tail);
    tail.rsplit_once("\nOutput:").map(|(body, _)| body).unwrap_or(tail)
}

static QUESTION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"Doctor: Do you have (.+)\?").unwrap());
static REPLY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"Patient: (.+)").unwrap());

/// Resolver rule used by the scripted backend: even-length names become
/// present, odd-length names stay unknown.
pub fn scripted_resolution(name: &str) -> AffirmationStatus {
    if name.len().is_multiple_of(2) {
        AffirmationStatus::Present
    } else {
        AffirmationStatus::Unknown
    }
}

fn scripted_summary(positives: &[String], negatives: &[String], unknowns: &[String]) -> String {
    format!(
        "**Demographics and Social Determinants of Health:**\nAdult patient.\n\n\
         **Patient Intent:**\nWants care.\n\n\
         **Pertinent Positives:**\n{}\n\n\
         **Pertinent Negatives**:\n{}\n\n\
         **Pertinent Unknowns: **\n{}\n\n\
         **Medical History:**\n",
        positives.join(", "),
        negatives.join(", "),
        unknowns.join(", ")
    )
}

pub fn scripted_reply(req: &CompletionRequest) -> Result<String, BackendError> {
    let prompt = req.prompt.as_str();
    Ok(match req.kind {
        PromptKind::RfeExtraction => {
            let input = live_input(prompt);
            SYMPTOMS
                .iter()
                .filter(|s| input.contains(*s))
                .map(|s| format!("- {s} (present)\n"))
                .collect()
        }
        PromptKind::DialogueExtraction => {
            let input = live_input(prompt);
            match (QUESTION.captures(input), REPLY.captures(input)) {
                (Some(q), Some(r)) => {
                    let status = match &r[1] {
                        a if a.starts_with("Yes") => "present",
                        a if a.starts_with("No") => "absent",
                        _ => "unknown",
                    };
                    format!("- {} ({status})", &q[1])
                }
                _ => String::new(),
            }
        }
        PromptKind::UnknownResolver => {
            let block = after_last(prompt, "Unknown entities:\n");
            let block = block.split("\n\nConversation:").next().unwrap_or("");
            let parsed = parse_entity_list(block).map(|p| p.entities).unwrap_or_default();
            parsed
                .iter()
                .map(|e| format!("- {} ({})\n", e.name, scripted_resolution(&e.name)))
                .collect()
        }
        PromptKind::Summarization if prompt.contains("entities already extracted") => {
            let input = live_input(prompt);
            let block = input.strip_prefix("Entities:\n").unwrap_or(input);
            let block = block.split("\n\nConversation:").next().unwrap_or("");
            let entities = parse_entity_list(block).map(|p| p.entities).unwrap_or_default();
            let names = |s: AffirmationStatus| {
                entities
                    .iter()
                    .filter(|e| e.status == s)
                    .map(|e| e.name.clone())
                    .collect::<Vec<_>>()
            };
            scripted_summary(
                &names(AffirmationStatus::Present),
                &names(AffirmationStatus::Absent),
                &names(AffirmationStatus::Unknown),
            )
        }
        PromptKind::Summarization => {
            let input = live_input(prompt);
            let (mut pos, mut neg, mut unk) = (vec![], vec![], vec![]);
            let lines: Vec<&str> = input.lines().collect();
            for pair in lines.windows(2) {
                if let (Some(q), Some(r)) = (QUESTION.captures(pair[0]), REPLY.captures(pair[1])) {
                    let name = q[1].to_string();
                    match &r[1] {
                        a if a.starts_with("Yes") => pos.push(name),
                        a if a.starts_with("No") => neg.push(name),
                        _ => unk.push(name),
                    }
                }
            }
            scripted_summary(&pos, &neg, &unk)
        }
        PromptKind::MetricExtraction => {
            let text = after_last(prompt, "Text:\n");
            let text = text.rsplit_once("\nConcepts:").map(|(t, _)| t).unwrap_or(text);
            let concepts = LexicalConceptExtractor.extract(text).unwrap();
            if concepts.is_empty() {
                "None".to_string()
            } else {
                concepts.join("\n")
            }
        }
        PromptKind::MetricVerification => {
            let body = after_last(prompt, "Target text:\n");
            let (target, rest) = body.split_once("\n\nConcepts:\n").unwrap();
            let concepts: Vec<String> = rest
                .lines()
                .take_while(|l| !l.starts_with("Answers:"))
                .filter_map(|l| l.split_once(". ").map(|(_, c)| c.to_string()))
                .collect();
            exact_match_verifier(&concepts, target)
                .iter()
                .enumerate()
                .map(|(i, f)| format!("{}. {}\n", i + 1, if *f { "yes" } else { "no" }))
                .collect()
        }
    })
}

pub fn scripted_backend() -> Arc<dyn CompletionBackend> {
    Arc::new(FnBackend(scripted_reply))
}

/// Scripted model for the paraphrase example: fixed extractions and a
/// verifier that knows which phrasings name the same concept.
pub fn paraphrase_client(log: Arc<Mutex<Vec<(PromptKind, f64)>>>) -> LlmClient {
    const SAME: [(&str, &str); 2] = [("covid", "covid-19"), ("pain in the back", "back pain")];
    LlmClient::new(Arc::new(FnBackend(move |req: &CompletionRequest| {
        log.lock().unwrap().push((req.kind, req.params.temperature));
        match req.kind {
            PromptKind::MetricExtraction if req.prompt.contains("Patient has back pain and COVID-19") => {
                Ok("back pain\nCOVID-19".into())
            }
            PromptKind::MetricExtraction => Ok("COVID\npain in the back".into()),
            PromptKind::MetricVerification => {
                let (target, concepts) = req
                    .prompt
                    .rsplit_once("Target text:\n")
                    .unwrap()
                    .1
                    .split_once("\n\nConcepts:\n")
                    .unwrap();
                let target = target.to_lowercase();
                Ok(concepts
                    .lines()
                    .filter_map(|l| l.split_once(". "))
                    .map(|(n, c)| {
                        let c = c.to_lowercase();
                        let hit = target.contains(&c)
                            || SAME
                                .iter()
                                .any(|(a, b)| (c == *a && target.contains(b)) || (c == *b && target.contains(a)));
                        format!("{n}. {}\n", if hit { "yes" } else { "no" })
                    })
                    .collect())
            }
            _ => Err(BackendError::Protocol("unexpected prompt kind".into())),
        }
    })))
}
