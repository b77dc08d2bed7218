//! Parsers for model completions and the canonical text forms they mirror.
//!
//! Entity lists use one entity per line, `- <name> (<status>)`. Summaries use
//! one header line per section; headers match case-insensitively with an
//! optional colon, optional `#` prefix, and optional `**`/`__` emphasis.

use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::model::{AffirmationStatus, EntityLedger, MedicalEntity, Section, StructuredSummary};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("completion contains no parseable entity line: {raw:?}")]
    NoEntities { raw: String },

    #[error("completion contains no recognizable section header: {raw:?}")]
    NoSections { raw: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityParse {
    pub entities: Vec<MedicalEntity>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SummaryParse {
    pub summary: StructuredSummary,
    pub warnings: Vec<String>,
}

static ENTITY_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^\s*(?:[-*•]|\d+[.)])?\s*(?P<name>.+?)\s*[(\[]\s*(?P<status>present|absent|unknown)\s*[)\]]\s*[.,;]?\s*$",
    )
    .unwrap()
});

fn block_header(status: AffirmationStatus) -> &'static str {
    match status {
        AffirmationStatus::Present => "Present entities:",
        AffirmationStatus::Absent => "Absent entities:",
        AffirmationStatus::Unknown => "Unknown entities:",
    }
}

fn is_block_header(line: &str) -> bool {
    AffirmationStatus::ALL
        .iter()
        .any(|s| line.eq_ignore_ascii_case(block_header(*s)))
}

/// Parses an entity-list completion.
///
/// Malformed lines are skipped and reported in `warnings`. Input whose only
/// content is malformed lines is a hard error: it usually means the model
/// ignored the output grammar. Block headers with nothing under them are an
/// empty list.
pub fn parse_entity_list(raw: &str) -> Result<EntityParse, ParseError> {
    let mut out = EntityParse::default();
    if raw.trim().is_empty() {
        out.warnings.push("empty completion: no entities".to_string());
        return Ok(out);
    }
    for (i, line) in raw.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || is_block_header(trimmed) {
            continue;
        }
        let Some(caps) = ENTITY_LINE.captures(trimmed) else {
            out.warnings
                .push(format!("line {}: unparseable entity line {trimmed:?}", i + 1));
            continue;
        };
        let status: AffirmationStatus = caps["status"].parse().expect("regex admits only valid statuses");
        match MedicalEntity::new(&caps["name"], status) {
            Ok(e) => out.entities.push(e),
            Err(e) => out.warnings.push(format!("line {}: {e}", i + 1)),
        }
    }
    if out.entities.is_empty() {
        if !out.warnings.is_empty() {
            return Err(ParseError::NoEntities { raw: raw.to_string() });
        }
        out.warnings.push("no entities listed".to_string());
    }
    Ok(out)
}

/// One `- <name> (<status>)` line per entity, in the given order.
pub fn serialize_entities<'a>(entities: impl IntoIterator<Item = &'a MedicalEntity>) -> String {
    entities
        .into_iter()
        .map(|e| format!("- {} ({})", e.name, e.status))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Present, absent, and unknown blocks, each sorted by name.
pub fn serialize_ledger(ledger: &EntityLedger) -> String {
    AffirmationStatus::ALL
        .iter()
        .map(|&status| {
            let mut names: Vec<_> = ledger.with_status(status).collect();
            names.sort_by(|a, b| a.name.cmp(&b.name));
            let body = serialize_entities(names);
            if body.is_empty() {
                block_header(status).to_string()
            } else {
                format!("{}\n{}", block_header(status), body)
            }
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

const SECTION_ALIASES: &[(&str, Section)] = &[
    (
        "demographics and social determinants of health",
        Section::DemographicsSdoh,
    ),
    ("medical intent", Section::MedicalIntent),
    ("patient intent", Section::MedicalIntent),
    ("pertinent positives", Section::PertinentPositives),
    ("pertinent negatives", Section::PertinentNegatives),
    ("pertinent unknowns", Section::PertinentUnknowns),
    ("medical history", Section::MedicalHistory),
];

fn strip_decoration(s: &str) -> &str {
    s.trim_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '_' | '#'))
}

fn lookup_section(candidate: &str) -> Option<Section> {
    let key = candidate
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    SECTION_ALIASES.iter().find(|(name, _)| *name == key).map(|(_, s)| *s)
}

/// Recognizes a header line; returns the section and any text that follows
/// the header on the same line.
fn match_header(line: &str) -> Option<(Section, &str)> {
    let trimmed = line.trim();
    if let Some(colon) = trimmed.find(':') {
        if let Some(section) = lookup_section(strip_decoration(&trimmed[..colon])) {
            // Closing emphasis may follow the colon, as in `**Header: **`.
            let rest = trimmed[colon + 1..].trim().trim_start_matches(['*', '_']).trim_start();
            return Some((section, rest));
        }
    }
    lookup_section(strip_decoration(trimmed)).map(|s| (s, ""))
}

/// Splits a completion into the six sections by header lines.
pub fn parse_summary(raw: &str) -> Result<SummaryParse, ParseError> {
    let mut bodies: [Option<Vec<&str>>; 6] = Default::default();
    let mut current: Option<Section> = None;
    let mut warnings = Vec::new();
    let mut preamble = false;

    for line in raw.lines() {
        if let Some((section, inline)) = match_header(line) {
            let body = &mut bodies[section as usize];
            match body {
                Some(lines) => {
                    warnings.push(format!(
                        "section `{section}` appears more than once; bodies concatenated"
                    ));
                    lines.push("");
                }
                None => *body = Some(Vec::new()),
            }
            if !inline.is_empty() {
                body.as_mut().expect("just set").push(inline);
            }
            current = Some(section);
        } else if let Some(section) = current {
            bodies[section as usize]
                .as_mut()
                .expect("current section exists")
                .push(line);
        } else if !line.trim().is_empty() {
            preamble = true;
        }
    }

    if bodies.iter().all(Option::is_none) {
        return Err(ParseError::NoSections { raw: raw.to_string() });
    }
    if preamble {
        warnings.push("text before the first section header was dropped".to_string());
    }
    let mut summary = StructuredSummary::new();
    for section in Section::ALL {
        match &bodies[section as usize] {
            Some(lines) => summary.set(section, &lines.join("\n")),
            None => warnings.push(format!("missing section `{section}`")),
        }
    }
    Ok(SummaryParse { summary, warnings })
}

/// Canonical text form: each header on its own line followed by its body.
pub fn render_summary(summary: &StructuredSummary) -> String {
    summary
        .iter()
        .map(|(section, body)| {
            if body.is_empty() {
                format!("{}:", section.title())
            } else {
                format!("{}:\n{}", section.title(), body)
            }
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Provenance;

    fn ent(name: &str, status: AffirmationStatus) -> MedicalEntity {
        MedicalEntity::new(name, status).unwrap()
    }

    #[test]
    fn parses_well_formed_lines() {
        let p = parse_entity_list("- back pain (present)\n- fever (absent)").unwrap();
        assert_eq!(
            p.entities,
            vec![
                ent("back pain", AffirmationStatus::Present),
                ent("fever", AffirmationStatus::Absent)
            ]
        );
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn status_is_case_insensitive() {
        let p = parse_entity_list("- vaginal discharge (Unknown)").unwrap();
        assert_eq!(p.entities, vec![ent("vaginal discharge", AffirmationStatus::Unknown)]);
    }

    #[test]
    fn degenerate_completion_is_a_hard_error() {
        let err = parse_entity_list("no entities mentioned").unwrap_err();
        assert_eq!(
            err,
            ParseError::NoEntities {
                raw: "no entities mentioned".into()
            }
        );
    }

    #[test]
    fn empty_completion_is_zero_entities_with_warning() {
        let p = parse_entity_list("  \n").unwrap();
        assert!(p.entities.is_empty());
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn malformed_lines_are_skipped_with_warnings() {
        let raw = "Here you go:\n- Back  Pain (PRESENT)\n- nausea\n* fever [absent].\n2) pain (lower back) (present)";
        let p = parse_entity_list(raw).unwrap();
        let names: Vec<_> = p.entities.iter().map(|e| (e.name.as_str(), e.status)).collect();
        assert_eq!(
            names,
            vec![
                ("back pain", AffirmationStatus::Present),
                ("fever", AffirmationStatus::Absent),
                ("pain (lower back)", AffirmationStatus::Present),
            ]
        );
        assert_eq!(p.warnings.len(), 2);
        assert!(p.warnings[0].starts_with("line 1"));
        assert!(p.warnings[1].starts_with("line 3"));
    }

    #[test]
    fn ledger_blocks_are_grouped_and_sorted() {
        let ledger = EntityLedger::try_from(vec![
            ent("fever", AffirmationStatus::Absent),
            ent("nausea", AffirmationStatus::Present),
            ent("back pain", AffirmationStatus::Present),
        ])
        .unwrap();
        assert_eq!(
            serialize_ledger(&ledger),
            "Present entities:\n- back pain (present)\n- nausea (present)\n\n\
             Absent entities:\n- fever (absent)\n\n\
             Unknown entities:"
        );
        assert_eq!(
            serialize_ledger(&EntityLedger::new()),
            "Present entities:\n\nAbsent entities:\n\nUnknown entities:"
        );
    }

    #[test]
    fn serialized_ledger_parses_back() {
        let ledger = EntityLedger::try_from(vec![
            ent("fever", AffirmationStatus::Absent).with_provenance(Provenance::Rfe),
            ent("cough", AffirmationStatus::Unknown),
        ])
        .unwrap();
        let p = parse_entity_list(&serialize_ledger(&ledger)).unwrap();
        assert!(p.warnings.is_empty());
        assert_eq!(p.entities.len(), 2);
    }

    const CHAT_A: &str = "**Demographics and Social Determinants of Health:**\nA 46 year old female.\n\n\
        **Patient Intent:**\nPatient came for UTI.\n\n\
        **Pertinent Positives:**\nPatient reports pain when urinating.\n\n\
        **Pertinent Unknowns**:\nPatient is unsure if her urine has any foul smell and if there is any vaginal discharge.\n\n\
        **Pertinent Negatives**:\nPatient reports no fever.\n\n\
        **Medical History**: Patient has a hysterectomy.";

    #[test]
    fn parses_bold_headers_with_alias() {
        let p = parse_summary(CHAT_A).unwrap();
        assert!(p.warnings.is_empty(), "{:?}", p.warnings);
        let s = &p.summary;
        assert_eq!(s.get(Section::DemographicsSdoh), "A 46 year old female.");
        assert_eq!(s.get(Section::MedicalIntent), "Patient came for UTI.");
        assert!(s.get(Section::PertinentUnknowns).contains("foul smell"));
        assert!(s.get(Section::PertinentUnknowns).contains("vaginal discharge"));
        assert_eq!(s.get(Section::MedicalHistory), "Patient has a hysterectomy.");
    }

    #[test]
    fn single_header_gives_five_warnings() {
        let p = parse_summary("Medical History:\nUTI six months ago").unwrap();
        assert_eq!(p.summary.get(Section::MedicalHistory), "UTI six months ago");
        assert_eq!(p.warnings.len(), 5);
        for section in Section::ALL.iter().filter(|s| **s != Section::MedicalHistory) {
            assert_eq!(p.summary.get(*section), "");
        }
    }

    #[test]
    fn no_header_is_a_hard_error() {
        assert!(matches!(
            parse_summary("just prose"),
            Err(ParseError::NoSections { .. })
        ));
        assert!(matches!(parse_summary(""), Err(ParseError::NoSections { .. })));
    }

    #[test]
    fn out_of_order_headers_assign_by_name() {
        let raw = "Medical History:\nh\nPertinent Negatives:\nn\nMedical Intent:\ni\n\
                   Pertinent Unknowns:\nu\nDemographics and Social Determinants of Health:\nd\nPertinent Positives:\np";
        let s = parse_summary(raw).unwrap().summary;
        let got: Vec<_> = s.iter().map(|(_, b)| b.to_string()).collect();
        assert_eq!(got, ["d", "i", "p", "n", "u", "h"]);
    }

    #[test]
    fn duplicate_sections_are_concatenated() {
        let p = parse_summary("Medical History:\na\nMedical History:\nb").unwrap();
        assert_eq!(p.summary.get(Section::MedicalHistory), "a\n\nb");
        assert!(p.warnings.iter().any(|w| w.contains("more than once")));
    }

    #[test]
    fn preamble_is_dropped_with_warning() {
        let p = parse_summary("Sure, here is the summary.\nMedical Intent: UTI").unwrap();
        assert_eq!(p.summary.get(Section::MedicalIntent), "UTI");
        assert!(p.warnings.iter().any(|w| w.contains("before the first")));
    }
}
