mod common;

use std::sync::{Arc, Mutex};

use proptest::prelude::*;

use medsum::backend::{
    BackendError, CompletionBackend, CompletionRequest, FnBackend, HashEmbedder, LlmClient, PromptKind,
    RecordingBackend, ReplayBackend,
};
use medsum::chain::{collate, pair_turns, ChainError, Pools, Stage, StageError, Trace};
use medsum::model::{ExampleKind, Method, Provenance, SelectionMode};
use medsum::promptkit::{serialize_ledger, PromptSet, TemplateName, TokenBudget};
use medsum::selection::{build_index, ExamplePool};
use medsum::{AffirmationStatus, ChainConfig, Encounter, EntityLedger, MedicalEntity, Pipeline};

use common::*;

struct Harness {
    client: LlmClient,
    embedder: HashEmbedder,
    prompts: PromptSet,
    pools: Pools,
}

impl Harness {
    fn new(transport: Arc<dyn CompletionBackend>) -> Self {
        Self::with_pools(transport, false)
    }

    fn with_pools(transport: Arc<dyn CompletionBackend>, indexed: bool) -> Self {
        let embedder = HashEmbedder::new(32);
        let examples = example_pool(8);
        let pool = |kind: ExampleKind| {
            let p = ExamplePool::new(kind, examples.iter().filter(|e| e.kind == kind).cloned().collect()).unwrap();
            if indexed {
                build_index(p, &embedder).unwrap()
            } else {
                p
            }
        };
        let pools = Pools {
            rfe: pool(ExampleKind::RfeExtraction),
            dialogue: pool(ExampleKind::DialogueExtraction),
            summarization: pool(ExampleKind::Summarization),
        };
        Self {
            client: LlmClient::new(transport),
            embedder,
            prompts: PromptSet::default(),
            pools,
        }
    }

    fn pipeline(&self) -> Pipeline<'_> {
        Pipeline::new(&self.client, &self.embedder, &self.prompts, &self.pools)
    }
}

fn kinds(trace: &[medsum::model::LlmCall]) -> Vec<PromptKind> {
    trace.iter().map(|c| c.prompt_kind).collect()
}

/// Whether the collated ledger (before resolution) has unknowns, computed by
/// running the extraction stages on their own.
fn resolver_fires(h: &Harness, enc: &Encounter, cfg: &ChainConfig) -> bool {
    let p = h.pipeline();
    let mut t = Trace::default();
    let mut lists = vec![p.extract_rfe_entities(enc, cfg, &mut t).unwrap()];
    for w in pair_turns(&enc.turns) {
        lists.push(p.extract_turn_entities(&w, enc, cfg, &mut t).unwrap());
    }
    cfg.resolver_enabled && collate(lists).with_status(AffirmationStatus::Unknown).next().is_some()
}

#[test]
fn trace_length_follows_the_call_formula() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.jsonl");
    let corpus = synthetic_corpus(8, 11);
    let cfg = ChainConfig::default();

    // Record once, then replay strictly.
    let recorder = Harness::new(Arc::new(RecordingBackend::create(&store, scripted_backend()).unwrap()));
    for enc in &corpus {
        recorder.pipeline().run_medsum_ent(enc, &cfg).unwrap();
        recorder.pipeline().run_naive_baseline(enc, &cfg).unwrap();
    }
    let replay = Harness::new(Arc::new(ReplayBackend::open(&store).unwrap()));

    let mut fired_any = (false, false);
    for enc in &corpus {
        let record = replay.pipeline().run_medsum_ent(enc, &cfg).unwrap();
        let windows = pair_turns(&enc.turns).len();
        let fired = resolver_fires(&replay, enc, &cfg);
        if fired {
            fired_any.0 = true;
        } else {
            fired_any.1 = true;
        }
        assert_eq!(
            record.llm_call_trace.len(),
            1 + windows + fired as usize + 1,
            "{}",
            enc.id
        );

        let mut expected = vec![PromptKind::RfeExtraction];
        expected.extend(std::iter::repeat_n(PromptKind::DialogueExtraction, windows));
        if fired {
            expected.push(PromptKind::UnknownResolver);
        }
        expected.push(PromptKind::Summarization);
        assert_eq!(kinds(&record.llm_call_trace), expected);

        let baseline = replay.pipeline().run_naive_baseline(enc, &cfg).unwrap();
        assert_eq!(kinds(&baseline.llm_call_trace), vec![PromptKind::Summarization]);
        assert!(baseline.ledger.is_empty());
    }
    assert!(fired_any.0 && fired_any.1, "corpus should exercise both resolver paths");
}

#[test]
fn resolver_off_never_calls_the_resolver() {
    let h = Harness::new(scripted_backend());
    let cfg = ChainConfig {
        resolver_enabled: false,
        ..Default::default()
    };
    for enc in synthetic_corpus(6, 3) {
        let record = h.pipeline().run_medsum_ent(&enc, &cfg).unwrap();
        assert!(!kinds(&record.llm_call_trace).contains(&PromptKind::UnknownResolver));
        assert_eq!(record.llm_call_trace.len(), pair_turns(&enc.turns).len() + 2);
        assert!(!record.config.resolver);
    }
}

#[test]
fn ledger_reflects_the_dialogue_and_resolution() {
    let h = Harness::new(scripted_backend());
    let enc = synthetic_encounter("e", 10, 5);
    let truth = enc.reference_summary.clone().unwrap();
    let record = h.pipeline().run_medsum_ent(&enc, &ChainConfig::default()).unwrap();
    for e in record.ledger.iter() {
        let section = match e.status {
            AffirmationStatus::Present => medsum::Section::PertinentPositives,
            AffirmationStatus::Absent => medsum::Section::PertinentNegatives,
            AffirmationStatus::Unknown => medsum::Section::PertinentUnknowns,
        };
        let resolved = e.provenance.contains(&Provenance::Resolver);
        if resolved {
            assert_eq!(scripted_resolution(&e.name), AffirmationStatus::Present);
            assert!(truth.get(medsum::Section::PertinentUnknowns).contains(&e.name));
        } else {
            assert!(truth.get(section).contains(&e.name), "{} {:?}", e.name, e.status);
        }
    }
}

#[test]
fn summarization_prompt_sees_unknowns_only_through_the_ledger() {
    let seen = Arc::new(Mutex::new(Vec::<CompletionRequest>::new()));
    let log = seen.clone();
    let backend = FnBackend(move |req: &CompletionRequest| {
        log.lock().unwrap().push(req.clone());
        scripted_reply(req)
    });
    let h = Harness::new(Arc::new(backend));
    let cfg = ChainConfig {
        resolver_enabled: false,
        summarization_k: 0,
        ..Default::default()
    };
    let enc = synthetic_encounter("e", 9, 21);
    let record = h.pipeline().run_medsum_ent(&enc, &cfg).unwrap();
    assert!(record.ledger.with_status(AffirmationStatus::Unknown).next().is_some());

    let expected = h
        .prompts
        .render(
            TemplateName::Summarization,
            &format!(
                "Entities:\n{}\n\nConversation:\n{}",
                serialize_ledger(&record.ledger),
                enc.dialogue_text()
            ),
            enc.age,
            &enc.sex,
            &[],
            &cfg.budget,
        )
        .unwrap();
    let requests = seen.lock().unwrap();
    let summarization: Vec<_> = requests
        .iter()
        .filter(|r| r.kind == PromptKind::Summarization)
        .collect();
    assert_eq!(summarization.len(), 1);
    assert_eq!(summarization[0].prompt, expected);
}

#[test]
fn identical_inputs_give_identical_records() {
    let corpus = synthetic_corpus(5, 8);
    for mode in [SelectionMode::Random, SelectionMode::Semantic] {
        let cfg = ChainConfig {
            seed: 99,
            selection_mode: mode,
            ..Default::default()
        };
        let run = || {
            let h = Harness::with_pools(scripted_backend(), true);
            h.pipeline()
                .run_corpus(Method::MedsumEnt, &corpus, &cfg, 3)
                .unwrap()
                .into_iter()
                .map(|r| serde_json::to_string(&r.unwrap()).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn run_seed_changes_random_examples() {
    let enc = synthetic_encounter("e", 4, 1);
    let h = Harness::new(scripted_backend());
    let hashes = |seed| {
        let cfg = ChainConfig {
            seed,
            ..Default::default()
        };
        let r = h.pipeline().run_medsum_ent(&enc, &cfg).unwrap();
        r.llm_call_trace.into_iter().map(|c| c.prompt_hash).collect::<Vec<_>>()
    };
    assert_eq!(hashes(1), hashes(1));
    assert_ne!(hashes(1), hashes(2));
}

#[test]
fn one_failing_encounter_does_not_stop_the_corpus() {
    let backend = FnBackend(|req: &CompletionRequest| {
        if req.kind == PromptKind::RfeExtraction && live_input(&req.prompt).contains("poison") {
            return Err(BackendError::Protocol("refused".into()));
        }
        scripted_reply(req)
    });
    let h = Harness::new(Arc::new(backend));
    let mut corpus = synthetic_corpus(4, 2);
    corpus[2].rfe = "poison".into();
    let results = h
        .pipeline()
        .run_corpus(Method::MedsumEnt, &corpus, &ChainConfig::default(), 2)
        .unwrap();
    assert_eq!(results.len(), 4);
    for (i, r) in results.iter().enumerate() {
        if i == 2 {
            match r {
                Err(ChainError::Stage {
                    encounter_id,
                    stage: Stage::RfeExtraction,
                    source: StageError::Backend(_),
                }) => assert_eq!(encounter_id, "enc-002"),
                other => panic!("{other:?}"),
            }
            assert!(r.as_ref().unwrap_err().is_backend());
        } else {
            assert_eq!(r.as_ref().unwrap().encounter_id, corpus[i].id);
        }
    }
}

#[test]
fn invalid_config_fails_before_any_call() {
    let calls = Arc::new(Mutex::new(0));
    let c = calls.clone();
    let backend = FnBackend(move |req: &CompletionRequest| {
        *c.lock().unwrap() += 1;
        scripted_reply(req)
    });
    let h = Harness::new(Arc::new(backend));
    let cfg = ChainConfig {
        summarization_k: 2,
        ..Default::default()
    };
    let enc = synthetic_encounter("e", 3, 0);
    assert!(matches!(
        h.pipeline().run_medsum_ent(&enc, &cfg),
        Err(ChainError::Config(_))
    ));
    assert!(matches!(
        h.pipeline().run_naive_baseline(&enc, &cfg),
        Err(ChainError::Config(_))
    ));
    assert_eq!(*calls.lock().unwrap(), 0);
}

#[test]
fn singleton_windows_yield_empty_completions_with_warnings() {
    let h = Harness::new(scripted_backend());
    let mut enc = synthetic_encounter("e", 2, 4);
    enc.turns.insert(
        0,
        medsum::model::Turn::new(medsum::model::Speaker::Doctor, "Hello there."),
    );
    let record = h.pipeline().run_medsum_ent(&enc, &ChainConfig::default()).unwrap();
    assert!(
        record.warnings.iter().any(|w| w.starts_with("turn-pair-0")),
        "{:?}",
        record.warnings
    );
}

#[test]
fn oversize_prompt_is_a_render_error() {
    let h = Harness::new(scripted_backend());
    let mut enc = synthetic_encounter("e", 2, 4);
    enc.rfe = "word ".repeat(4000);
    match h.pipeline().run_medsum_ent(&enc, &ChainConfig::default()) {
        Err(ChainError::Stage {
            stage: Stage::RfeExtraction,
            source: StageError::Render(_),
            ..
        }) => {}
        other => panic!("{other:?}"),
    }
    let tiny = ChainConfig {
        budget: TokenBudget {
            max_context_tokens: 300,
            inflation_factor: 1.3,
        },
        ..Default::default()
    };
    assert!(h
        .pipeline()
        .run_naive_baseline(&synthetic_encounter("f", 2, 4), &tiny)
        .is_err());
}

#[test]
fn resolver_parse_failure_fails_open_or_closed() {
    let backend = FnBackend(|req: &CompletionRequest| {
        if req.kind == PromptKind::UnknownResolver {
            return Ok("I cannot tell.".into());
        }
        scripted_reply(req)
    });
    let h = Harness::new(Arc::new(backend));
    let enc = (0..50)
        .map(|s| synthetic_encounter("e", 8, s))
        .find(|e| {
            !e.reference_summary
                .as_ref()
                .unwrap()
                .get(medsum::Section::PertinentUnknowns)
                .is_empty()
        })
        .unwrap();

    let open = h.pipeline().run_medsum_ent(&enc, &ChainConfig::default()).unwrap();
    assert!(open.warnings.iter().any(|w| w.starts_with("resolver:")));
    assert!(open
        .ledger
        .iter()
        .all(|e| !e.provenance.contains(&Provenance::Resolver)));

    let closed = ChainConfig {
        resolver_fail_closed: true,
        ..Default::default()
    };
    match h.pipeline().run_medsum_ent(&enc, &closed) {
        Err(ChainError::Stage {
            stage: Stage::Resolver,
            source: StageError::Parse(_),
            ..
        }) => {}
        other => panic!("{other:?}"),
    }
}

fn status_strategy() -> impl Strategy<Value = AffirmationStatus> {
    prop_oneof![
        Just(AffirmationStatus::Present),
        Just(AffirmationStatus::Absent),
        Just(AffirmationStatus::Unknown)
    ]
}

fn name_strategy() -> impl Strategy<Value = String> {
    prop::sample::select(SYMPTOMS.to_vec()).prop_map(str::to_string)
}

fn ledger_strategy() -> impl Strategy<Value = EntityLedger> {
    prop::collection::vec((name_strategy(), status_strategy(), 0usize..5), 0..12).prop_map(|items| {
        let mut ledger = EntityLedger::new();
        for (name, status, window) in items {
            let e = MedicalEntity::new(&name, status)
                .unwrap()
                .with_provenance(Provenance::TurnPair(window));
            let _ = ledger.push(e);
        }
        ledger
    })
}

/// Independent reading of the collation rule.
fn collate_oracle(lists: &[Vec<MedicalEntity>]) -> Vec<(String, AffirmationStatus, Vec<Provenance>)> {
    let mut order: Vec<String> = Vec::new();
    for e in lists.iter().flatten() {
        if !order.contains(&e.name) {
            order.push(e.name.clone());
        }
    }
    order
        .into_iter()
        .map(|name| {
            let mentions: Vec<&MedicalEntity> = lists.iter().flatten().filter(|e| e.name == name).collect();
            let status = mentions
                .iter()
                .rev()
                .find(|e| e.status.is_definite())
                .map(|e| e.status)
                .unwrap_or(AffirmationStatus::Unknown);
            let mut provenance = Vec::new();
            for p in mentions.iter().flat_map(|e| e.provenance.iter()) {
                if !provenance.contains(p) {
                    provenance.push(*p);
                }
            }
            (name, status, provenance)
        })
        .collect()
}

fn lists_strategy() -> impl Strategy<Value = Vec<Vec<MedicalEntity>>> {
    prop::collection::vec(prop::collection::vec((name_strategy(), status_strategy()), 0..5), 1..6).prop_map(|lists| {
        lists
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                l.into_iter()
                    .map(|(n, s)| {
                        MedicalEntity::new(&n, s)
                            .unwrap()
                            .with_provenance(Provenance::TurnPair(i))
                    })
                    .collect()
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn collate_matches_oracle(lists in lists_strategy()) {
        let got: Vec<_> = collate(lists.clone())
            .iter()
            .map(|e| (e.name.clone(), e.status, e.provenance.clone()))
            .collect();
        prop_assert_eq!(got, collate_oracle(&lists));
    }

    #[test]
    fn collate_with_itself_is_idempotent(lists in lists_strategy()) {
        let flat: Vec<MedicalEntity> = lists.into_iter().flatten().collect();
        let once = collate([flat.clone()]);
        let twice = collate([flat.clone(), flat]);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn resolver_touches_only_unknowns(
        ledger in ledger_strategy(),
        reply in prop::collection::vec((name_strategy(), status_strategy()), 0..8),
        enabled in any::<bool>(),
    ) {
        let text: String = reply.iter().map(|(n, s)| format!("- {n} ({s})\n")).collect();
        let h = Harness::new(Arc::new(FnBackend(move |_: &CompletionRequest| Ok(text.clone()))));
        let cfg = ChainConfig { resolver_enabled: enabled, ..Default::default() };
        let enc = synthetic_encounter("e", 2, 0);
        let mut trace = Trace::default();
        let out = h.pipeline().resolve_unknowns(&ledger, &enc, &cfg, &mut trace).unwrap();

        let fired = enabled && ledger.with_status(AffirmationStatus::Unknown).next().is_some();
        prop_assert_eq!(trace.calls.len(), fired as usize);
        if !enabled {
            prop_assert_eq!(&out, &ledger);
        }
        prop_assert_eq!(out.len(), ledger.len());
        for (before, after) in ledger.iter().zip(out.iter()) {
            prop_assert_eq!(&before.name, &after.name);
            if before.status != AffirmationStatus::Unknown {
                prop_assert_eq!(before, after);
            } else if before != after {
                prop_assert!(after.status.is_definite());
                prop_assert_eq!(after.provenance.last(), Some(&Provenance::Resolver));
            }
        }
    }
}
