mod common;

use atris_core::backend::{AgentRole, ChatBackend, Rule, Script, ScriptResponse, UsageLedger};
use atris_core::conversation::OutcomeTypeKey;
use atris_core::datagen::{
    audit_corpus, audit_instance, collect_episodes, compute_weights, elicit_targeted_failures, emit_sft, read_sft,
    sample_rebalanced, DatagenError, EpisodeQuery, OutcomeFrequencyTable,
};
use atris_core::demo::VAULT_QUERY;
use atris_core::orchestrator::RunConfig;
use atris_core::prompts::PromptLibrary;
use common::*;
use proptest::prelude::*;

fn vault_query() -> Vec<EpisodeQuery> {
    vec![EpisodeQuery {
        env_id: "vault".into(),
        initial_state: None,
        query: VAULT_QUERY.into(),
    }]
}

#[test]
fn good_agent_yields_only_successes() {
    let backend = demo(1.0);
    let c = collect_episodes(
        &vault_query(),
        &[&backend],
        &PromptLibrary::builtin(),
        &RunConfig::default(),
        0,
    )
    .unwrap();
    assert_eq!(c.instances.len(), 2);
    assert!(c.instances.iter().all(|i| i.key.is_success()));
    // The second call is conditioned on the first.
    assert_eq!(c.instances[1].history.len(), 1);
    assert_eq!(c.instances[1].history[0].calls, c.instances[0].action);
}

#[test]
fn overdrawing_agent_yields_insufficient_funds() {
    let backend = demo(0.0);
    let c = collect_episodes(
        &vault_query(),
        &[&backend],
        &PromptLibrary::builtin(),
        &RunConfig::default(),
        0,
    )
    .unwrap();
    assert!(c
        .instances
        .iter()
        .any(|i| i.key == OutcomeTypeKey::new("vault.transfer", "insufficient_funds")));
}

#[test]
fn backends_are_additive() {
    let good = demo(1.0);
    let bad = demo(0.0);
    let p = PromptLibrary::builtin();
    let cfg = RunConfig::default();
    let a = collect_episodes(&vault_query(), &[&good], &p, &cfg, 0)
        .unwrap()
        .instances;
    let b = collect_episodes(&vault_query(), &[&bad], &p, &cfg, 0)
        .unwrap()
        .instances;
    let both: Vec<&dyn ChatBackend> = vec![&good, &bad];
    let ab = collect_episodes(&vault_query(), &both, &p, &cfg, 0).unwrap().instances;
    assert_eq!(ab.len(), a.len() + b.len());
    assert_eq!(ab[..a.len()], a[..]);
    assert_eq!(ab[a.len()..], b[..]);
}

#[test]
fn unparseable_episode_records_incident() {
    let backend = recording(Script::new(
        0,
        vec![Rule::new(ScriptResponse::text("[broken(")).role(AgentRole::Action)],
    ));
    let c = collect_episodes(
        &vault_query(),
        &[&backend],
        &PromptLibrary::builtin(),
        &RunConfig::default(),
        0,
    )
    .unwrap();
    assert!(c.instances.is_empty());
    assert_eq!(c.incidents.len(), 1);
}

#[test]
fn elicitation_filters_by_label() {
    let backend = demo(0.5);
    let env = vault();
    let prompts = PromptLibrary::builtin();
    let mut ledger = UsageLedger::new();
    let hits = elicit_targeted_failures(
        env.as_ref(),
        "insufficient_funds",
        &backend,
        &prompts,
        1,
        0,
        &mut ledger,
    )
    .unwrap();
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].key, OutcomeTypeKey::new("vault.transfer", "insufficient_funds"));
    let prompt = user_prompts(&backend, AgentRole::Action).pop().unwrap();
    assert!(prompt.contains("insufficient_funds"));
    assert!(prompt.contains(env.implementation_notes()));

    let valid = recording(Script::new(
        0,
        vec![Rule::new(ScriptResponse::text(r#"[balance(account="A")]"#)).role(AgentRole::Action)],
    ));
    let none = elicit_targeted_failures(env.as_ref(), "unknown_account", &valid, &prompts, 3, 0, &mut ledger).unwrap();
    assert!(none.is_empty());

    let err = elicit_targeted_failures(env.as_ref(), "meteor_strike", &valid, &prompts, 1, 0, &mut ledger);
    assert!(matches!(err, Err(DatagenError::Precondition(_))));
}

#[test]
fn emission_roundtrip_and_audit() {
    let backend = demo(0.0);
    let good = demo(1.0);
    let both: Vec<&dyn ChatBackend> = vec![&good, &backend];
    let prompts = PromptLibrary::builtin();
    let c = collect_episodes(&vault_query(), &both, &prompts, &RunConfig::default(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let empty = dir.path().join("empty.jsonl");
    assert_eq!(emit_sft(&[], &prompts, &empty).unwrap(), 0);
    assert_eq!(std::fs::read_to_string(&empty).unwrap(), "");

    let path = dir.path().join("corpus.jsonl");
    assert_eq!(emit_sft(&c.instances, &prompts, &path).unwrap(), c.instances.len());
    let records = read_sft(&path).unwrap();
    assert_eq!(records.len(), c.instances.len());
    for (r, i) in records.iter().zip(&c.instances) {
        assert_eq!(r.key, i.key);
        assert_eq!(&r.instance, i);
        assert!(r.prompt.starts_with("You are a deterministic environment simulator"));
        assert_eq!(r.target, i.target_text());
    }
    let report = audit_corpus(&c.instances).unwrap();
    assert_eq!(report.checked, c.instances.len());
    assert!(report.failures.is_empty());

    let mut tampered = c.instances[0].clone();
    tampered.target = vec![serde_json::json!({"balance": 1})];
    assert!(!audit_instance(&tampered).unwrap());
}

#[test]
fn sampling_is_deterministic_and_checks_keys() {
    let backend = demo(0.0);
    let good = demo(1.0);
    let both: Vec<&dyn ChatBackend> = vec![&good, &backend];
    let c = collect_episodes(
        &vault_query(),
        &both,
        &PromptLibrary::builtin(),
        &RunConfig::default(),
        0,
    )
    .unwrap();
    let table = OutcomeFrequencyTable::from_instances(&c.instances);
    let a = sample_rebalanced(&c.instances, &table, 1, 42).unwrap();
    let b = sample_rebalanced(&c.instances, &table, 1, 42).unwrap();
    assert_eq!(a, b);
    assert!(sample_rebalanced(&c.instances, &table, 0, 42).is_err());
    let extra = OutcomeFrequencyTable::from_counts(
        table
            .counts()
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .chain([(OutcomeTypeKey::new("vault.deposit", "success"), 1)]),
    )
    .unwrap();
    // A key with weight but no instances is a table/instance mismatch.
    let err = sample_rebalanced(&c.instances, &extra, 1000, 1);
    assert!(matches!(err, Err(DatagenError::EmptyKey(_))));
}

proptest! {
    #[test]
    fn weights_normalize_and_decrease(counts in prop::collection::vec(1u64..10_000, 1..12)) {
        let table = OutcomeFrequencyTable::from_counts(
            counts.iter().enumerate().map(|(i, c)| (OutcomeTypeKey::new(format!("t{i}"), "x"), *c)),
        ).unwrap();
        let w = compute_weights(&table);
        let sum: f64 = w.values().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        let pairs: Vec<(u64, f64)> = table.counts().iter().map(|(k, c)| (*c, w[k])).collect();
        for (ca, wa) in &pairs {
            for (cb, wb) in &pairs {
                if ca < cb {
                    prop_assert!(wa > wb);
                }
            }
        }
    }
}
