mod common;

use std::collections::HashMap;

use atris_core::backend::{AgentRole, Usage, UsageLedger};
use atris_core::demo::vault_tasks;
use atris_core::metrics::{
    accuracy_report, cosine, fidelity_from_similarities, fidelity_pairs, fidelity_report, ledger_report, score_task,
    similarity, tokenize, HashedBagEmbedder, ScoreReason, HF_THRESHOLD,
};
use atris_core::orchestrator::RunConfig;
use atris_core::prompts::PromptLibrary;
use atris_core::simulator::{PerfectSimulator, ScriptedSimulator};
use atris_core::task::{Method, Runner};
use common::*;
use proptest::prelude::*;

/// Cosine over exact token bags, with no hashing.
fn oracle_cosine(a: &str, b: &str) -> f64 {
    let bag = |t: &str| {
        let mut m: HashMap<String, f64> = HashMap::new();
        for tok in t.split(|c: char| !c.is_alphanumeric()).filter(|s| !s.is_empty()) {
            *m.entry(tok.to_lowercase()).or_default() += 1.0;
        }
        m
    };
    let (x, y) = (bag(a), bag(b));
    let dot: f64 = x.iter().map(|(k, v)| v * y.get(k).copied().unwrap_or(0.0)).sum();
    let n = |m: &HashMap<String, f64>| m.values().map(|v| v * v).sum::<f64>().sqrt();
    if n(&x) == 0.0 || n(&y) == 0.0 {
        0.0
    } else {
        dot / (n(&x) * n(&y))
    }
}

#[test]
fn similarity_examples() {
    let e = HashedBagEmbedder::default();
    assert!((similarity("transfer ok", "transfer ok", &e).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(similarity("alpha beta", "gamma delta", &e).unwrap(), 0.0);
    let (a, b) = ("transfer ok 70", "transfer ok 71");
    let buckets: Vec<usize> = tokenize(&format!("{a} {b}")).iter().map(|t| e.bucket(t)).collect();
    assert_eq!(
        buckets[2..4].iter().filter(|&&x| x == buckets[2]).count(),
        1,
        "no collision between 70 and 71"
    );
    let got = similarity(a, b, &e).unwrap();
    assert!((got - oracle_cosine(a, b)).abs() < 1e-9);
    assert!((got - 2.0 / 3.0).abs() < 1e-9);
}

#[test]
fn constructed_similarities_hit_half() {
    let r = fidelity_from_similarities(&[1.0, 0.96, 0.95, 0.2], HF_THRESHOLD).unwrap();
    assert_eq!(r.hf_ratio, 0.5);
    assert_eq!(r.threshold, 0.95);
}

#[test]
fn identical_pairs_report_one() {
    let pairs = vec![("a b c".to_string(), "a b c".to_string()); 3];
    let r = fidelity_report(&pairs, &HashedBagEmbedder::default()).unwrap();
    assert_eq!((r.pairs, r.mean_similarity, r.hf_ratio), (3, 1.0, 1.0));
    let empty: Vec<(String, String)> = Vec::new();
    assert!(fidelity_report(&empty, &HashedBagEmbedder::default()).is_err());
}

#[test]
fn fault_free_scripted_simulator_is_high_fidelity() {
    let env = vault();
    let steps = vec![
        calls(r#"[transfer(src="A", dst="B", amount=30)]"#),
        calls(r#"[balance(account="A"), balance(account="B")]"#),
        calls(r#"[withdraw(account="B", amount=100)]"#),
    ];
    let mut ledger = UsageLedger::new();
    let same = fidelity_pairs(&PerfectSimulator, &env.snapshot(), &steps, &mut ledger).unwrap();
    assert!(same.iter().all(|p| p.candidate == p.perfect));
    let faulty = ScriptedSimulator {
        fault_rate: 1.0,
        random_label: "invalid_amount".into(),
        ..Default::default()
    };
    let pairs = fidelity_pairs(&faulty, &env.snapshot(), &steps, &mut ledger).unwrap();
    let texts: Vec<(String, String)> = pairs.into_iter().map(|p| (p.candidate, p.perfect)).collect();
    let r = fidelity_report(&texts, &HashedBagEmbedder::default()).unwrap();
    assert!(r.hf_ratio < 1.0);
}

#[test]
fn task_scoring_reasons() {
    let backend = demo(1.0);
    let prompts = PromptLibrary::builtin();
    let config = RunConfig::default();
    let runner = Runner {
        backend: &backend,
        prompts: &prompts,
        config: &config,
        simulator: &PerfectSimulator,
    };
    let mut task = vault_tasks(1).remove(0);
    let run = runner.run_task(&task, Method::AtrisSeq, 1).unwrap();
    assert_eq!(score_task(&task, &run).unwrap().reason, ScoreReason::StateMatch);

    task.expectation
        .as_mut()
        .unwrap()
        .milestones
        .push(r#"open_account(name="C")"#.into());
    let s = score_task(&task, &run).unwrap();
    assert!(!s.success);
    assert_eq!(s.reason, ScoreReason::Mismatch);

    task.expectation.as_mut().unwrap().final_state = None;
    task.expectation.as_mut().unwrap().milestones.pop();
    assert_eq!(score_task(&task, &run).unwrap().reason, ScoreReason::MilestoneMatch);

    let mut discarded = run.clone();
    discarded.discarded = true;
    let s = score_task(&task, &discarded).unwrap();
    assert_eq!((s.success, s.reason), (false, ScoreReason::Discarded));

    task.expectation = None;
    assert!(score_task(&task, &run).is_err());
}

#[test]
fn ledger_report_conserves_counters() {
    let mut entries = Vec::new();
    for i in 0..9u64 {
        let mut l = UsageLedger::new();
        l.record(
            AgentRole::Action,
            Usage {
                prompt_tokens: 10 + i,
                completion_tokens: i,
            },
        );
        if i % 2 == 0 {
            l.record(
                AgentRole::SelfEval,
                Usage {
                    prompt_tokens: 5,
                    completion_tokens: 1,
                },
            );
        }
        entries.push((
            if i % 3 == 0 { Method::Direct } else { Method::AtrisSeq },
            (i % 2) as usize,
            l,
        ));
    }
    let rows = ledger_report(entries.iter().map(|(m, n, l)| (*m, *n, l)));
    let mut all = UsageLedger::new();
    for (_, _, l) in &entries {
        all.absorb(l);
    }
    let sum = |f: fn(&atris_core::metrics::LedgerRow) -> u64| rows.iter().map(f).sum::<u64>();
    assert_eq!(sum(|r| r.total.api_calls), all.total().api_calls);
    assert_eq!(sum(|r| r.total.prompt_tokens), all.total().prompt_tokens);
    assert_eq!(sum(|r| r.total.completion_tokens), all.total().completion_tokens);
    assert_eq!(sum(|r| r.self_eval.api_calls), all.role(AgentRole::SelfEval).api_calls);
    assert_eq!(rows.iter().map(|r| r.runs).sum::<usize>(), 9);
}

#[test]
fn direct_run_has_zero_eval_columns() {
    let backend = demo(1.0);
    let prompts = PromptLibrary::builtin();
    let config = RunConfig::default();
    let runner = Runner {
        backend: &backend,
        prompts: &prompts,
        config: &config,
        simulator: &PerfectSimulator,
    };
    let task = vault_tasks(1).remove(0);
    let run = runner.run_task(&task, Method::Direct, 0).unwrap();
    let rows = ledger_report([(run.method, run.n, &run.ledger)]);
    assert_eq!(rows[0].self_eval, Default::default());
    let acc = accuracy_report(&[(run.method, run.n, score_task(&task, &run).unwrap())]);
    assert_eq!(acc[0].accuracy, 1.0);
}

proptest! {
    #[test]
    fn cosine_symmetric_and_scale_invariant(
        a in prop::collection::vec(-5.0f64..5.0, 8),
        b in prop::collection::vec(-5.0f64..5.0, 8),
        s in 0.1f64..100.0,
    ) {
        let ab = cosine(&a, &b);
        prop_assert!((ab - cosine(&b, &a)).abs() < 1e-12);
        let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
        prop_assert!((ab - cosine(&scaled, &b)).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&ab));
        if a.iter().any(|x| *x != 0.0) {
            prop_assert!((cosine(&a, &a) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hf_ratio_monotone_in_threshold(
        sims in prop::collection::vec(0.0f64..=1.0, 1..30),
        t1 in 0.0f64..1.0,
        t2 in 0.0f64..1.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = fidelity_from_similarities(&sims, lo).unwrap();
        let b = fidelity_from_similarities(&sims, hi).unwrap();
        prop_assert!(a.hf_ratio >= b.hf_ratio);
    }

    #[test]
    fn text_similarity_symmetric(a in "[a-z ]{0,30}", b in "[a-z ]{0,30}") {
        let e = HashedBagEmbedder::default();
        prop_assert!((similarity(&a, &b, &e).unwrap() - similarity(&b, &a, &e).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn identical_texts_score_one(a in ".{0,40}") {
        prop_assert_eq!(similarity(&a, &a, &HashedBagEmbedder::default()).unwrap(), 1.0);
    }
}
