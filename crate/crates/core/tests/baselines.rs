mod common;

use atris_core::backend::{AgentRole, Rule, Script, ScriptResponse};
use atris_core::baselines::{aggregate_bon, run_direct, run_sequential_revision, run_weighted_bon, REPLY_GROUP};
use atris_core::conversation::IncidentKind;
use atris_core::demo::demo_script;
use atris_core::orchestrator::RunError;
use common::*;
use regex::Regex;
use serde_json::json;

#[test]
fn direct_has_no_evaluator_or_summarizer_calls() {
    let backend = demo(1.0);
    let turn = Turn::vault(config(5));
    let mut env = vault();
    let r = run_direct(&turn.ctx(&backend, 0), env.as_mut()).unwrap();
    assert!(r.attempts.is_empty());
    assert_eq!(r.ledger.role(AgentRole::SelfEval).api_calls, 0);
    assert_eq!(r.ledger.role(AgentRole::Summarizer).api_calls, 0);
    assert_eq!(r.final_state.blob, json!({"accounts": {"A": 70, "B": 30}}));
}

#[test]
fn bon_rejects_zero_candidates() {
    let backend = demo(1.0);
    let turn = Turn::vault(config(5));
    let mut env = vault();
    assert!(matches!(
        run_weighted_bon(&turn.ctx(&backend, 0), env.as_mut(), 0),
        Err(RunError::Precondition(_))
    ));
}

#[test]
fn bon_with_one_candidate_matches_direct_plus_scorer() {
    for seed in 0..10 {
        let backend = demo(0.5);
        let turn = Turn::vault(config(1));
        let mut env = vault();
        let bon = run_weighted_bon(&turn.ctx(&backend, seed), env.as_mut(), 1).unwrap();
        let steps = bon.final_trajectory.steps.len() as u64;
        assert_eq!(bon.ledger.role(AgentRole::Scorer).api_calls, steps + 1);
        assert_eq!(bon.ledger.role(AgentRole::Action).api_calls, steps + 1);
        assert_eq!(bon.candidates.len() as u64, steps + 1);
        assert!(bon.candidates.iter().all(|c| c.winner == 0));
    }
}

#[test]
fn bon_prefers_the_good_candidate_when_one_exists() {
    // With a perfect scorer the first step succeeds iff any candidate is good.
    let mut good_runs = 0;
    let mut any_good = 0;
    for seed in 0..40 {
        let backend = demo(0.3);
        let turn = Turn::vault(config(3));
        let mut env = vault();
        let r = run_weighted_bon(&turn.ctx(&backend, seed), env.as_mut(), 3).unwrap();
        let first = &r.candidates[0];
        let has_good = first.candidates.iter().any(|c| c.raw.contains("amount=30"));
        any_good += usize::from(has_good);
        let ok = r.final_state.blob == json!({"accounts": {"A": 70, "B": 30}});
        good_runs += usize::from(ok);
        assert_eq!(ok, has_good, "seed {seed}");
    }
    assert_eq!(good_runs, any_good);
    assert!(good_runs > 0 && good_runs < 40);
}

#[test]
fn bon_executes_only_the_winner() {
    let backend = demo(0.5);
    let turn = Turn::vault(config(4));
    let mut env = vault();
    let r = run_weighted_bon(&turn.ctx(&backend, 5), env.as_mut(), 4).unwrap();
    for (set, step) in r.candidates.iter().zip(&r.final_trajectory.steps) {
        assert_eq!(set.candidates.len(), 4);
        assert_eq!(Some(set.winner), aggregate_bon(&set.candidates));
        assert_eq!(set.candidates[set.winner].calls.as_ref(), Some(&step.calls));
    }
}

#[test]
fn unparseable_score_defaults_to_one() {
    let script = Script::new(
        0,
        vec![
            Rule::new(ScriptResponse::text("All done.")).role(AgentRole::Action),
            Rule::new(ScriptResponse::text("I like it a lot")).role(AgentRole::Scorer),
        ],
    );
    let backend = recording(script);
    let turn = Turn::vault(config(2));
    let mut env = vault();
    let r = run_weighted_bon(&turn.ctx(&backend, 0), env.as_mut(), 2).unwrap();
    assert!(r.candidates[0].candidates.iter().all(|c| c.score == 1));
    assert!(r.candidates[0].candidates.iter().all(|c| c.canonical == REPLY_GROUP));
    assert_eq!(
        r.incidents
            .iter()
            .filter(|i| i.kind == IncidentKind::MalformedScore)
            .count(),
        2
    );
    assert_eq!(r.final_trajectory.closing_reply.as_deref(), Some("All done."));
}

#[test]
fn seqrev_counts_and_hides_scores() {
    let score_re = Regex::new(r#""score"|score:\s*\d"#).unwrap();
    for n in [1, 2, 4] {
        let backend = demo(0.4);
        let turn = Turn::vault(config(n));
        let mut env = vault();
        let r = run_sequential_revision(&turn.ctx(&backend, 7), env.as_mut(), n).unwrap();
        assert!(!r.discarded);
        let decisions = r.candidates.len() as u64;
        assert_eq!(r.ledger.role(AgentRole::SelfEval).api_calls, n as u64 * decisions);
        for req in backend.requests_for(AgentRole::Action) {
            assert!(!score_re.is_match(&req.prompt_text()));
        }
        // Candidate k sees the suggestions of candidates < k.
        let prompts = user_prompts(&backend, AgentRole::Action);
        for set in &r.candidates {
            for (k, _) in set.candidates.iter().enumerate().skip(1) {
                let p = prompts
                    .iter()
                    .find(|p| p.matches("<Attempt>").count() == k)
                    .expect("revision prompt");
                for earlier in &set.candidates[..k] {
                    assert!(p.contains(earlier.suggestion.as_deref().unwrap()));
                }
            }
        }
    }
}

#[test]
fn seqrev_overflow_discards() {
    let backend = recording(demo_script(0.5, 1));
    let turn = Turn::vault(config(2));
    let mut cfg = turn.config.clone();
    cfg.context_cap_tokens = 40;
    let small = Turn { config: cfg, ..turn };
    let mut env = vault();
    let r = run_sequential_revision(&small.ctx(&backend, 7), env.as_mut(), 2).unwrap();
    assert!(r.discarded);
    assert!(r.final_trajectory.steps.is_empty());
}
