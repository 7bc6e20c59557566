//! Step-level comparison methods: direct execution, weighted Best-of-N and
//! sequential revision. None of them simulate; each step's winner is
//! committed to the real environment immediately.

use serde::{Deserialize, Serialize};

use crate::backend::{complete, AgentRole, BackendError, UsageLedger};
use crate::conversation::{canonicalize_calls, render_call_list, Incident, IncidentKind, Step, ToolCall, TurnHistory};
use crate::environment::Environment;
use crate::orchestrator::{action_messages, derive_seed, run_turn, RunConfig, RunError, TurnContext, TurnResult};
use crate::parser::{parse_action_output, parse_score_report, ActionOutput};
use crate::prompts::{estimate_messages, join_attempt_blocks, render_attempt_block, render_steps, TemplateName};
use crate::simulator::PerfectSimulator;

/// Canonical group shared by every natural-language reply.
pub const REPLY_GROUP: &str = "<reply>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    /// The model's raw emission.
    pub raw: String,
    /// Parsed calls; `None` for a natural reply or unparseable output.
    pub calls: Option<Vec<ToolCall>>,
    pub canonical: String,
    pub score: u8,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestion: Option<String>,
}

/// All candidates considered for one committed step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCandidates {
    pub step: usize,
    pub candidates: Vec<ScoredCandidate>,
    pub winner: usize,
}

/// Groups `(canonical, score)` pairs, sums scores per group, and returns the
/// index of the first member of the heaviest group. Ties go to the group
/// that appears first.
pub fn aggregate_scores<S: AsRef<str>>(items: &[(S, u32)]) -> Option<usize> {
    let mut groups: Vec<(&str, usize, u64)> = Vec::new();
    for (i, (canonical, score)) in items.iter().enumerate() {
        let canonical = canonical.as_ref();
        match groups.iter_mut().find(|g| g.0 == canonical) {
            Some(g) => g.2 += u64::from(*score),
            None => groups.push((canonical, i, u64::from(*score))),
        }
    }
    let mut best: Option<(usize, u64)> = None;
    for (_, first, weight) in groups {
        if best.is_none_or(|(_, w)| weight > w) {
            best = Some((first, weight));
        }
    }
    best.map(|(i, _)| i)
}

pub fn aggregate_bon(candidates: &[ScoredCandidate]) -> Option<usize> {
    let items: Vec<(&str, u32)> = candidates
        .iter()
        .map(|c| (c.canonical.as_str(), u32::from(c.score)))
        .collect();
    aggregate_scores(&items)
}

/// N=0 ATRIS: one committed execution, no simulation.
pub fn run_direct(ctx: &TurnContext, env: &mut dyn Environment) -> Result<TurnResult, RunError> {
    let config = RunConfig {
        n_attempts: 0,
        ..ctx.config.clone()
    };
    let direct = TurnContext {
        config: &config,
        ..*ctx
    };
    run_turn(&direct, env, &PerfectSimulator)
}

struct Emission {
    raw: String,
    calls: Option<Vec<ToolCall>>,
    canonical: String,
    incident: Option<Incident>,
}

fn interpret(raw: String) -> Emission {
    match parse_action_output(&raw) {
        Ok(ActionOutput::Calls(calls)) => Emission {
            canonical: canonicalize_calls(&calls),
            calls: Some(calls),
            raw,
            incident: None,
        },
        Ok(ActionOutput::NaturalReply(_)) => Emission {
            raw,
            calls: None,
            canonical: REPLY_GROUP.into(),
            incident: None,
        },
        Err(e) => Emission {
            raw,
            calls: None,
            canonical: REPLY_GROUP.into(),
            incident: Some(Incident::new(IncidentKind::MalformedAction, e.to_string())),
        },
    }
}

/// The turn so far plus one candidate, as shown to a scoring prompt.
fn render_candidate(steps: &[Step], emission: &Emission) -> String {
    let mut text = if steps.is_empty() {
        String::new()
    } else {
        format!("{}\n", render_steps(steps, None))
    };
    match &emission.calls {
        Some(calls) => text.push_str(&format!("Action: {}", render_call_list(calls))),
        None => text.push_str(&format!("Reply: {}", emission.raw)),
    }
    text
}

/// Action text of a candidate inside a revision attempt block.
fn render_candidate_action(emission: &Emission) -> String {
    match &emission.calls {
        Some(calls) => render_call_list(calls),
        None => emission.raw.clone(),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Variant {
    WeightedBon,
    SequentialRevision,
}

struct StepState<'a> {
    ctx: &'a TurnContext<'a>,
    trajectory: TurnHistory,
    ledger: UsageLedger,
    incidents: Vec<Incident>,
    candidates: Vec<StepCandidates>,
    discarded: bool,
}

fn score(
    state: &mut StepState,
    template: TemplateName,
    emission: &Emission,
    seed: u64,
) -> Result<(u8, String, Option<String>), RunError> {
    let ctx = state.ctx;
    let simulation = render_candidate(&state.trajectory.steps, emission);
    let prompt = ctx.eval_prompt(template, &simulation)?;
    let role = match template {
        TemplateName::BonScorer => AgentRole::Scorer,
        _ => AgentRole::SelfEval,
    };
    let request = ctx.request(prompt.to_messages(), role, seed)?;
    let response = complete(ctx.backend, &mut state.ledger, &request, role)?;
    Ok(match parse_score_report(&response.text) {
        Ok(r) => (r.score, r.evaluation, r.suggestion),
        Err(e) => {
            state
                .incidents
                .push(Incident::new(IncidentKind::MalformedScore, e.to_string()));
            (1, response.text, None)
        }
    })
}

/// Generates one candidate; `None` when the prompt overflows.
fn generate(state: &mut StepState, user: &str, seed: u64) -> Result<Option<Emission>, RunError> {
    let ctx = state.ctx;
    let system = ctx.system_message()?;
    let messages = action_messages(&system, ctx, user, &state.trajectory);
    if estimate_messages(&messages) > ctx.config.context_cap_tokens {
        state.incidents.push(Incident::new(
            IncidentKind::ContextOverflow,
            "candidate prompt over cap",
        ));
        return Ok(None);
    }
    let request = ctx.request(messages, AgentRole::Action, seed)?;
    match complete(ctx.backend, &mut state.ledger, &request, AgentRole::Action) {
        Ok(r) => {
            let emission = interpret(r.text);
            state.incidents.extend(emission.incident.clone());
            Ok(Some(emission))
        }
        Err(BackendError::ContextOverflow(msg)) => {
            state.incidents.push(Incident::new(IncidentKind::ContextOverflow, msg));
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

fn run_stepwise(
    ctx: &TurnContext,
    env: &mut dyn Environment,
    n: usize,
    variant: Variant,
) -> Result<TurnResult, RunError> {
    ctx.config.validate()?;
    if n == 0 {
        return Err(RunError::Precondition("N must be at least 1".into()));
    }
    let mut state = StepState {
        ctx,
        trajectory: TurnHistory::new(ctx.base()),
        ledger: UsageLedger::new(),
        incidents: Vec::new(),
        candidates: Vec::new(),
        discarded: false,
    };
    'steps: while !state.trajectory.is_closed() {
        let step = state.trajectory.steps.len();
        if step >= ctx.config.step_cap {
            state.incidents.push(Incident::new(
                IncidentKind::StepCap,
                format!("stopped after {step} steps"),
            ));
            break;
        }
        let mut scored: Vec<ScoredCandidate> = Vec::with_capacity(n);
        let mut emissions: Vec<Emission> = Vec::with_capacity(n);
        for k in 0..n {
            let seed = derive_seed(&[ctx.config.seed, ctx.seed, step as u64, k as u64]);
            let user = match variant {
                Variant::WeightedBon => ctx.query.to_string(),
                Variant::SequentialRevision => {
                    let blocks: Vec<String> = emissions
                        .iter()
                        .zip(&scored)
                        .map(|(e, s)| {
                            render_attempt_block(
                                &render_candidate_action(e),
                                Some((&s.rationale, s.suggestion.as_deref().unwrap_or(""))),
                            )
                        })
                        .collect();
                    ctx.action_user(&join_attempt_blocks(&blocks))?
                }
            };
            let Some(emission) = generate(&mut state, &user, seed)? else {
                state.discarded = true;
                break 'steps;
            };
            let template = match variant {
                Variant::WeightedBon => TemplateName::BonScorer,
                Variant::SequentialRevision => TemplateName::SeqrevEval,
            };
            let score_seed = derive_seed(&[ctx.config.seed, ctx.seed, step as u64, k as u64, 1]);
            let (score, rationale, suggestion) = score(&mut state, template, &emission, score_seed)?;
            scored.push(ScoredCandidate {
                raw: emission.raw.clone(),
                calls: emission.calls.clone(),
                canonical: emission.canonical.clone(),
                score,
                rationale,
                suggestion,
            });
            emissions.push(emission);
        }
        let winner = aggregate_bon(&scored).expect("n >= 1 candidates");
        let chosen = &emissions[winner];
        match &chosen.calls {
            Some(calls) => {
                let outcome = env.execute(calls);
                let committed = Step::new(calls.clone(), outcome)?;
                state.trajectory = state.trajectory.with_step(committed)?;
            }
            None => {
                state.trajectory = state.trajectory.close(chosen.raw.clone())?;
            }
        }
        state.candidates.push(StepCandidates {
            step,
            candidates: scored,
            winner,
        });
    }
    Ok(TurnResult {
        attempts: Vec::new(),
        summary: None,
        final_trajectory: state.trajectory,
        ledger: state.ledger,
        discarded: state.discarded,
        incidents: state.incidents,
        final_state: env.snapshot(),
        candidates: state.candidates,
    })
}

/// Per step: N independent candidates, one scorer call each, execute the
/// heaviest canonical group.
pub fn run_weighted_bon(ctx: &TurnContext, env: &mut dyn Environment, n: usize) -> Result<TurnResult, RunError> {
    run_stepwise(ctx, env, n, Variant::WeightedBon)
}

/// Per step: N candidates in sequence, each seeing earlier candidates'
/// evaluation and suggestion (never their score).
pub fn run_sequential_revision(ctx: &TurnContext, env: &mut dyn Environment, n: usize) -> Result<TurnResult, RunError> {
    run_stepwise(ctx, env, n, Variant::SequentialRevision)
}
