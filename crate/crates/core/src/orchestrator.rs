//! The per-turn loop: simulated attempts, self-evaluation, summarization,
//! and one committed execution against the real environment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{
    complete, AgentRole, BackendError, ChatBackend, ChatRequest, UsageLedger, CONTEXT_CAP_TOKENS, DEFAULT_MAX_TOKENS,
};
use crate::baselines::StepCandidates;
use crate::conversation::{
    render_call_list, AttemptRecord, EvaluationResult, Incident, IncidentKind, Message, ModelError, Step, Summary,
    ToolCall, ToolSpec, TurnHistory, Verdict,
};
use crate::environment::{EnvError, Environment, EnvironmentState};
use crate::parser::{parse_action_output, parse_evaluation, parse_summary, ActionOutput};
use crate::prompts::{
    estimate_messages, join_attempt_blocks, render_attempt_block, render_history, render_steps, render_tool_documents,
    PromptError, PromptLibrary, RenderedPrompt, TemplateName,
};
use crate::simulator::{simulate_total, Simulation, Simulator};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Environment(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Sequential,
    Parallel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub n_attempts: usize,
    pub mode: Mode,
    pub early_stop: bool,
    /// Self-evaluate attempts and show the feedback to later attempts.
    /// Off reproduces the "w/o Eval" ablation.
    pub include_eval_in_context: bool,
    /// Off reproduces the "w/o Sum" ablation: raw attempt blocks go straight
    /// into the final prompt.
    pub use_summarizer: bool,
    /// Also show simulated returns inside earlier attempts' Action blocks.
    pub outcomes_in_context: bool,
    pub step_cap: usize,
    pub context_cap_tokens: usize,
    pub max_tokens: u32,
    pub temperatures: BTreeMap<AgentRole, f64>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_attempts: 5,
            mode: Mode::Sequential,
            early_stop: true,
            include_eval_in_context: true,
            use_summarizer: true,
            outcomes_in_context: false,
            step_cap: 8,
            context_cap_tokens: CONTEXT_CAP_TOKENS,
            max_tokens: DEFAULT_MAX_TOKENS,
            temperatures: BTreeMap::new(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        if self.step_cap == 0 {
            return Err(RunError::InvalidConfig("step_cap must be at least 1".into()));
        }
        if self.context_cap_tokens == 0 {
            return Err(RunError::InvalidConfig("context_cap_tokens must be positive".into()));
        }
        for (role, t) in &self.temperatures {
            if !(0.0..=2.0).contains(t) {
                return Err(RunError::InvalidConfig(format!(
                    "temperature for {role} outside [0, 2]"
                )));
            }
        }
        Ok(())
    }

    pub fn temperature(&self, role: AgentRole) -> f64 {
        self.temperatures
            .get(&role)
            .copied()
            .unwrap_or_else(|| role.default_temperature())
    }
}

/// Deterministic 64-bit seed derived from a list of parts.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Seed component reserved for the committed execution.
pub const FINAL_SEED_TAG: u64 = u64::MAX;

/// Everything the loop needs to know about the current turn.
#[derive(Clone, Copy)]
pub struct TurnContext<'a> {
    pub backend: &'a dyn ChatBackend,
    pub prompts: &'a PromptLibrary,
    pub config: &'a RunConfig,
    pub tools: &'a [ToolSpec],
    /// Committed messages of earlier turns.
    pub history: &'a [Message],
    pub query: &'a str,
    pub seed: u64,
}

impl<'a> TurnContext<'a> {
    pub(crate) fn system_message(&self) -> Result<Message, RunError> {
        let functions = render_tool_documents(self.tools);
        let rendered = self
            .prompts
            .render(TemplateName::ActionSystem, &[("functions", &functions)])?;
        Ok(Message::system(rendered.system.unwrap_or_default()))
    }

    /// Conversation base for this turn: earlier turns plus the plain query.
    pub fn base(&self) -> Vec<Message> {
        let mut base = self.history.to_vec();
        base.push(Message::user(self.query));
        base
    }

    pub(crate) fn render_user(&self, template: TemplateName, bindings: &[(&str, &str)]) -> Result<String, RunError> {
        let mut all = vec![("query", self.query)];
        all.extend_from_slice(bindings);
        Ok(self.prompts.render(template, &all)?.user.unwrap_or_default())
    }

    pub(crate) fn action_user(&self, attempts: &str) -> Result<String, RunError> {
        self.render_user(TemplateName::ActionUser, &[("attempts", attempts)])
    }

    pub(crate) fn eval_prompt(&self, template: TemplateName, simulation: &str) -> Result<RenderedPrompt, RunError> {
        let tool_documents = render_tool_documents(self.tools);
        let history = render_history(&self.base());
        Ok(self.prompts.render(
            template,
            &[
                ("tool_documents", &tool_documents),
                ("history", &history),
                ("simulation", simulation),
            ],
        )?)
    }

    pub(crate) fn request(&self, messages: Vec<Message>, role: AgentRole, seed: u64) -> Result<ChatRequest, RunError> {
        Ok(ChatRequest::new(messages, self.config.temperature(role), self.config.max_tokens)?.with_seed(seed))
    }
}

/// The messages sent to the action agent at the next step.
pub(crate) fn action_messages(
    system: &Message,
    ctx: &TurnContext,
    user: &str,
    trajectory: &TurnHistory,
) -> Vec<Message> {
    let mut msgs = Vec::with_capacity(ctx.history.len() + 2 + trajectory.steps.len() * 2);
    msgs.push(system.clone());
    msgs.extend_from_slice(ctx.history);
    msgs.push(Message::user(user));
    msgs.extend(trajectory.step_messages());
    msgs
}

/// Result of driving the action agent until it replies or stops.
#[derive(Clone, Debug)]
pub(crate) struct Trajectory {
    pub history: TurnHistory,
    pub discarded: bool,
    pub step_capped: bool,
    pub incidents: Vec<Incident>,
}

/// Executes one batch of calls given the steps so far.
pub(crate) type Exec<'e> = dyn FnMut(&[ToolCall], &[Step], &mut UsageLedger) -> Simulation + 'e;

/// Drives the action agent with `user` as the turn's user message, sending
/// every batch of calls to `exec`.
pub(crate) fn drive(
    ctx: &TurnContext,
    user: &str,
    seed: u64,
    ledger: &mut UsageLedger,
    exec: &mut Exec<'_>,
) -> Result<Trajectory, RunError> {
    let system = ctx.system_message()?;
    let mut out = Trajectory {
        history: TurnHistory::new(ctx.base()),
        discarded: false,
        step_capped: false,
        incidents: Vec::new(),
    };
    loop {
        if out.history.steps.len() >= ctx.config.step_cap {
            out.step_capped = true;
            out.incidents.push(Incident::new(
                IncidentKind::StepCap,
                format!("stopped after {} steps", ctx.config.step_cap),
            ));
            break;
        }
        let messages = action_messages(&system, ctx, user, &out.history);
        let estimate = estimate_messages(&messages);
        if estimate > ctx.config.context_cap_tokens {
            out.discarded = true;
            out.incidents.push(Incident::new(
                IncidentKind::ContextOverflow,
                format!("estimated {estimate} tokens over cap {}", ctx.config.context_cap_tokens),
            ));
            break;
        }
        let request = ctx.request(messages, AgentRole::Action, seed)?;
        let response = match complete(ctx.backend, ledger, &request, AgentRole::Action) {
            Ok(r) => r,
            Err(BackendError::ContextOverflow(msg)) => {
                out.discarded = true;
                out.incidents.push(Incident::new(IncidentKind::ContextOverflow, msg));
                break;
            }
            Err(e) => return Err(e.into()),
        };
        match parse_action_output(&response.text) {
            Ok(ActionOutput::Calls(calls)) => {
                let sim = exec(&calls, &out.history.steps, ledger);
                out.incidents.extend(sim.incidents);
                let step = Step::new(calls, sim.outcome)?;
                out.history = out.history.with_step(step)?;
            }
            Ok(ActionOutput::NaturalReply(text)) => {
                out.history = out.history.close(text)?;
                break;
            }
            Err(e) => {
                out.incidents
                    .push(Incident::new(IncidentKind::MalformedAction, e.to_string()));
                out.history = out.history.close(response.text)?;
                break;
            }
        }
    }
    Ok(out)
}

/// The attempt's actions as shown inside an `<Action>` block.
pub fn render_attempt_action(trajectory: &TurnHistory, with_outcomes: bool) -> String {
    if with_outcomes {
        return render_steps(&trajectory.steps, trajectory.closing_reply.as_deref());
    }
    let mut lines: Vec<String> = trajectory.steps.iter().map(|s| render_call_list(&s.calls)).collect();
    if let Some(reply) = &trajectory.closing_reply {
        lines.push(reply.clone());
    }
    lines.join("\n")
}

/// Attempt blocks for the action agent's user prompt. Discarded attempts are
/// left out.
pub fn render_attempts_for_action(attempts: &[AttemptRecord], config: &RunConfig) -> String {
    let blocks: Vec<String> = attempts
        .iter()
        .filter(|a| !a.discarded)
        .map(|a| {
            let action = render_attempt_action(&a.trajectory, config.outcomes_in_context);
            let feedback = a
                .evaluation
                .as_ref()
                .filter(|_| config.include_eval_in_context)
                .map(|e| (e.rationale.as_str(), e.suggestion.as_deref().unwrap_or("")));
            render_attempt_block(&action, feedback)
        })
        .collect();
    join_attempt_blocks(&blocks)
}

/// Attempt blocks for the summarizer: full trajectories with returns, the
/// verdict, and the evaluation when present.
pub fn render_simulation_history(attempts: &[AttemptRecord]) -> String {
    let blocks: Vec<String> = attempts
        .iter()
        .filter(|a| !a.discarded)
        .map(|a| {
            let mut parts = vec![
                "<Attempt>".to_string(),
                format!(
                    "<Action>{}</Action>",
                    render_steps(&a.trajectory.steps, a.trajectory.closing_reply.as_deref())
                ),
            ];
            if let Some(e) = &a.evaluation {
                let verdict = if e.passed() { 1 } else { 0 };
                parts.push(format!("<Result>{verdict}</Result>"));
                parts.push(format!("<Evaluation>{}</Evaluation>", e.rationale));
                parts.push(format!(
                    "<Suggestion>{}</Suggestion>",
                    e.suggestion.as_deref().unwrap_or("")
                ));
            }
            parts.push("</Attempt>".to_string());
            parts.join("\n\n")
        })
        .collect();
    join_attempt_blocks(&blocks)
}

fn perfect_exec<'s>(
    sim: &'s dyn Simulator,
    base: &'s EnvironmentState,
) -> impl FnMut(&[ToolCall], &[Step], &mut UsageLedger) -> Simulation + 's {
    move |calls, history, ledger| simulate_total(sim, calls, base, history, ledger)
}

/// One simulated attempt. In parallel mode `prior` must be empty.
pub fn run_attempt(
    ctx: &TurnContext,
    sim: &dyn Simulator,
    base: &EnvironmentState,
    index: usize,
    prior: &[AttemptRecord],
    ledger: &mut UsageLedger,
) -> Result<AttemptRecord, RunError> {
    if ctx.config.mode == Mode::Parallel && !prior.is_empty() {
        return Err(RunError::Precondition(
            "parallel attempts must not see earlier attempts".into(),
        ));
    }
    let user = ctx.action_user(&render_attempts_for_action(prior, ctx.config))?;
    let seed = derive_seed(&[ctx.config.seed, ctx.seed, index as u64]);
    let mut exec = perfect_exec(sim, base);
    let t = drive(ctx, &user, seed, ledger, &mut exec)?;
    Ok(AttemptRecord {
        index,
        trajectory: t.history,
        evaluation: None,
        discarded: t.discarded,
        step_capped: t.step_capped,
        incidents: t.incidents,
    })
}

/// Task-level self-evaluation of one finished attempt: exactly one call.
pub fn evaluate_attempt(
    ctx: &TurnContext,
    attempt: &AttemptRecord,
    ledger: &mut UsageLedger,
) -> Result<(EvaluationResult, Option<Incident>), RunError> {
    let simulation = render_steps(&attempt.trajectory.steps, attempt.trajectory.closing_reply.as_deref());
    let prompt = ctx.eval_prompt(TemplateName::SelfEval, &simulation)?;
    let seed = derive_seed(&[ctx.config.seed, ctx.seed, attempt.index as u64, 1]);
    let request = ctx.request(prompt.to_messages(), AgentRole::SelfEval, seed)?;
    let response = complete(ctx.backend, ledger, &request, AgentRole::SelfEval)?;
    Ok(match parse_evaluation(&response.text) {
        Ok(e) => (e, None),
        Err(err) => (
            EvaluationResult::new(Verdict::Fail, response.text.clone(), Some(String::new()))?,
            Some(Incident::new(IncidentKind::MalformedEvaluation, err.to_string())),
        ),
    })
}

fn attach_evaluation(ctx: &TurnContext, attempt: &mut AttemptRecord, ledger: &mut UsageLedger) -> Result<(), RunError> {
    if attempt.discarded || !ctx.config.include_eval_in_context {
        return Ok(());
    }
    let (evaluation, incident) = evaluate_attempt(ctx, attempt, ledger)?;
    attempt.evaluation = Some(evaluation);
    attempt.incidents.extend(incident);
    Ok(())
}

/// Distills attempts into one recommendation. Returns `None` when nothing
/// usable came back.
pub fn summarize(
    ctx: &TurnContext,
    attempts: &[AttemptRecord],
    ledger: &mut UsageLedger,
) -> Result<(Option<Summary>, Option<Incident>), RunError> {
    if attempts.iter().all(|a| a.discarded) {
        return Ok((None, None));
    }
    if !ctx.config.use_summarizer {
        let blocks = render_attempts_for_action(attempts, ctx.config);
        return Ok((Some(Summary::new(blocks, "raw attempt blocks")?), None));
    }
    let tool_documents = render_tool_documents(ctx.tools);
    let history = render_history(&ctx.base());
    let simulations = render_simulation_history(attempts);
    let prompt = ctx.prompts.render(
        TemplateName::Summarizer,
        &[
            ("tool_documents", &tool_documents),
            ("history", &history),
            ("Simulation_history", &simulations),
        ],
    )?;
    let seed = derive_seed(&[ctx.config.seed, ctx.seed, 2]);
    let request = ctx.request(prompt.to_messages(), AgentRole::Summarizer, seed)?;
    let response = complete(ctx.backend, ledger, &request, AgentRole::Summarizer)?;
    Ok(match parse_summary(&response.text) {
        Ok(s) => (Some(s), None),
        Err(e) => {
            let incident = Incident::new(IncidentKind::MalformedSummary, e.to_string());
            let raw = response.text.trim();
            let fallback = (!raw.is_empty()).then(|| Summary::new(raw, "").expect("non-empty"));
            (fallback, Some(incident))
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub attempts: Vec<AttemptRecord>,
    pub summary: Option<Summary>,
    pub final_trajectory: TurnHistory,
    pub ledger: UsageLedger,
    pub discarded: bool,
    #[serde(default)]
    pub incidents: Vec<Incident>,
    /// Real environment state after the committed execution.
    pub final_state: EnvironmentState,
    /// Per-step candidates of the step-level baselines; empty otherwise.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<StepCandidates>,
}

impl TurnResult {
    /// The committed messages of this turn, fed to the next one.
    pub fn committed_messages(&self) -> Vec<Message> {
        self.final_trajectory.to_messages()
    }
}

fn generate_attempts(
    ctx: &TurnContext,
    sim: &dyn Simulator,
    base: &EnvironmentState,
    ledger: &mut UsageLedger,
) -> Result<Vec<AttemptRecord>, RunError> {
    let n = ctx.config.n_attempts;
    let mut attempts = Vec::with_capacity(n);
    match ctx.config.mode {
        Mode::Sequential => {
            for index in 1..=n {
                let mut attempt = run_attempt(ctx, sim, base, index, &attempts, ledger)?;
                let discarded = attempt.discarded;
                attach_evaluation(ctx, &mut attempt, ledger)?;
                let passed = attempt.passed();
                attempts.push(attempt);
                if discarded {
                    // Later prompts only grow, so they would overflow too.
                    break;
                }
                if passed && ctx.config.early_stop {
                    break;
                }
            }
        }
        Mode::Parallel => {
            let results: Vec<Result<(AttemptRecord, UsageLedger), RunError>> = std::thread::scope(|scope| {
                let handles: Vec<_> = (1..=n)
                    .map(|index| {
                        scope.spawn(move || {
                            let mut sub = UsageLedger::new();
                            run_attempt(ctx, sim, base, index, &[], &mut sub).map(|a| (a, sub))
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("attempt worker panicked"))
                    .collect()
            });
            for r in results {
                let (attempt, sub) = r?;
                ledger.absorb(&sub);
                attempts.push(attempt);
            }
            for attempt in &mut attempts {
                attach_evaluation(ctx, attempt, ledger)?;
            }
        }
    }
    Ok(attempts)
}

/// Executes one user turn: attempts, summary, and the committed execution.
pub fn run_turn(ctx: &TurnContext, env: &mut dyn Environment, sim: &dyn Simulator) -> Result<TurnResult, RunError> {
    ctx.config.validate()?;
    let base = env.snapshot();
    let mut ledger = UsageLedger::new();

    let attempts = generate_attempts(ctx, sim, &base, &mut ledger)?;
    let mut incidents = Vec::new();
    let summary = if attempts.is_empty() {
        None
    } else {
        let (summary, incident) = summarize(ctx, &attempts, &mut ledger)?;
        incidents.extend(incident);
        summary
    };

    let user = match &summary {
        None => ctx.query.to_string(),
        Some(s) if ctx.config.use_summarizer => {
            ctx.render_user(TemplateName::FinalUser, &[("recommendation", &s.recommendation)])?
        }
        Some(s) => ctx.action_user(&s.recommendation)?,
    };
    let seed = derive_seed(&[ctx.config.seed, ctx.seed, FINAL_SEED_TAG]);
    let mut exec = |calls: &[ToolCall], _: &[Step], _: &mut UsageLedger| Simulation {
        outcome: env.execute(calls),
        incidents: Vec::new(),
    };
    let committed = drive(ctx, &user, seed, &mut ledger, &mut exec)?;
    incidents.extend(committed.incidents);
    Ok(TurnResult {
        attempts,
        summary,
        final_trajectory: committed.history,
        ledger,
        discarded: committed.discarded,
        incidents,
        final_state: env.snapshot(),
        candidates: Vec::new(),
    })
}
