//! Tool simulators: predict the outcome of a call batch given the turn's
//! initial state and the attempt's own earlier steps.
//!
//! * `PerfectSimulator` replays the history on a fresh clone of the base
//!   snapshot and executes the batch there.
//! * `LearnedSimulator` asks a model through the simulator prompt.
//! * `ScriptedSimulator` behaves like the perfect one but injects failures
//!   on a fixed schedule or at a seeded rate.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{complete, AgentRole, BackendError, ChatBackend, ChatRequest, UsageLedger, DEFAULT_MAX_TOKENS};
use crate::conversation::{
    error_payload, is_error_payload, render_call_list, Incident, IncidentKind, OutcomeTypeKey, Step, ToolCall,
    ToolOutcome,
};
use crate::environment::{self, EnvError, Environment, EnvironmentState};
use crate::parser::{parse_simulator_output, SimulatorParseError};
use crate::prompts::{render_steps, render_tool_documents, PromptError, PromptLibrary, TemplateName};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulatorKind {
    Perfect,
    Learned,
    Scripted,
}

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error(transparent)]
    Environment(#[from] EnvError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Parse(#[from] SimulatorParseError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// A simulated outcome plus anything that had to be repaired on the way.
#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    pub outcome: ToolOutcome,
    pub incidents: Vec<Incident>,
}

pub trait Simulator: Send + Sync {
    fn kind(&self) -> SimulatorKind;

    fn simulate(
        &self,
        calls: &[ToolCall],
        base: &EnvironmentState,
        history: &[Step],
        ledger: &mut UsageLedger,
    ) -> Result<Simulation, SimulationError>;
}

/// Error payloads for every call, used when simulation itself fails so the
/// attempt can continue.
pub fn degraded_outcome(env_id: &str, calls: &[ToolCall], error: &SimulationError) -> ToolOutcome {
    let message = format!("simulation failed: {error}");
    let payloads = calls.iter().map(|_| error_payload(message.clone())).collect();
    let types = calls
        .iter()
        .map(|c| OutcomeTypeKey::new(format!("{env_id}.{}", c.tool), OutcomeTypeKey::OTHER_FAILURE))
        .collect();
    ToolOutcome::new(payloads, types).expect("non-empty batch")
}

/// Runs the simulator, degrading failures into error payloads and an
/// incident instead of an error.
pub fn simulate_total(
    sim: &dyn Simulator,
    calls: &[ToolCall],
    base: &EnvironmentState,
    history: &[Step],
    ledger: &mut UsageLedger,
) -> Simulation {
    match sim.simulate(calls, base, history, ledger) {
        Ok(s) => s,
        Err(e) => {
            tracing::warn!(error = %e, "simulation failed; synthesizing error payloads");
            Simulation {
                outcome: degraded_outcome(&base.env_id, calls, &e),
                incidents: vec![Incident::new(IncidentKind::SimulatorFailure, e.to_string())],
            }
        }
    }
}

fn replay(base: &EnvironmentState, history: &[Step]) -> Result<Box<dyn Environment>, EnvError> {
    let mut env = environment::instantiate(base)?;
    for step in history {
        env.execute(&step.calls);
    }
    Ok(env)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PerfectSimulator;

impl Simulator for PerfectSimulator {
    fn kind(&self) -> SimulatorKind {
        SimulatorKind::Perfect
    }

    fn simulate(
        &self,
        calls: &[ToolCall],
        base: &EnvironmentState,
        history: &[Step],
        _ledger: &mut UsageLedger,
    ) -> Result<Simulation, SimulationError> {
        let mut shadow = replay(base, history)?;
        Ok(Simulation {
            outcome: shadow.execute(calls),
            incidents: Vec::new(),
        })
    }
}

pub struct LearnedSimulator {
    backend: Arc<dyn ChatBackend>,
    prompts: Arc<PromptLibrary>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl LearnedSimulator {
    pub fn new(backend: Arc<dyn ChatBackend>, prompts: Arc<PromptLibrary>) -> Self {
        LearnedSimulator {
            backend,
            prompts,
            temperature: AgentRole::Simulator.default_temperature(),
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

/// Renders the simulator prompt for one batch.
pub fn render_simulator_prompt(
    prompts: &PromptLibrary,
    env: &dyn Environment,
    base: &EnvironmentState,
    history: &[Step],
    calls: &[ToolCall],
) -> Result<crate::prompts::RenderedPrompt, PromptError> {
    let tool_documents = render_tool_documents(env.tools());
    let init_config = base.blob.to_string();
    let history = render_steps(history, None);
    let action = render_call_list(calls);
    prompts.render(
        TemplateName::Simulator,
        &[
            ("tool_documents", &tool_documents),
            ("init_config", &init_config),
            ("history", &history),
            ("action", &action),
        ],
    )
}

impl Simulator for LearnedSimulator {
    fn kind(&self) -> SimulatorKind {
        SimulatorKind::Learned
    }

    fn simulate(
        &self,
        calls: &[ToolCall],
        base: &EnvironmentState,
        history: &[Step],
        ledger: &mut UsageLedger,
    ) -> Result<Simulation, SimulationError> {
        let env = environment::instantiate(base)?;
        let prompt = render_simulator_prompt(&self.prompts, env.as_ref(), base, history, calls)?;
        let request = ChatRequest::new(prompt.to_messages(), self.temperature, self.max_tokens)?;
        let response = complete(self.backend.as_ref(), ledger, &request, AgentRole::Simulator)?;
        let parsed = parse_simulator_output(&response.text, calls.len())?;
        let mut incidents = Vec::new();
        if let Some(n) = parsed.returned {
            incidents.push(Incident::new(
                IncidentKind::PayloadCountMismatch,
                format!("simulator returned {n} payload(s) for {} call(s)", calls.len()),
            ));
        }
        // Learned payloads are free-form; only error-field presence is trusted.
        let types = calls
            .iter()
            .zip(&parsed.payloads)
            .map(|(c, p)| {
                let otype = if is_error_payload(p) {
                    OutcomeTypeKey::OTHER_FAILURE
                } else {
                    OutcomeTypeKey::SUCCESS
                };
                OutcomeTypeKey::new(format!("{}.{}", env.env_id(), c.tool), otype)
            })
            .collect();
        let outcome = ToolOutcome::new(parsed.payloads, types).expect("payload count repaired");
        Ok(Simulation { outcome, incidents })
    }
}

/// A scheduled failure: every call of the given 1-based step fails.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub step: usize,
    pub label: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedSimulator {
    #[serde(default)]
    pub faults: Vec<Fault>,
    /// Probability that an unscheduled call fails with `random_label`.
    #[serde(default)]
    pub fault_rate: f64,
    #[serde(default)]
    pub random_label: String,
    #[serde(default)]
    pub seed: u64,
}

impl ScriptedSimulator {
    pub fn with_faults(faults: Vec<Fault>) -> Self {
        ScriptedSimulator {
            faults,
            ..Default::default()
        }
    }

    fn rng(&self, base: &EnvironmentState, history: &[Step], calls: &[ToolCall]) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(base.fingerprint().as_bytes());
        for step in history {
            hasher.update(render_call_list(&step.calls).as_bytes());
            hasher.update([0]);
        }
        hasher.update(render_call_list(calls).as_bytes());
        ChaCha8Rng::from_seed(hasher.finalize().into())
    }
}

impl Simulator for ScriptedSimulator {
    fn kind(&self) -> SimulatorKind {
        SimulatorKind::Scripted
    }

    fn simulate(
        &self,
        calls: &[ToolCall],
        base: &EnvironmentState,
        history: &[Step],
        _ledger: &mut UsageLedger,
    ) -> Result<Simulation, SimulationError> {
        // Failed calls never mutate, so injected failures are skipped on replay.
        let mut shadow = environment::instantiate(base)?;
        for step in history {
            for (call, payload) in step.calls.iter().zip(&step.outcome.payloads) {
                if !is_error_payload(payload) {
                    shadow.execute_call(call);
                }
            }
        }
        let step_number = history.len() + 1;
        let scheduled = self.faults.iter().find(|f| f.step == step_number);
        let mut rng = self.rng(base, history, calls);
        let mut payloads: Vec<Value> = Vec::with_capacity(calls.len());
        let mut types = Vec::with_capacity(calls.len());
        for call in calls {
            let tool = format!("{}.{}", shadow.env_id(), call.tool);
            let injected = match scheduled {
                Some(f) => Some((f.label.clone(), f.message.clone())),
                None if self.fault_rate > 0.0 && rng.gen_bool(self.fault_rate.min(1.0)) => {
                    Some((self.random_label.clone(), format!("injected {}", self.random_label)))
                }
                None => None,
            };
            match injected {
                Some((label, message)) => {
                    payloads.push(error_payload(message));
                    types.push(OutcomeTypeKey::new(tool, label));
                }
                None => {
                    let payload = shadow.execute_call(call);
                    types.push(shadow.classify_outcome(call, &payload));
                    payloads.push(payload);
                }
            }
        }
        Ok(Simulation {
            outcome: ToolOutcome::new(payloads, types).expect("non-empty batch"),
            incidents: Vec::new(),
        })
    }
}
