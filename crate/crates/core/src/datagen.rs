//! Simulator training data from real executions.
//!
//! Episodes are run against real environments and split into one instance
//! per executed call, conditioned on the initial state and every earlier
//! call of the same episode. Rare outcome types are upsampled by inverse
//! frequency before the corpus is written out as JSON lines.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{complete, AgentRole, ChatBackend, ChatRequest, UsageLedger};
use crate::baselines::run_direct;
use crate::conversation::{Incident, IncidentKind, OutcomeTypeKey, Step, ToolCall, ToolOutcome};
use crate::environment::{self, EnvError, Environment, EnvironmentState};
use crate::orchestrator::{derive_seed, RunConfig, RunError, TurnContext};
use crate::parser::{parse_action_output, ActionOutput};
use crate::prompts::{render_tool_documents, PromptError, PromptLibrary, TemplateName};
use crate::simulator::render_simulator_prompt;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("key {0} was selected but has no instances")]
    EmptyKey(OutcomeTypeKey),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Environment(#[from] EnvError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RealExecution,
}

/// One ground-truth (state, history, action, outcome) example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftInstance {
    pub tool_documents: String,
    pub init_state: EnvironmentState,
    /// Earlier calls of the same episode, one call per step.
    pub history: Vec<Step>,
    pub action: Vec<ToolCall>,
    pub target: Vec<Value>,
    pub key: OutcomeTypeKey,
    pub provenance: Provenance,
}

impl SftInstance {
    pub fn target_text(&self) -> String {
        Value::Array(self.target.clone()).to_string()
    }
}

/// Splits executed batches into single-call instances. `init` is the state
/// before the first batch.
pub fn instances_from_steps(env: &dyn Environment, init: &EnvironmentState, steps: &[Step]) -> Vec<SftInstance> {
    let tool_documents = render_tool_documents(env.tools());
    let mut history: Vec<Step> = Vec::new();
    let mut out = Vec::new();
    for step in steps {
        for (i, call) in step.calls.iter().enumerate() {
            let payload = step.outcome.payloads[i].clone();
            let key = step.outcome.outcome_types[i].clone();
            out.push(SftInstance {
                tool_documents: tool_documents.clone(),
                init_state: init.clone(),
                history: history.clone(),
                action: vec![call.clone()],
                target: vec![payload.clone()],
                key: key.clone(),
                provenance: Provenance::RealExecution,
            });
            let single = ToolOutcome::new(vec![payload], vec![key]).expect("one payload");
            history.push(Step::new(vec![call.clone()], single).expect("one call"));
        }
    }
    out
}

/// A query to run against a fresh environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeQuery {
    pub env_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Value>,
    pub query: String,
}

#[derive(Debug, Default)]
pub struct Collected {
    pub instances: Vec<SftInstance>,
    pub incidents: Vec<Incident>,
    pub ledger: UsageLedger,
}

/// Runs every (query, backend) pair as a direct episode on the real
/// environment and records each executed call.
pub fn collect_episodes(
    queries: &[EpisodeQuery],
    backends: &[&dyn ChatBackend],
    prompts: &PromptLibrary,
    config: &RunConfig,
    seed: u64,
) -> Result<Collected, DatagenError> {
    let mut out = Collected::default();
    for (qi, q) in queries.iter().enumerate() {
        for (bi, backend) in backends.iter().enumerate() {
            let mut env = environment::create(&q.env_id, q.initial_state.as_ref())?;
            let init = env.snapshot();
            let tools = env.tools().to_vec();
            let ctx = TurnContext {
                backend: *backend,
                prompts,
                config,
                tools: &tools,
                history: &[],
                query: &q.query,
                seed: derive_seed(&[seed, qi as u64, bi as u64]),
            };
            let result = run_direct(&ctx, env.as_mut())?;
            out.ledger.absorb(&result.ledger);
            let steps = &result.final_trajectory.steps;
            if steps.is_empty() && result.incidents.iter().any(|i| i.kind == IncidentKind::MalformedAction) {
                out.incidents.push(Incident::new(
                    IncidentKind::MalformedAction,
                    format!("query {qi} backend {bi}: agent output never parsed"),
                ));
                continue;
            }
            out.instances.extend(instances_from_steps(env.as_ref(), &init, steps));
        }
    }
    Ok(out)
}

/// Prompts `backend` for calls that should trigger `failure_label`, executes
/// them from the environment's current state, and keeps the instances whose
/// outcome carries that label. Makes `tries` requests with distinct seeds.
pub fn elicit_targeted_failures(
    env: &dyn Environment,
    failure_label: &str,
    backend: &dyn ChatBackend,
    prompts: &PromptLibrary,
    tries: usize,
    seed: u64,
    ledger: &mut UsageLedger,
) -> Result<Vec<SftInstance>, DatagenError> {
    if !env.failure_labels().contains(&failure_label) {
        return Err(DatagenError::Precondition(format!(
            "`{failure_label}` is not a documented failure label of {}",
            env.env_id()
        )));
    }
    let init = env.snapshot();
    let tool_documents = render_tool_documents(env.tools());
    let init_config = init.blob.to_string();
    let prompt = prompts.render(
        TemplateName::ElicitFailure,
        &[
            ("tool_documents", &tool_documents),
            ("implementation_notes", env.implementation_notes()),
            ("init_config", &init_config),
            ("target_label", failure_label),
        ],
    )?;
    let mut kept = Vec::new();
    for t in 0..tries {
        let request = ChatRequest::new(prompt.to_messages(), AgentRole::Action.default_temperature(), 1024)
            .map_err(RunError::from)?
            .with_seed(derive_seed(&[seed, t as u64]));
        let response = complete(backend, ledger, &request, AgentRole::Action).map_err(RunError::from)?;
        let Ok(ActionOutput::Calls(calls)) = parse_action_output(&response.text) else {
            continue;
        };
        let mut shadow = environment::instantiate(&init)?;
        let outcome = shadow.execute(&calls);
        let step = Step::new(calls, outcome).map_err(RunError::from)?;
        kept.extend(
            instances_from_steps(env, &init, &[step])
                .into_iter()
                .filter(|i| i.key.otype == failure_label),
        );
    }
    Ok(kept)
}

/// Observed outcome-type counts; every key has count at least 1.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OutcomeFrequencyTable {
    counts: BTreeMap<OutcomeTypeKey, u64>,
}

impl OutcomeFrequencyTable {
    pub fn from_instances(instances: &[SftInstance]) -> Self {
        let mut table = Self::default();
        for i in instances {
            *table.counts.entry(i.key.clone()).or_default() += 1;
        }
        table
    }

    /// Builds a table from explicit counts; zero counts are rejected.
    pub fn from_counts(counts: impl IntoIterator<Item = (OutcomeTypeKey, u64)>) -> Result<Self, DatagenError> {
        let mut table = Self::default();
        for (k, c) in counts {
            if c == 0 {
                return Err(DatagenError::Precondition(format!("count for {k} must be positive")));
            }
            *table.counts.entry(k).or_default() += c;
        }
        Ok(table)
    }

    /// Adds one to every documented key, so unseen failure types appear.
    pub fn smoothed(&self, documented: &[OutcomeTypeKey]) -> Self {
        let mut table = self.clone();
        for k in documented {
            *table.counts.entry(k.clone()).or_default() += 1;
        }
        table
    }

    pub fn counts(&self) -> &BTreeMap<OutcomeTypeKey, u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Every (tool, success | documented label) key of an environment.
pub fn documented_keys(env: &dyn Environment) -> Vec<OutcomeTypeKey> {
    let mut keys = Vec::new();
    for tool in env.tools() {
        let name = format!("{}.{}", env.env_id(), tool.name);
        keys.push(OutcomeTypeKey::new(name.clone(), OutcomeTypeKey::SUCCESS));
        for label in env.failure_labels() {
            keys.push(OutcomeTypeKey::new(name.clone(), *label));
        }
    }
    keys
}

/// Inverse-frequency weights normalized to sum to 1.
pub fn compute_weights(table: &OutcomeFrequencyTable) -> BTreeMap<OutcomeTypeKey, f64> {
    let inverse: Vec<(OutcomeTypeKey, f64)> = table.counts.iter().map(|(k, &c)| (k.clone(), 1.0 / c as f64)).collect();
    let norm: f64 = inverse.iter().map(|(_, w)| w).sum();
    inverse.into_iter().map(|(k, w)| (k, w / norm)).collect()
}

/// Draws `k` instances with replacement, each instance weighted by the
/// weight of its key. With a table built from the same instances every key
/// ends up equally likely.
pub fn sample_rebalanced(
    instances: &[SftInstance],
    table: &OutcomeFrequencyTable,
    k: usize,
    seed: u64,
) -> Result<Vec<SftInstance>, DatagenError> {
    if k == 0 {
        return Err(DatagenError::Precondition("k must be at least 1".into()));
    }
    for inst in instances {
        if !table.counts.contains_key(&inst.key) {
            return Err(DatagenError::Precondition(format!(
                "instance key {} missing from table",
                inst.key
            )));
        }
    }
    let weights = compute_weights(table);
    if let Some(key) = weights.keys().find(|key| !instances.iter().any(|i| &i.key == *key)) {
        return Err(DatagenError::EmptyKey(key.clone()));
    }
    let dist = WeightedIndex::new(instances.iter().map(|i| weights[&i.key]))
        .map_err(|e| DatagenError::Precondition(format!("bad weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..k).map(|_| instances[dist.sample(&mut rng)].clone()).collect())
}

/// One corpus line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    /// Rendered simulator prompt: system text, blank line, user text.
    pub prompt: String,
    /// Serialized payload list.
    pub target: String,
    pub key: OutcomeTypeKey,
    pub instance: SftInstance,
}

pub fn sft_record(instance: &SftInstance, prompts: &PromptLibrary) -> Result<SftRecord, DatagenError> {
    let env = environment::instantiate(&instance.init_state)?;
    let prompt = render_simulator_prompt(
        prompts,
        env.as_ref(),
        &instance.init_state,
        &instance.history,
        &instance.action,
    )?;
    Ok(SftRecord {
        prompt: prompt.combined(),
        target: instance.target_text(),
        key: instance.key.clone(),
        instance: instance.clone(),
    })
}

/// Writes one JSON line per instance and returns the count.
pub fn emit_sft(instances: &[SftInstance], prompts: &PromptLibrary, path: &Path) -> Result<usize, DatagenError> {
    let io = |e: std::io::Error| DatagenError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut out = BufWriter::new(fs::File::create(path).map_err(io)?);
    for inst in instances {
        let record = sft_record(inst, prompts)?;
        serde_json::to_writer(&mut out, &record).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)?;
    Ok(instances.len())
}

pub fn read_sft(path: &Path) -> Result<Vec<SftRecord>, DatagenError> {
    let text = fs::read_to_string(path).map_err(|e| DatagenError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DatagenError::Io {
                path: path.display().to_string(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Replays history from the initial state, executes the action, and checks
/// the payloads byte for byte.
pub fn audit_instance(instance: &SftInstance) -> Result<bool, DatagenError> {
    if instance.provenance != Provenance::RealExecution {
        return Ok(false);
    }
    let mut env = environment::instantiate(&instance.init_state)?;
    for step in &instance.history {
        env.execute(&step.calls);
    }
    let outcome = env.execute(&instance.action);
    Ok(outcome.render_payloads() == instance.target_text())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checked: usize,
    /// Indices of instances that did not reproduce.
    pub failures: Vec<usize>,
}

pub fn audit_corpus(instances: &[SftInstance]) -> Result<AuditReport, DatagenError> {
    let mut report = AuditReport::default();
    for (i, inst) in instances.iter().enumerate() {
        report.checked += 1;
        if !audit_instance(inst)? {
            report.failures.push(i);
        }
    }
    Ok(report)
}

/// Per-key instance counts, for the job summary.
pub fn yield_summary(instances: &[SftInstance]) -> Vec<(OutcomeTypeKey, u64)> {
    OutcomeFrequencyTable::from_instances(instances)
        .counts
        .into_iter()
        .collect()
}
