//! Desk-scale task containers and the per-task driver that threads the
//! committed conversation through successive turns.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{ChatBackend, UsageLedger};
use crate::baselines::{run_direct, run_sequential_revision, run_weighted_bon};
use crate::conversation::{canonicalize_call, Message, ToolSpec};
use crate::environment::{self, EnvError, Environment, EnvironmentState};
use crate::orchestrator::{derive_seed, run_turn, Mode, RunConfig, RunError, TurnContext, TurnResult};
use crate::parser::{parse_action_output, ActionOutput};
use crate::prompts::PromptLibrary;
use crate::simulator::Simulator;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("task {task_id}: {message}")]
    Invalid { task_id: String, message: String },
    #[error("{path}: {message}")]
    Load { path: String, message: String },
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error(transparent)]
    Environment(#[from] EnvError),
    #[error(transparent)]
    Run(#[from] RunError),
}

/// What a successful run must leave behind.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    /// Expected environment blob after the last turn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_state: Option<Value>,
    /// Calls in source form that must appear, in order, among the committed
    /// calls.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub milestones: Vec<String>,
}

impl Expectation {
    /// Canonical forms of the milestone calls.
    pub fn canonical_milestones(&self) -> Result<Vec<String>, String> {
        self.milestones
            .iter()
            .map(|m| match parse_action_output(&format!("[{m}]")) {
                Ok(ActionOutput::Calls(calls)) if calls.len() == 1 => Ok(canonicalize_call(&calls[0])),
                _ => Err(format!("milestone `{m}` is not a single call")),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.final_state.is_none() && self.milestones.is_empty() {
            return Err("expectation needs a final state or milestones".into());
        }
        self.canonical_milestones().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub env_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Value>,
    /// One user message per turn.
    pub turns: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expectation: Option<Expectation>,
    /// Restricts the tools shown to the agent; all tools when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tools: Option<Vec<String>>,
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    fn invalid(&self, message: impl Into<String>) -> TaskError {
        TaskError::Invalid {
            task_id: self.task_id.clone(),
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.turns.is_empty() {
            return Err(self.invalid("at least one turn is required"));
        }
        if self.turns.iter().any(|t| t.trim().is_empty()) {
            return Err(self.invalid("turns must be non-empty"));
        }
        if let Some(e) = &self.expectation {
            e.validate().map_err(|m| self.invalid(m))?;
        }
        let env = self.environment()?;
        if let Some(subset) = &self.tools {
            for name in subset {
                if !env.has_tool(name) {
                    return Err(self.invalid(format!("unknown tool `{name}` in tool subset")));
                }
            }
        }
        Ok(())
    }

    /// A fresh environment in the task's initial state.
    pub fn environment(&self) -> Result<Box<dyn Environment>, TaskError> {
        Ok(environment::create(&self.env_id, self.initial_state.as_ref())?)
    }

    pub fn tool_specs(&self, env: &dyn Environment) -> Vec<ToolSpec> {
        env.tools()
            .iter()
            .filter(|t| self.tools.as_ref().is_none_or(|s| s.contains(&t.name)))
            .cloned()
            .collect()
    }

    /// Seed mixing the task's declared seed with its id.
    pub fn derived_seed(&self) -> u64 {
        let digest = Sha256::digest(self.task_id.as_bytes());
        let id = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        derive_seed(&[self.seed, id])
    }
}

/// Reads tasks from a JSON array or a JSON-lines file.
pub fn load_tasks(path: &Path) -> Result<Vec<TaskSpec>, TaskError> {
    let load_err = |message: String| TaskError::Load {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
    let tasks: Vec<TaskSpec> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))?
    } else {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| load_err(format!("line {}: {e}", i + 1))))
            .collect::<Result<_, _>>()?
    };
    for t in &tasks {
        t.validate()?;
    }
    Ok(tasks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "atris-seq")]
    AtrisSeq,
    #[serde(rename = "atris-par")]
    AtrisPar,
    #[serde(rename = "direct")]
    Direct,
    #[serde(rename = "bon")]
    Bon,
    #[serde(rename = "seqrev")]
    Seqrev,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::AtrisSeq,
        Method::AtrisPar,
        Method::Direct,
        Method::Bon,
        Method::Seqrev,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::AtrisSeq => "atris-seq",
            Method::AtrisPar => "atris-par",
            Method::Direct => "direct",
            Method::Bon => "bon",
            Method::Seqrev => "seqrev",
        }
    }

    pub fn parse(s: &str) -> Result<Method, TaskError> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| TaskError::UnknownMethod(s.to_string()))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything that happened while running one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRun {
    pub task_id: String,
    pub method: Method,
    pub n: usize,
    pub turns: Vec<TurnResult>,
    pub final_state: EnvironmentState,
    /// Set when a turn was discarded; later turns are not run.
    pub discarded: bool,
    pub ledger: UsageLedger,
}

impl TaskRun {
    /// Committed calls of every turn, in order.
    pub fn committed_calls(&self) -> Vec<String> {
        self.turns
            .iter()
            .flat_map(|t| t.final_trajectory.all_calls().map(canonicalize_call))
            .collect()
    }
}

/// Shared inputs for running tasks.
#[derive(Clone, Copy)]
pub struct Runner<'a> {
    pub backend: &'a dyn ChatBackend,
    pub prompts: &'a PromptLibrary,
    pub config: &'a RunConfig,
    pub simulator: &'a dyn Simulator,
}

impl Runner<'_> {
    /// Runs every turn of `task` with `method` at budget `n`. Step-level
    /// methods with `n == 0` fall back to direct execution.
    pub fn run_task(&self, task: &TaskSpec, method: Method, n: usize) -> Result<TaskRun, TaskError> {
        task.validate()?;
        let mut env = task.environment()?;
        let tools = task.tool_specs(env.as_ref());
        let config = RunConfig {
            n_attempts: n,
            mode: if method == Method::AtrisPar {
                Mode::Parallel
            } else {
                Mode::Sequential
            },
            ..self.config.clone()
        };
        let task_seed = task.derived_seed();
        let mut history: Vec<Message> = Vec::new();
        let mut turns = Vec::with_capacity(task.turns.len());
        let mut ledger = UsageLedger::new();
        let mut discarded = false;
        for (i, query) in task.turns.iter().enumerate() {
            let ctx = TurnContext {
                backend: self.backend,
                prompts: self.prompts,
                config: &config,
                tools: &tools,
                history: &history,
                query,
                seed: derive_seed(&[task_seed, i as u64]),
            };
            let result = match method {
                Method::AtrisSeq | Method::AtrisPar => run_turn(&ctx, env.as_mut(), self.simulator)?,
                Method::Direct => run_direct(&ctx, env.as_mut())?,
                Method::Bon | Method::Seqrev if n == 0 => run_direct(&ctx, env.as_mut())?,
                Method::Bon => run_weighted_bon(&ctx, env.as_mut(), n)?,
                Method::Seqrev => run_sequential_revision(&ctx, env.as_mut(), n)?,
            };
            ledger.absorb(&result.ledger);
            history = result.committed_messages();
            discarded = result.discarded;
            turns.push(result);
            if discarded {
                break;
            }
        }
        Ok(TaskRun {
            task_id: task.task_id.clone(),
            method,
            n,
            turns,
            final_state: env.snapshot(),
            discarded,
            ledger,
        })
    }
}
