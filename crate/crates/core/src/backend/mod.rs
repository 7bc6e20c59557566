//! Chat-completion backends and the role-attributed usage ledger.

mod remote;
mod replay;
mod scripted;

pub use remote::{RemoteBackend, RemoteConfig, RemoteEmbedder, API_BASE_ENV, API_KEY_ENV};
pub use replay::{Exchange, RecordingBackend, ReplayBackend};
pub use scripted::{Rule, Script, ScriptResponse, ScriptedBackend};

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conversation::{Message, Role};

/// Default context window, in estimated tokens.
pub const CONTEXT_CAP_TOKENS: usize = 32_768;
pub const DEFAULT_MAX_TOKENS: u32 = 4_096;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("prompt exceeds the model context window: {0}")]
    ContextOverflow(String),
    #[error("no scripted rule matches role {role} for request ending {excerpt:?}")]
    NoMatchingRule { role: AgentRole, excerpt: String },
    #[error("no recorded response for request {fingerprint}")]
    ReplayMiss { fingerprint: String },
    #[error("replay log: {0}")]
    ReplayLog(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Action,
    SelfEval,
    Summarizer,
    Simulator,
    Scorer,
}

impl AgentRole {
    pub const ALL: [AgentRole; 5] = [
        AgentRole::Action,
        AgentRole::SelfEval,
        AgentRole::Summarizer,
        AgentRole::Simulator,
        AgentRole::Scorer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Action => "action",
            AgentRole::SelfEval => "self_eval",
            AgentRole::Summarizer => "summarizer",
            AgentRole::Simulator => "simulator",
            AgentRole::Scorer => "scorer",
        }
    }

    pub fn parse(s: &str) -> Option<AgentRole> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }

    /// 1.0 for the action agent, 0.01 for every other role.
    pub fn default_temperature(self) -> f64 {
        match self {
            AgentRole::Action => 1.0,
            _ => 0.01,
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(messages: Vec<Message>, temperature: f64, max_tokens: u32) -> Result<Self, BackendError> {
        let request = ChatRequest {
            messages,
            temperature,
            max_tokens,
            seed: None,
        };
        request.validate()?;
        Ok(request)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.messages.first() {
            None => return Err(BackendError::InvalidRequest("no messages".into())),
            Some(m) if !matches!(m.role, Role::System | Role::User) => {
                return Err(BackendError::InvalidRequest(
                    "first message must be system or user".into(),
                ))
            }
            _ => {}
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }

    /// All message contents joined by newlines, for pattern matching.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Hex SHA-256 over the role and every request field.
    pub fn fingerprint(&self, role: AgentRole) -> String {
        let body = serde_json::json!({ "role": role, "request": self });
        hex::encode(Sha256::digest(body.to_string().as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleUsage {
    pub api_calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl RoleUsage {
    fn add(&mut self, other: &RoleUsage) {
        self.api_calls += other.api_calls;
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
    }
}

/// Per-role counters. Totals are always derived from the roles.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageLedger {
    roles: BTreeMap<AgentRole, RoleUsage>,
}

impl UsageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, role: AgentRole, usage: Usage) {
        self.roles.entry(role).or_default().add(&RoleUsage {
            api_calls: 1,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
        });
    }

    pub fn role(&self, role: AgentRole) -> RoleUsage {
        self.roles.get(&role).copied().unwrap_or_default()
    }

    pub fn total(&self) -> RoleUsage {
        let mut total = RoleUsage::default();
        for usage in self.roles.values() {
            total.add(usage);
        }
        total
    }

    pub fn merge(&self, other: &UsageLedger) -> UsageLedger {
        let mut out = self.clone();
        out.absorb(other);
        out
    }

    pub fn absorb(&mut self, other: &UsageLedger) {
        for (role, usage) in &other.roles {
            self.roles.entry(*role).or_default().add(usage);
        }
    }

    /// Sets one role's counters directly; used when rebuilding reports.
    pub fn set_role(&mut self, role: AgentRole, usage: RoleUsage) {
        self.roles.insert(role, usage);
    }
}

pub fn merge_ledgers(a: &UsageLedger, b: &UsageLedger) -> UsageLedger {
    a.merge(b)
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest, role: AgentRole) -> Result<ChatResponse, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, request: &ChatRequest, role: AgentRole) -> Result<ChatResponse, BackendError> {
        (**self).complete(request, role)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn complete(&self, request: &ChatRequest, role: AgentRole) -> Result<ChatResponse, BackendError> {
        (**self).complete(request, role)
    }
}

/// Sends a request and records the call in `ledger` when it succeeds.
pub fn complete(
    backend: &dyn ChatBackend,
    ledger: &mut UsageLedger,
    request: &ChatRequest,
    role: AgentRole,
) -> Result<ChatResponse, BackendError> {
    request.validate()?;
    let response = backend.complete(request, role)?;
    ledger.record(role, response.usage);
    Ok(response)
}

/// Routes each role to its own backend, falling back to a default.
#[derive(Clone)]
pub struct RoleRouter {
    default: Arc<dyn ChatBackend>,
    overrides: BTreeMap<AgentRole, Arc<dyn ChatBackend>>,
}

impl RoleRouter {
    pub fn new(default: Arc<dyn ChatBackend>) -> Self {
        RoleRouter {
            default,
            overrides: BTreeMap::new(),
        }
    }

    pub fn with_role(mut self, role: AgentRole, backend: Arc<dyn ChatBackend>) -> Self {
        self.overrides.insert(role, backend);
        self
    }

    pub fn backend_for(&self, role: AgentRole) -> &Arc<dyn ChatBackend> {
        self.overrides.get(&role).unwrap_or(&self.default)
    }
}

impl ChatBackend for RoleRouter {
    fn complete(&self, request: &ChatRequest, role: AgentRole) -> Result<ChatResponse, BackendError> {
        self.backend_for(role).complete(request, role)
    }
}
