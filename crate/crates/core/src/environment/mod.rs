//! Stateful tool environments with snapshot and restore.
//!
//! Reference environments are fully deterministic: the payload of a call is a
//! function of the world state and the call alone. A failing call never
//! mutates the state it targets, and later calls in the same batch still run.

mod fileio;
mod vault;

pub use fileio::FileIo;
pub use vault::Vault;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conversation::{
    error_payload, is_error_payload, Literal, OutcomeTypeKey, ParamSpec, ToolCall, ToolOutcome, ToolSpec,
};

pub const UNKNOWN_TOOL: &str = "unknown_tool";
pub const BAD_ARGUMENT_TYPE: &str = "bad_argument_type";

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("state belongs to environment `{found}`, not `{expected}`")]
    EnvMismatch { expected: String, found: String },
    #[error("unknown environment `{0}`")]
    UnknownEnvironment(String),
    #[error("invalid state for `{env}`: {reason}")]
    InvalidState { env: String, reason: String },
}

/// Serializable snapshot of a whole environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentState {
    pub env_id: String,
    pub blob: Value,
    pub version: u64,
}

impl EnvironmentState {
    /// Hex SHA-256 over the environment id and world state (not the version).
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.env_id.as_bytes());
        hasher.update(b"\n");
        hasher.update(self.blob.to_string().as_bytes());
        hex::encode(hasher.finalize())
    }
}

pub trait Environment: Send {
    fn env_id(&self) -> &str;

    fn tools(&self) -> &[ToolSpec];

    /// Documented failure labels, excluding `success` and `other_failure`.
    fn failure_labels(&self) -> &'static [&'static str];

    /// Plain-language description of each tool's implemented behavior and
    /// failure modes.
    fn implementation_notes(&self) -> &'static str;

    /// Executes a single call, returning its payload.
    fn execute_call(&mut self, call: &ToolCall) -> Value;

    fn snapshot(&self) -> EnvironmentState;

    fn restore(&mut self, state: &EnvironmentState) -> Result<(), EnvError>;

    /// Maps an error message produced by this environment to its label.
    fn failure_label(&self, message: &str) -> Option<&'static str>;

    fn boxed_clone(&self) -> Box<dyn Environment>;

    /// Executes a batch left to right; failures do not stop later calls.
    fn execute(&mut self, calls: &[ToolCall]) -> ToolOutcome {
        let mut payloads = Vec::with_capacity(calls.len());
        let mut types = Vec::with_capacity(calls.len());
        for call in calls {
            let payload = self.execute_call(call);
            types.push(self.classify_outcome(call, &payload));
            payloads.push(payload);
        }
        ToolOutcome::new(payloads, types).expect("non-empty batch with aligned types")
    }

    fn classify_outcome(&self, call: &ToolCall, payload: &Value) -> OutcomeTypeKey {
        let tool = format!("{}.{}", self.env_id(), call.tool);
        if !is_error_payload(payload) {
            return OutcomeTypeKey::new(tool, OutcomeTypeKey::SUCCESS);
        }
        let label = payload
            .get("error")
            .and_then(Value::as_str)
            .and_then(|m| self.failure_label(m))
            .unwrap_or(OutcomeTypeKey::OTHER_FAILURE);
        OutcomeTypeKey::new(tool, label)
    }

    fn has_tool(&self, name: &str) -> bool {
        self.tools().iter().any(|t| t.name == name)
    }

    fn fingerprint(&self) -> String {
        self.snapshot().fingerprint()
    }
}

impl Clone for Box<dyn Environment> {
    fn clone(&self) -> Self {
        self.boxed_clone()
    }
}

pub const ENVIRONMENT_IDS: [&str; 2] = [Vault::ID, FileIo::ID];

/// Builds an environment, optionally from an `initial_state` blob.
pub fn create(env_id: &str, initial_state: Option<&Value>) -> Result<Box<dyn Environment>, EnvError> {
    match env_id {
        Vault::ID => Ok(Box::new(match initial_state {
            Some(blob) => Vault::from_blob(blob)?,
            None => Vault::new(),
        })),
        FileIo::ID => Ok(Box::new(match initial_state {
            Some(blob) => FileIo::from_blob(blob)?,
            None => FileIo::new(),
        })),
        other => Err(EnvError::UnknownEnvironment(other.to_string())),
    }
}

/// Materializes an independent environment from a snapshot.
pub fn instantiate(state: &EnvironmentState) -> Result<Box<dyn Environment>, EnvError> {
    let mut env = create(&state.env_id, None)?;
    env.restore(state)?;
    Ok(env)
}

pub(crate) fn check_env_id(expected: &str, state: &EnvironmentState) -> Result<(), EnvError> {
    if state.env_id != expected {
        return Err(EnvError::EnvMismatch {
            expected: expected.to_string(),
            found: state.env_id.clone(),
        });
    }
    Ok(())
}

pub(crate) fn param(name: &str, type_tag: &str, description: &str) -> (String, ParamSpec) {
    (
        name.to_string(),
        ParamSpec {
            type_tag: type_tag.to_string(),
            required: true,
            description: description.to_string(),
        },
    )
}

pub(crate) fn tool(name: &str, description: &str, params: Vec<(String, ParamSpec)>) -> ToolSpec {
    ToolSpec::new(name, description, params).expect("static tool spec is valid")
}

/// Checks arguments against a tool's schema; returns the error payload on
/// the first violation.
pub(crate) fn check_arguments(spec: &ToolSpec, call: &ToolCall) -> Result<(), Value> {
    for (name, _) in &call.arguments {
        if !spec.parameters.iter().any(|(p, _)| p == name) {
            return Err(error_payload(format!("unexpected argument {name}")));
        }
    }
    for (name, p) in &spec.parameters {
        match call.arg(name) {
            None if p.required => return Err(error_payload(format!("missing argument {name}"))),
            None => {}
            Some(value) => {
                let ok = matches!(
                    (p.type_tag.as_str(), value),
                    ("string", Literal::Str(_)) | ("integer", Literal::Int(_)) | ("boolean", Literal::Bool(_))
                );
                if !ok {
                    return Err(error_payload(format!(
                        "bad argument type for {name}: expected {}",
                        p.type_tag
                    )));
                }
            }
        }
    }
    Ok(())
}

pub(crate) fn unknown_tool(name: &str) -> Value {
    error_payload(format!("unknown tool {name}"))
}

pub(crate) fn common_label(message: &str) -> Option<&'static str> {
    if message.starts_with("unknown tool ") {
        Some(UNKNOWN_TOOL)
    } else if message.starts_with("missing argument ")
        || message.starts_with("bad argument type ")
        || message.starts_with("unexpected argument ")
    {
        Some(BAD_ARGUMENT_TYPE)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{parse_action_output, ActionOutput};

    pub(crate) fn parse_calls(text: &str) -> Vec<ToolCall> {
        match parse_action_output(text).unwrap() {
            ActionOutput::Calls(c) => c,
            other => panic!("not calls: {other:?}"),
        }
    }

    #[test]
    fn create_and_instantiate() {
        let env = create("vault", None).unwrap();
        let copy = instantiate(&env.snapshot()).unwrap();
        assert_eq!(copy.snapshot(), env.snapshot());
        assert!(matches!(create("nope", None), Err(EnvError::UnknownEnvironment(_))));
    }

    #[test]
    fn fingerprint_ignores_version_but_not_state() {
        let mut env = create("vault", None).unwrap();
        let before = env.fingerprint();
        env.execute(&parse_calls(
            r#"[deposit(account="A", amount=5), withdraw(account="A", amount=5)]"#,
        ));
        assert_eq!(env.snapshot().version, 2);
        assert_eq!(env.fingerprint(), before);
        env.execute(&parse_calls(r#"[deposit(account="B", amount=5)]"#));
        assert_ne!(env.fingerprint(), before);
    }

    #[test]
    fn batch_continues_after_failure() {
        let mut env = create("vault", None).unwrap();
        let out = env.execute(&parse_calls(
            r#"[transfer(src="A", dst="B", amount=150), transfer(src="A", dst="B", amount=30)]"#,
        ));
        assert!(out.is_failure());
        assert_eq!(out.payloads[0], serde_json::json!({"error": "insufficient funds"}));
        assert!(!is_error_payload(&out.payloads[1]));
        assert_eq!(out.outcome_types[0].otype, "insufficient_funds");
        assert_eq!(out.outcome_types[1].otype, "success");
    }

    #[test]
    fn unknown_tool_is_payload() {
        for id in ENVIRONMENT_IDS {
            let mut env = create(id, None).unwrap();
            let out = env.execute(&parse_calls("[launch_rocket()]"));
            assert!(out.is_failure());
            assert_eq!(
                out.outcome_types[0],
                OutcomeTypeKey::new(format!("{id}.launch_rocket"), UNKNOWN_TOOL)
            );
        }
    }

    #[test]
    fn documented_labels_cover_reference_tools() {
        for id in ENVIRONMENT_IDS {
            let env = create(id, None).unwrap();
            assert!(env.tools().len() >= 5, "{id} has too few tools");
            assert!(env.failure_labels().len() >= 4, "{id} has too few failure labels");
            assert!(env.failure_labels().contains(&UNKNOWN_TOOL));
            assert!(env.failure_labels().contains(&BAD_ARGUMENT_TYPE));
        }
    }
}
