//! Conversation data model shared by every stage of the engine.
//!
//! Everything here is an immutable value once constructed. A turn's
//! trajectory only ever grows by [`TurnHistory::with_step`], and is sealed by
//! [`TurnHistory::close`] when the agent answers in natural language.

use std::collections::HashSet;
use std::fmt::{self, Write as _};

use serde::de::{self, MapAccess, SeqAccess, Visitor};
use serde::ser::{SerializeMap, SerializeSeq};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{role:?} message must have non-empty content")]
    EmptyContent { role: Role },
    #[error("invalid identifier `{0}`")]
    InvalidIdentifier(String),
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("step must contain at least one call")]
    EmptyStep,
    #[error("step has {calls} calls but {payloads} payloads")]
    PayloadMismatch { calls: usize, payloads: usize },
    #[error("outcome must carry at least one payload")]
    EmptyOutcome,
    #[error("turn already closed; no further steps may be appended")]
    TurnClosed,
    #[error("a failing evaluation must carry a suggestion")]
    MissingSuggestion,
    #[error("summary recommendation must be non-empty")]
    EmptyRecommendation,
}

/// Error raised when a persisted record cannot be decoded.
#[derive(Debug, Error)]
#[error("decode error at line {line}, column {column}: {message}")]
pub struct DecodeError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl From<serde_json::Error> for DecodeError {
    fn from(err: serde_json::Error) -> Self {
        DecodeError {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Result<Self, ModelError> {
        let content = content.into();
        if matches!(role, Role::User | Role::Tool) && content.is_empty() {
            return Err(ModelError::EmptyContent { role });
        }
        Ok(Message { role, content })
    }

    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
        }
    }

    pub fn tool(content: impl Into<String>) -> Self {
        Message {
            role: Role::Tool,
            content: content.into(),
        }
    }
}

/// Returns true when `name` matches `[A-Za-z_][A-Za-z0-9_.]*`.
pub fn is_tool_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

/// Keyword names are identifiers without dots.
pub fn is_keyword_identifier(name: &str) -> bool {
    is_tool_identifier(name) && !name.contains('.')
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    #[serde(rename = "type")]
    pub type_tag: String,
    pub required: bool,
    pub description: String,
}

/// A tool's name, description, and keyword parameter schema.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub parameters: Vec<(String, ParamSpec)>,
}

impl ToolSpec {
    pub fn new(
        name: impl Into<String>,
        description: impl Into<String>,
        parameters: Vec<(String, ParamSpec)>,
    ) -> Result<Self, ModelError> {
        let name = name.into();
        if !is_tool_identifier(&name) {
            return Err(ModelError::InvalidIdentifier(name));
        }
        let mut seen = HashSet::new();
        for (param, _) in &parameters {
            if !seen.insert(param.as_str()) {
                return Err(ModelError::DuplicateName(param.clone()));
            }
        }
        Ok(ToolSpec {
            name,
            description: description.into(),
            parameters,
        })
    }

    /// Structured document used when tool specs are shown to a model.
    pub fn to_document(&self) -> Value {
        let mut properties = serde_json::Map::new();
        let mut required = Vec::new();
        for (name, spec) in &self.parameters {
            properties.insert(
                name.clone(),
                serde_json::json!({ "type": spec.type_tag, "description": spec.description }),
            );
            if spec.required {
                required.push(Value::String(name.clone()));
            }
        }
        serde_json::json!({
            "name": self.name,
            "description": self.description,
            "parameters": {
                "type": "dict",
                "properties": properties,
                "required": required,
            }
        })
    }
}

/// A literal argument value as written in a model's call list.
#[derive(Clone, Debug, PartialEq)]
pub enum Literal {
    Str(String),
    Int(i64),
    Decimal(f64),
    Bool(bool),
    Null,
    List(Vec<Literal>),
    Map(Vec<(String, Literal)>),
}

impl Literal {
    pub fn to_json(&self) -> Value {
        match self {
            Literal::Str(s) => Value::String(s.clone()),
            Literal::Int(i) => Value::from(*i),
            Literal::Decimal(d) => serde_json::Number::from_f64(*d)
                .map(Value::Number)
                .unwrap_or(Value::Null),
            Literal::Bool(b) => Value::Bool(*b),
            Literal::Null => Value::Null,
            Literal::List(items) => Value::Array(items.iter().map(Literal::to_json).collect()),
            Literal::Map(entries) => Value::Object(entries.iter().map(|(k, v)| (k.clone(), v.to_json())).collect()),
        }
    }

    pub fn from_json(value: &Value) -> Literal {
        match value {
            Value::Null => Literal::Null,
            Value::Bool(b) => Literal::Bool(*b),
            Value::Number(n) => match n.as_i64() {
                Some(i) => Literal::Int(i),
                None => Literal::Decimal(n.as_f64().unwrap_or(0.0)),
            },
            Value::String(s) => Literal::Str(s.clone()),
            Value::Array(items) => Literal::List(items.iter().map(Literal::from_json).collect()),
            Value::Object(map) => Literal::Map(map.iter().map(|(k, v)| (k.clone(), Literal::from_json(v))).collect()),
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Literal::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Literal::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Literal::Bool(b) => Some(*b),
            _ => None,
        }
    }
}

impl Serialize for Literal {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Literal::Str(s) => serializer.serialize_str(s),
            Literal::Int(i) => serializer.serialize_i64(*i),
            Literal::Decimal(d) => serializer.serialize_f64(*d),
            Literal::Bool(b) => serializer.serialize_bool(*b),
            Literal::Null => serializer.serialize_unit(),
            Literal::List(items) => {
                let mut seq = serializer.serialize_seq(Some(items.len()))?;
                for item in items {
                    seq.serialize_element(item)?;
                }
                seq.end()
            }
            Literal::Map(entries) => serialize_entries(entries, serializer),
        }
    }
}

fn serialize_entries<S: Serializer>(entries: &[(String, Literal)], serializer: S) -> Result<S::Ok, S::Error> {
    let mut map = serializer.serialize_map(Some(entries.len()))?;
    for (k, v) in entries {
        map.serialize_entry(k, v)?;
    }
    map.end()
}

struct LiteralVisitor;

impl<'de> Visitor<'de> for LiteralVisitor {
    type Value = Literal;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a literal value")
    }

    fn visit_bool<E: de::Error>(self, v: bool) -> Result<Literal, E> {
        Ok(Literal::Bool(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Literal, E> {
        Ok(Literal::Int(v))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Literal, E> {
        i64::try_from(v)
            .map(Literal::Int)
            .map_err(|_| E::custom("integer out of range"))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Literal, E> {
        Ok(Literal::Decimal(v))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Literal, E> {
        Ok(Literal::Str(v.to_owned()))
    }

    fn visit_string<E: de::Error>(self, v: String) -> Result<Literal, E> {
        Ok(Literal::Str(v))
    }

    fn visit_unit<E: de::Error>(self) -> Result<Literal, E> {
        Ok(Literal::Null)
    }

    fn visit_none<E: de::Error>(self) -> Result<Literal, E> {
        Ok(Literal::Null)
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Literal, A::Error> {
        let mut items = Vec::new();
        while let Some(item) = seq.next_element()? {
            items.push(item);
        }
        Ok(Literal::List(items))
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Literal, A::Error> {
        let mut entries = Vec::new();
        while let Some((k, v)) = map.next_entry::<String, Literal>()? {
            entries.push((k, v));
        }
        Ok(Literal::Map(entries))
    }
}

impl<'de> Deserialize<'de> for Literal {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        deserializer.deserialize_any(LiteralVisitor)
    }
}

/// One tool invocation with keyword arguments in emission order.
#[derive(Clone, Debug, PartialEq)]
pub struct ToolCall {
    pub tool: String,
    pub arguments: Vec<(String, Literal)>,
}

impl ToolCall {
    pub fn new(tool: impl Into<String>, arguments: Vec<(String, Literal)>) -> Result<Self, ModelError> {
        let tool = tool.into();
        if !is_tool_identifier(&tool) {
            return Err(ModelError::InvalidIdentifier(tool));
        }
        let mut seen = HashSet::new();
        for (name, _) in &arguments {
            if !is_keyword_identifier(name) {
                return Err(ModelError::InvalidIdentifier(name.clone()));
            }
            if !seen.insert(name.as_str()) {
                return Err(ModelError::DuplicateName(name.clone()));
            }
        }
        Ok(ToolCall { tool, arguments })
    }

    pub fn arg(&self, name: &str) -> Option<&Literal> {
        self.arguments.iter().find(|(k, _)| k == name).map(|(_, v)| v)
    }

    /// Order-preserving source rendering, re-parseable by the call parser.
    pub fn to_source(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.tool);
        out.push('(');
        for (i, (name, value)) in self.arguments.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            out.push_str(name);
            out.push('=');
            write_literal(&mut out, value, false);
        }
        out.push(')');
        out
    }
}

impl Serialize for ToolCall {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        struct Args<'a>(&'a [(String, Literal)]);
        impl Serialize for Args<'_> {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serialize_entries(self.0, serializer)
            }
        }
        let mut map = serializer.serialize_map(Some(2))?;
        map.serialize_entry("tool", &self.tool)?;
        map.serialize_entry("arguments", &Args(&self.arguments))?;
        map.end()
    }
}

impl<'de> Deserialize<'de> for ToolCall {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            tool: String,
            arguments: Literal,
        }
        let raw = Raw::deserialize(deserializer)?;
        let arguments = match raw.arguments {
            Literal::Map(entries) => entries,
            _ => return Err(de::Error::custom("arguments must be an object")),
        };
        ToolCall::new(raw.tool, arguments).map_err(de::Error::custom)
    }
}

/// Renders a call list in the bracketed form the action prompt asks for.
pub fn render_call_list(calls: &[ToolCall]) -> String {
    let body: Vec<String> = calls.iter().map(ToolCall::to_source).collect();
    format!("[{}]", body.join(", "))
}

/// Argument-order-insensitive normal form of a call.
///
/// Arguments and map keys are sorted, strings are double-quoted with
/// escapes, booleans are lowercase, and decimals use the shortest
/// round-trip representation (always keeping a fractional part so they
/// never collide with integers).
pub fn canonicalize_call(call: &ToolCall) -> String {
    let mut args: Vec<&(String, Literal)> = call.arguments.iter().collect();
    args.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::new();
    out.push_str(&call.tool);
    out.push('(');
    for (i, (name, value)) in args.into_iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(name);
        out.push('=');
        write_literal(&mut out, value, true);
    }
    out.push(')');
    out
}

/// Canonical form of a whole call batch.
pub fn canonicalize_calls(calls: &[ToolCall]) -> String {
    let body: Vec<String> = calls.iter().map(canonicalize_call).collect();
    format!("[{}]", body.join(","))
}

pub(crate) fn format_decimal(value: f64) -> String {
    let mut text = format!("{value}");
    if value.is_finite() && !text.contains(['.', 'e', 'E']) {
        text.push_str(".0");
    }
    text
}

pub(crate) fn write_quoted(out: &mut String, s: &str) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

fn write_literal(out: &mut String, value: &Literal, canonical: bool) {
    let sep = if canonical { "," } else { ", " };
    match value {
        Literal::Str(s) => write_quoted(out, s),
        Literal::Int(i) => {
            let _ = write!(out, "{i}");
        }
        Literal::Decimal(d) => out.push_str(&format_decimal(*d)),
        Literal::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Literal::Null => out.push_str("null"),
        Literal::List(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(sep);
                }
                write_literal(out, item, canonical);
            }
            out.push(']');
        }
        Literal::Map(entries) => {
            let mut refs: Vec<&(String, Literal)> = entries.iter().collect();
            if canonical {
                refs.sort_by(|a, b| a.0.cmp(&b.0));
            }
            out.push('{');
            for (i, (k, v)) in refs.into_iter().enumerate() {
                if i > 0 {
                    out.push_str(sep);
                }
                write_quoted(out, k);
                out.push_str(if canonical { ":" } else { ": " });
                write_literal(out, v, canonical);
            }
            out.push('}');
        }
    }
}

/// Tool-qualified outcome category used for frequency accounting.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OutcomeTypeKey {
    pub tool: String,
    pub otype: String,
}

impl OutcomeTypeKey {
    pub const SUCCESS: &'static str = "success";
    pub const OTHER_FAILURE: &'static str = "other_failure";

    pub fn new(tool: impl Into<String>, otype: impl Into<String>) -> Self {
        OutcomeTypeKey {
            tool: tool.into(),
            otype: otype.into(),
        }
    }

    pub fn is_success(&self) -> bool {
        self.otype == Self::SUCCESS
    }
}

impl fmt::Display for OutcomeTypeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.tool, self.otype)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeStatus {
    Success,
    Failure,
}

/// True when a payload is an object carrying an `error` field.
pub fn is_error_payload(payload: &Value) -> bool {
    payload.get("error").is_some()
}

pub fn error_payload(message: impl Into<String>) -> Value {
    serde_json::json!({ "error": message.into() })
}

/// Observation for one executed batch: one payload per call, in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolOutcome {
    pub payloads: Vec<Value>,
    pub status: OutcomeStatus,
    /// Classified type of each payload, aligned with `payloads`.
    pub outcome_types: Vec<OutcomeTypeKey>,
}

impl ToolOutcome {
    pub fn new(payloads: Vec<Value>, outcome_types: Vec<OutcomeTypeKey>) -> Result<Self, ModelError> {
        if payloads.is_empty() {
            return Err(ModelError::EmptyOutcome);
        }
        if payloads.len() != outcome_types.len() {
            return Err(ModelError::PayloadMismatch {
                calls: outcome_types.len(),
                payloads: payloads.len(),
            });
        }
        let status = if payloads.iter().any(is_error_payload) {
            OutcomeStatus::Failure
        } else {
            OutcomeStatus::Success
        };
        Ok(ToolOutcome {
            payloads,
            status,
            outcome_types,
        })
    }

    pub fn is_failure(&self) -> bool {
        self.status == OutcomeStatus::Failure
    }

    /// Compact JSON list of the payloads, as shown to models.
    pub fn render_payloads(&self) -> String {
        Value::Array(self.payloads.clone()).to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub calls: Vec<ToolCall>,
    pub outcome: ToolOutcome,
}

impl Step {
    pub fn new(calls: Vec<ToolCall>, outcome: ToolOutcome) -> Result<Self, ModelError> {
        if calls.is_empty() {
            return Err(ModelError::EmptyStep);
        }
        if calls.len() != outcome.payloads.len() {
            return Err(ModelError::PayloadMismatch {
                calls: calls.len(),
                payloads: outcome.payloads.len(),
            });
        }
        Ok(Step { calls, outcome })
    }
}

/// Conversation base plus the current turn's steps and optional closing reply.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnHistory {
    pub base: Vec<Message>,
    pub steps: Vec<Step>,
    pub closing_reply: Option<String>,
}

impl TurnHistory {
    pub fn new(base: Vec<Message>) -> Self {
        TurnHistory {
            base,
            steps: Vec::new(),
            closing_reply: None,
        }
    }

    pub fn is_closed(&self) -> bool {
        self.closing_reply.is_some()
    }

    /// Returns the history extended by one step.
    pub fn with_step(mut self, step: Step) -> Result<Self, ModelError> {
        if self.is_closed() {
            return Err(ModelError::TurnClosed);
        }
        self.steps.push(step);
        Ok(self)
    }

    pub fn close(mut self, reply: impl Into<String>) -> Result<Self, ModelError> {
        if self.is_closed() {
            return Err(ModelError::TurnClosed);
        }
        self.closing_reply = Some(reply.into());
        Ok(self)
    }

    /// Messages for the current turn's steps: assistant call lists and tool
    /// observations, followed by the closing reply when present.
    pub fn step_messages(&self) -> Vec<Message> {
        let mut out = Vec::with_capacity(self.steps.len() * 2 + 1);
        for step in &self.steps {
            out.push(Message::assistant(render_call_list(&step.calls)));
            out.push(Message::tool(step.outcome.render_payloads()));
        }
        if let Some(reply) = &self.closing_reply {
            out.push(Message::assistant(reply.clone()));
        }
        out
    }

    /// Base followed by the step messages; the committed form of a turn.
    pub fn to_messages(&self) -> Vec<Message> {
        let mut out = self.base.clone();
        out.extend(self.step_messages());
        out
    }

    pub fn all_calls(&self) -> impl Iterator<Item = &ToolCall> {
        self.steps.iter().flat_map(|s| s.calls.iter())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("history serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DecodeError> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub verdict: Verdict,
    pub rationale: String,
    pub suggestion: Option<String>,
}

impl EvaluationResult {
    pub fn new(verdict: Verdict, rationale: impl Into<String>, suggestion: Option<String>) -> Result<Self, ModelError> {
        if verdict == Verdict::Fail && suggestion.is_none() {
            return Err(ModelError::MissingSuggestion);
        }
        Ok(EvaluationResult {
            verdict,
            rationale: rationale.into(),
            suggestion,
        })
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub recommendation: String,
    pub rationale: String,
}

impl Summary {
    pub fn new(recommendation: impl Into<String>, rationale: impl Into<String>) -> Result<Self, ModelError> {
        let recommendation = recommendation.into();
        if recommendation.trim().is_empty() {
            return Err(ModelError::EmptyRecommendation);
        }
        Ok(Summary {
            recommendation,
            rationale: rationale.into(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncidentKind {
    MalformedAction,
    MalformedEvaluation,
    MalformedSummary,
    MalformedScore,
    SimulatorFailure,
    PayloadCountMismatch,
    ContextOverflow,
    StepCap,
}

/// A recoverable model-output problem that was absorbed by the loop.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incident {
    pub kind: IncidentKind,
    pub detail: String,
}

impl Incident {
    pub fn new(kind: IncidentKind, detail: impl Into<String>) -> Self {
        Incident {
            kind,
            detail: detail.into(),
        }
    }
}

/// One simulated trajectory for a turn, with its evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    /// 1-based attempt index.
    pub index: usize,
    pub trajectory: TurnHistory,
    pub evaluation: Option<EvaluationResult>,
    /// Set when the assembled prompt overflowed the context cap.
    pub discarded: bool,
    #[serde(default)]
    pub step_capped: bool,
    #[serde(default)]
    pub incidents: Vec<Incident>,
}

impl AttemptRecord {
    pub fn passed(&self) -> bool {
        self.evaluation.as_ref().is_some_and(EvaluationResult::passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("attempt serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DecodeError> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(tool: &str, args: Vec<(&str, Literal)>) -> ToolCall {
        ToolCall::new(tool, args.into_iter().map(|(k, v)| (k.to_string(), v)).collect()).unwrap()
    }

    fn ok_outcome(n: usize) -> ToolOutcome {
        ToolOutcome::new(
            vec![serde_json::json!({"ok": true}); n],
            vec![OutcomeTypeKey::new("t.f", "success"); n],
        )
        .unwrap()
    }

    #[test]
    fn canonical_sorts_arguments() {
        let c = call("f", vec![("b", Literal::Int(2)), ("a", Literal::Int(1))]);
        assert_eq!(canonicalize_call(&c), "f(a=1,b=2)");
    }

    #[test]
    fn canonical_empty_call() {
        assert_eq!(canonicalize_call(&call("f", vec![])), "f()");
    }

    #[test]
    fn canonical_normalizes_literals() {
        let c = call(
            "g",
            vec![
                ("x", Literal::List(vec![Literal::Int(1), Literal::Decimal(2.50)])),
                ("y", Literal::Str("hi".into())),
            ],
        );
        assert_eq!(canonicalize_call(&c), r#"g(x=[1,2.5],y="hi")"#);
    }

    #[test]
    fn canonical_escapes_and_sorts_map_keys() {
        let c = call(
            "h",
            vec![
                (
                    "m",
                    Literal::Map(vec![("z".into(), Literal::Bool(true)), ("a".into(), Literal::Null)]),
                ),
                ("s", Literal::Str("say \"hi\"\\".into())),
                ("d", Literal::Decimal(3.0)),
            ],
        );
        assert_eq!(
            canonicalize_call(&c),
            r#"h(d=3.0,m={"a":null,"z":true},s="say \"hi\"\\")"#
        );
    }

    #[test]
    fn invalid_identifiers_rejected() {
        assert!(ToolCall::new("1abc", vec![]).is_err());
        assert!(ToolCall::new("vault.balance", vec![]).is_ok());
        assert_eq!(
            ToolCall::new("f", vec![("a".into(), Literal::Null), ("a".into(), Literal::Null)]),
            Err(ModelError::DuplicateName("a".into()))
        );
        let spec = ToolSpec::new("x y", "", vec![]);
        assert!(spec.is_err());
    }

    #[test]
    fn message_content_rules() {
        assert!(Message::new(Role::User, "").is_err());
        assert!(Message::new(Role::Tool, "").is_err());
        assert!(Message::new(Role::Assistant, "").is_ok());
    }

    #[test]
    fn append_step_grows_by_one_and_keeps_prefix() {
        let h = TurnHistory::new(vec![Message::user("hi")]);
        let s = Step::new(vec![call("f", vec![])], ok_outcome(1)).unwrap();
        let h1 = h.with_step(s.clone()).unwrap();
        assert_eq!(h1.steps.len(), 1);
        let h2 = h1.clone().with_step(s.clone()).unwrap();
        let h3 = h2.clone().with_step(s).unwrap();
        assert_eq!(h3.steps.len(), 3);
        assert_eq!(&h3.steps[..2], &h2.steps[..]);
    }

    #[test]
    fn closed_history_rejects_steps() {
        let h = TurnHistory::new(vec![]).close("done").unwrap();
        let s = Step::new(vec![call("f", vec![])], ok_outcome(1)).unwrap();
        assert_eq!(h.clone().with_step(s), Err(ModelError::TurnClosed));
        assert_eq!(h.close("again"), Err(ModelError::TurnClosed));
    }

    #[test]
    fn step_requires_aligned_payloads() {
        assert_eq!(Step::new(vec![], ok_outcome(1)), Err(ModelError::EmptyStep));
        assert!(matches!(
            Step::new(vec![call("f", vec![])], ok_outcome(2)),
            Err(ModelError::PayloadMismatch { .. })
        ));
    }

    #[test]
    fn outcome_status_follows_error_payloads() {
        let o = ToolOutcome::new(
            vec![serde_json::json!({"v": 1}), error_payload("boom")],
            vec![
                OutcomeTypeKey::new("t", "success"),
                OutcomeTypeKey::new("t", "other_failure"),
            ],
        )
        .unwrap();
        assert!(o.is_failure());
        assert!(ToolOutcome::new(vec![], vec![]).is_err());
    }

    #[test]
    fn evaluation_fail_needs_suggestion() {
        assert_eq!(
            EvaluationResult::new(Verdict::Fail, "bad", None),
            Err(ModelError::MissingSuggestion)
        );
        assert!(EvaluationResult::new(Verdict::Pass, "ok", None).is_ok());
        assert!(Summary::new(" ", "").is_err());
    }

    #[test]
    fn empty_history_roundtrip() {
        let h = TurnHistory::default();
        assert_eq!(TurnHistory::from_json(&h.to_json()).unwrap(), h);
    }

    #[test]
    fn attempt_roundtrip_field_by_field() {
        let step = Step::new(
            vec![call(
                "transfer",
                vec![("src", Literal::Str("A".into())), ("amount", Literal::Int(150))],
            )],
            ToolOutcome::new(
                vec![error_payload("insufficient funds")],
                vec![OutcomeTypeKey::new("vault.transfer", "insufficient_funds")],
            )
            .unwrap(),
        )
        .unwrap();
        let record = AttemptRecord {
            index: 2,
            trajectory: TurnHistory::new(vec![Message::user("move money")])
                .with_step(step)
                .unwrap()
                .close("I could not.")
                .unwrap(),
            evaluation: Some(
                EvaluationResult::new(Verdict::Fail, "overdraft", Some("transfer 30 instead".into())).unwrap(),
            ),
            discarded: false,
            step_capped: false,
            incidents: vec![],
        };
        let back = AttemptRecord::from_json(&record.to_json()).unwrap();
        assert_eq!(back.index, record.index);
        assert_eq!(back.trajectory.base, record.trajectory.base);
        assert_eq!(back.trajectory.steps, record.trajectory.steps);
        assert_eq!(back.trajectory.closing_reply, record.trajectory.closing_reply);
        assert_eq!(back.evaluation, record.evaluation);
        assert_eq!(back.discarded, record.discarded);
        assert_eq!(back, record);
    }

    #[test]
    fn truncated_stream_is_decode_error() {
        let h = TurnHistory::new(vec![Message::user("hello")]);
        let text = h.to_json();
        let err = TurnHistory::from_json(&text[..text.len() / 2]).unwrap_err();
        assert_eq!(err.line, 1);
        assert!(err.column > 0);
    }

    #[test]
    fn argument_order_survives_serde() {
        let c = call("f", vec![("z", Literal::Int(1)), ("a", Literal::Int(2))]);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(text, r#"{"tool":"f","arguments":{"z":1,"a":2}}"#);
        let back: ToolCall = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn decimal_formatting() {
        assert_eq!(format_decimal(2.5), "2.5");
        assert_eq!(format_decimal(1.0), "1.0");
        assert_eq!(format_decimal(-0.125), "-0.125");
        assert_eq!(format_decimal(0.1 + 0.2), "0.30000000000000004");
    }
}
