//! Prompt templates and rendering.
//!
//! Templates live as plain text under `prompts/` and are embedded at build
//! time. A directory passed at runtime (or via `ATRIS_PROMPT_DIR`) overrides
//! any file it contains.
//!
//! Placeholders are `{name}`. A section `{#name}...{/name}` is kept only when
//! `name` is bound to a non-empty value. Substituted values are never
//! rescanned, so histories containing braces render verbatim.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conversation::{render_call_list, Message, Role, Step, ToolSpec};

pub const PROMPT_DIR_ENV: &str = "ATRIS_PROMPT_DIR";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template `{template}` has no binding for placeholder `{placeholder}`")]
    MissingBinding { template: String, placeholder: String },
    #[error("template `{template}` has an unterminated section `{section}`")]
    UnterminatedSection { template: String, section: String },
    #[error("reading prompt file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    ActionSystem,
    ActionUser,
    FinalUser,
    SelfEval,
    Simulator,
    Summarizer,
    BonScorer,
    SeqrevEval,
    ElicitFailure,
}

impl TemplateName {
    pub const ALL: [TemplateName; 9] = [
        TemplateName::ActionSystem,
        TemplateName::ActionUser,
        TemplateName::FinalUser,
        TemplateName::SelfEval,
        TemplateName::Simulator,
        TemplateName::Summarizer,
        TemplateName::BonScorer,
        TemplateName::SeqrevEval,
        TemplateName::ElicitFailure,
    ];

    pub fn id(self) -> &'static str {
        match self {
            TemplateName::ActionSystem => "action_system",
            TemplateName::ActionUser => "action_user",
            TemplateName::FinalUser => "final_user",
            TemplateName::SelfEval => "self_eval",
            TemplateName::Simulator => "simulator",
            TemplateName::Summarizer => "summarizer",
            TemplateName::BonScorer => "bon_scorer",
            TemplateName::SeqrevEval => "seqrev_eval",
            TemplateName::ElicitFailure => "elicit_failure",
        }
    }

    /// File names of the (system, user) parts.
    fn files(self) -> (Option<String>, Option<String>) {
        let id = self.id();
        match self {
            TemplateName::ActionSystem => (Some(format!("{id}.txt")), None),
            TemplateName::ActionUser | TemplateName::FinalUser => (None, Some(format!("{id}.txt"))),
            TemplateName::ElicitFailure => (None, Some(format!("{id}.user.txt"))),
            _ => (Some(format!("{id}.system.txt")), Some(format!("{id}.user.txt"))),
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

fn builtin_text(file: &str) -> &'static str {
    match file {
        "action_system.txt" => include_str!("../prompts/action_system.txt"),
        "action_user.txt" => include_str!("../prompts/action_user.txt"),
        "final_user.txt" => include_str!("../prompts/final_user.txt"),
        "self_eval.system.txt" => include_str!("../prompts/self_eval.system.txt"),
        "self_eval.user.txt" => include_str!("../prompts/self_eval.user.txt"),
        "simulator.system.txt" => include_str!("../prompts/simulator.system.txt"),
        "simulator.user.txt" => include_str!("../prompts/simulator.user.txt"),
        "summarizer.system.txt" => include_str!("../prompts/summarizer.system.txt"),
        "summarizer.user.txt" => include_str!("../prompts/summarizer.user.txt"),
        "bon_scorer.system.txt" => include_str!("../prompts/bon_scorer.system.txt"),
        "bon_scorer.user.txt" => include_str!("../prompts/bon_scorer.user.txt"),
        "seqrev_eval.system.txt" => include_str!("../prompts/seqrev_eval.system.txt"),
        "seqrev_eval.user.txt" => include_str!("../prompts/seqrev_eval.user.txt"),
        "elicit_failure.user.txt" => include_str!("../prompts/elicit_failure.user.txt"),
        other => unreachable!("no built-in prompt file {other}"),
    }
}

fn strip_one_newline(text: &str) -> String {
    let text = text.strip_suffix('\n').unwrap_or(text);
    text.strip_suffix('\r').unwrap_or(text).to_string()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub system: Option<String>,
    pub user: Option<String>,
}

/// A rendered template, split the same way as its source files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: Option<String>,
    pub user: Option<String>,
}

impl RenderedPrompt {
    pub fn to_messages(&self) -> Vec<Message> {
        let mut out = Vec::new();
        if let Some(s) = &self.system {
            out.push(Message::system(s.clone()));
        }
        if let Some(u) = &self.user {
            out.push(Message::user(u.clone()));
        }
        out
    }

    /// System and user parts joined by a blank line.
    pub fn combined(&self) -> String {
        match (&self.system, &self.user) {
            (Some(s), Some(u)) => format!("{s}\n\n{u}"),
            (Some(s), None) => s.clone(),
            (None, Some(u)) => u.clone(),
            (None, None) => String::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PromptLibrary {
    templates: BTreeMap<TemplateName, PromptTemplate>,
}

impl Default for PromptLibrary {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptLibrary {
    pub fn builtin() -> Self {
        let templates = TemplateName::ALL
            .iter()
            .map(|&name| {
                let (sys, user) = name.files();
                let template = PromptTemplate {
                    name,
                    system: sys.map(|f| strip_one_newline(builtin_text(&f))),
                    user: user.map(|f| strip_one_newline(builtin_text(&f))),
                };
                (name, template)
            })
            .collect();
        PromptLibrary { templates }
    }

    /// Built-in templates, with any file present in `dir` taking precedence.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut lib = Self::builtin();
        for template in lib.templates.values_mut() {
            let (sys, user) = template.name.files();
            for (file, slot) in [(sys, &mut template.system), (user, &mut template.user)] {
                let Some(file) = file else { continue };
                let path = dir.join(&file);
                if path.exists() {
                    let text = fs::read_to_string(&path).map_err(|source| PromptError::Io {
                        path: path.clone(),
                        source,
                    })?;
                    *slot = Some(strip_one_newline(&text));
                }
            }
        }
        Ok(lib)
    }

    /// `load_dir` on `ATRIS_PROMPT_DIR` when set, built-ins otherwise.
    pub fn from_env() -> Result<Self, PromptError> {
        match std::env::var_os(PROMPT_DIR_ENV) {
            Some(dir) => Self::load_dir(Path::new(&dir)),
            None => Ok(Self::builtin()),
        }
    }

    pub fn template(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }

    /// Hex SHA-256 over every template part, in a fixed order.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for t in self.templates.values() {
            for part in [&t.system, &t.user] {
                hasher.update(t.name.id().as_bytes());
                hasher.update([0]);
                if let Some(text) = part {
                    hasher.update(text.as_bytes());
                }
                hasher.update([0]);
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn render(&self, name: TemplateName, bindings: &[(&str, &str)]) -> Result<RenderedPrompt, PromptError> {
        let t = self.template(name);
        let part = |text: &Option<String>| -> Result<Option<String>, PromptError> {
            text.as_deref()
                .map(|body| render_text(name.id(), body, bindings))
                .transpose()
        };
        Ok(RenderedPrompt {
            system: part(&t.system)?,
            user: part(&t.user)?,
        })
    }
}

fn ident_len(s: &str) -> usize {
    let mut chars = s.char_indices();
    match chars.next() {
        Some((_, c)) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return 0,
    }
    chars
        .find(|(_, c)| !(c.is_ascii_alphanumeric() || *c == '_'))
        .map(|(i, _)| i)
        .unwrap_or(s.len())
}

/// Recognizes `{name}`, `{#name}` or `{/name}` at the start of `s`.
fn marker(s: &str) -> Option<(char, &str, usize)> {
    let rest = s.strip_prefix('{')?;
    let (kind, rest) = match rest.chars().next()? {
        c @ ('#' | '/') => (c, &rest[1..]),
        _ => (' ', rest),
    };
    let n = ident_len(rest);
    if n == 0 || !rest[n..].starts_with('}') {
        return None;
    }
    let consumed = 1 + usize::from(kind != ' ') + n + 1;
    Some((kind, &rest[..n], consumed))
}

fn lookup<'a>(bindings: &[(&str, &'a str)], name: &str) -> Option<&'a str> {
    bindings.iter().find(|(k, _)| *k == name).map(|(_, v)| *v)
}

fn render_text(template: &str, body: &str, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(body.len());
    let mut i = 0;
    while i < body.len() {
        let rest = &body[i..];
        let Some(brace) = rest.find('{') else {
            out.push_str(rest);
            break;
        };
        out.push_str(&rest[..brace]);
        i += brace;
        match marker(&body[i..]) {
            Some((' ', name, consumed)) => {
                let value = lookup(bindings, name).ok_or_else(|| PromptError::MissingBinding {
                    template: template.into(),
                    placeholder: name.into(),
                })?;
                out.push_str(value);
                i += consumed;
            }
            Some(('#', name, consumed)) => {
                let close = format!("{{/{name}}}");
                let inner_start = i + consumed;
                let Some(len) = body[inner_start..].find(&close) else {
                    return Err(PromptError::UnterminatedSection {
                        template: template.into(),
                        section: name.into(),
                    });
                };
                let value = lookup(bindings, name).ok_or_else(|| PromptError::MissingBinding {
                    template: template.into(),
                    placeholder: name.into(),
                })?;
                if !value.is_empty() {
                    let inner = &body[inner_start..inner_start + len];
                    out.push_str(&render_text(template, inner, bindings)?);
                }
                i = inner_start + len + close.len();
            }
            _ => {
                out.push('{');
                i += 1;
            }
        }
    }
    Ok(out)
}

/// Tool specs as a pretty-printed JSON list of documents.
pub fn render_tool_documents(tools: &[ToolSpec]) -> String {
    let docs: Vec<_> = tools.iter().map(ToolSpec::to_document).collect();
    serde_json::to_string_pretty(&docs).expect("tool documents serialize")
}

fn role_label(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
        Role::Tool => "tool",
    }
}

pub const EMPTY_HISTORY: &str = "(none)";

/// One `role: content` line per message; system messages are skipped.
pub fn render_history(messages: &[Message]) -> String {
    let lines: Vec<String> = messages
        .iter()
        .filter(|m| m.role != Role::System)
        .map(|m| format!("{}: {}", role_label(m.role), m.content))
        .collect();
    if lines.is_empty() {
        EMPTY_HISTORY.to_string()
    } else {
        lines.join("\n")
    }
}

/// `Action:`/`Return:` line pairs per step, then `Reply:` if the turn closed.
pub fn render_steps(steps: &[Step], closing_reply: Option<&str>) -> String {
    let mut lines = Vec::new();
    for step in steps {
        lines.push(format!("Action: {}", render_call_list(&step.calls)));
        lines.push(format!("Return: {}", step.outcome.render_payloads()));
    }
    if let Some(reply) = closing_reply {
        lines.push(format!("Reply: {reply}"));
    }
    if lines.is_empty() {
        EMPTY_HISTORY.to_string()
    } else {
        lines.join("\n")
    }
}

/// One `<Attempt>` block; evaluation and suggestion appear only together.
pub fn render_attempt_block(action: &str, feedback: Option<(&str, &str)>) -> String {
    let mut parts = vec!["<Attempt>".to_string(), format!("<Action>{action}</Action>")];
    if let Some((evaluation, suggestion)) = feedback {
        parts.push(format!("<Evaluation>{evaluation}</Evaluation>"));
        parts.push(format!("<Suggestion>{suggestion}</Suggestion>"));
    }
    parts.push("</Attempt>".to_string());
    parts.join("\n\n")
}

pub fn join_attempt_blocks(blocks: &[String]) -> String {
    blocks.join("\n\n")
}

/// Rough token count: every alphanumeric run costs one token per four
/// characters (rounded up), every other non-whitespace character costs one.
pub fn estimate_context(text: &str) -> usize {
    let mut tokens = 0usize;
    let mut run = 0usize;
    for c in text.chars() {
        if c.is_alphanumeric() {
            run += 1;
            continue;
        }
        tokens += run.div_ceil(4);
        run = 0;
        if !c.is_whitespace() {
            tokens += 1;
        }
    }
    tokens + run.div_ceil(4)
}

/// Per-message framing overhead added by `estimate_messages`.
pub const MESSAGE_OVERHEAD: usize = 4;

pub fn estimate_messages(messages: &[Message]) -> usize {
    messages
        .iter()
        .map(|m| estimate_context(&m.content) + MESSAGE_OVERHEAD)
        .sum()
}
