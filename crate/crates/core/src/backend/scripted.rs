//! Deterministic rule-based backend used as a test oracle.
//!
//! Rules are tried in order; the first whose matchers all hold answers. A
//! `bernoulli` response draws from a generator seeded by the script seed,
//! the request seed and the conversation up to the latest user message, so
//! every step of one attempt sees the same draw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AgentRole, BackendError, ChatBackend, ChatRequest, ChatResponse, Usage};
use crate::conversation::Role;
use crate::parser::TAG_ATTEMPT;
use crate::prompts::{estimate_context, estimate_messages};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptResponse {
    Text {
        text: String,
    },
    /// `steps[i]` at step `i` of the turn, then `reply` once steps run out.
    Steps {
        steps: Vec<String>,
        reply: String,
    },
    Bernoulli {
        p: f64,
        good: Box<ScriptResponse>,
        bad: Box<ScriptResponse>,
    },
}

impl ScriptResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ScriptResponse::Text { text: text.into() }
    }

    pub fn steps<S: Into<String>>(steps: impl IntoIterator<Item = S>, reply: impl Into<String>) -> Self {
        ScriptResponse::Steps {
            steps: steps.into_iter().map(Into::into).collect(),
            reply: reply.into(),
        }
    }

    pub fn bernoulli(p: f64, good: ScriptResponse, bad: ScriptResponse) -> Self {
        ScriptResponse::Bernoulli {
            p,
            good: Box::new(good),
            bad: Box::new(bad),
        }
    }

    fn check(&self) -> Result<(), String> {
        match self {
            ScriptResponse::Bernoulli { p, good, bad } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(format!("probability {p} outside [0, 1]"));
                }
                good.check()?;
                bad.check()
            }
            _ => Ok(()),
        }
    }

    fn resolve(&self, step: usize, rng: &mut ChaCha8Rng) -> String {
        match self {
            ScriptResponse::Text { text } => text.clone(),
            ScriptResponse::Steps { steps, reply } => steps.get(step).unwrap_or(reply).clone(),
            ScriptResponse::Bernoulli { p, good, bad } => {
                if rng.gen_bool(*p) {
                    good.resolve(step, rng)
                } else {
                    bad.resolve(step, rng)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<AgentRole>,
    /// Regex that must match the joined prompt text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    /// Regex that must not match the joined prompt text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absent: Option<String>,
    /// Assistant messages since the latest user message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    /// `<Attempt>` blocks in the latest user message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempts: Option<usize>,
    pub response: ScriptResponse,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

impl Rule {
    pub fn new(response: ScriptResponse) -> Self {
        Rule {
            role: None,
            pattern: None,
            absent: None,
            step: None,
            attempts: None,
            response,
            usage: None,
        }
    }

    pub fn role(mut self, role: AgentRole) -> Self {
        self.role = Some(role);
        self
    }

    pub fn pattern(mut self, pattern: impl Into<String>) -> Self {
        self.pattern = Some(pattern.into());
        self
    }

    pub fn absent(mut self, pattern: impl Into<String>) -> Self {
        self.absent = Some(pattern.into());
        self
    }

    pub fn step(mut self, step: usize) -> Self {
        self.step = Some(step);
        self
    }

    pub fn attempts(mut self, attempts: usize) -> Self {
        self.attempts = Some(attempts);
        self
    }

    pub fn usage(mut self, prompt_tokens: u64, completion_tokens: u64) -> Self {
        self.usage = Some(Usage {
            prompt_tokens,
            completion_tokens,
        });
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub seed: u64,
    pub rules: Vec<Rule>,
}

impl Script {
    pub fn new(seed: u64, rules: Vec<Rule>) -> Self {
        Script { seed, rules }
    }
}

struct Compiled {
    pattern: Option<Regex>,
    absent: Option<Regex>,
}

pub struct ScriptedBackend {
    script: Script,
    compiled: Vec<Compiled>,
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedBackend").field("script", &self.script).finish()
    }
}

fn compile(index: usize, source: &Option<String>) -> Result<Option<Regex>, BackendError> {
    source
        .as_deref()
        .map(Regex::new)
        .transpose()
        .map_err(|e| BackendError::InvalidRequest(format!("rule {index}: {e}")))
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Result<Self, BackendError> {
        let mut compiled = Vec::with_capacity(script.rules.len());
        for (i, rule) in script.rules.iter().enumerate() {
            rule.response
                .check()
                .map_err(|e| BackendError::InvalidRequest(format!("rule {i}: {e}")))?;
            compiled.push(Compiled {
                pattern: compile(i, &rule.pattern)?,
                absent: compile(i, &rule.absent)?,
            });
        }
        Ok(ScriptedBackend { script, compiled })
    }

    pub fn script(&self) -> &Script {
        &self.script
    }

    fn draw_rng(&self, rule_index: usize, request: &ChatRequest, last_user: usize) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.script.seed.to_le_bytes());
        hasher.update((rule_index as u64).to_le_bytes());
        hasher.update(request.seed.unwrap_or(0).to_le_bytes());
        for m in &request.messages[..=last_user] {
            hasher.update(m.content.as_bytes());
            hasher.update([0]);
        }
        ChaCha8Rng::from_seed(hasher.finalize().into())
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest, role: AgentRole) -> Result<ChatResponse, BackendError> {
        let text = request.prompt_text();
        let last_user = request.messages.iter().rposition(|m| m.role == Role::User).unwrap_or(0);
        let step = request.messages[last_user + 1..]
            .iter()
            .filter(|m| m.role == Role::Assistant)
            .count();
        let attempts = request.messages[last_user]
            .content
            .matches(&format!("<{TAG_ATTEMPT}>"))
            .count();

        for (i, (rule, compiled)) in self.script.rules.iter().zip(&self.compiled).enumerate() {
            if rule.role.is_some_and(|r| r != role)
                || rule.step.is_some_and(|s| s != step)
                || rule.attempts.is_some_and(|a| a != attempts)
                || compiled.absent.as_ref().is_some_and(|re| re.is_match(&text))
            {
                continue;
            }
            let captures = match &compiled.pattern {
                Some(re) => match re.captures(&text) {
                    Some(c) => Some(c),
                    None => continue,
                },
                None => None,
            };
            let mut rng = self.draw_rng(i, request, last_user);
            let mut reply = rule.response.resolve(step, &mut rng);
            if let Some(caps) = captures.filter(|c| c.len() > 1) {
                let mut expanded = String::new();
                caps.expand(&reply, &mut expanded);
                reply = expanded;
            }
            let usage = rule.usage.unwrap_or(Usage {
                prompt_tokens: estimate_messages(&request.messages) as u64,
                completion_tokens: estimate_context(&reply) as u64,
            });
            return Ok(ChatResponse { text: reply, usage });
        }
        let excerpt: String = {
            let chars: Vec<char> = text.chars().collect();
            chars[chars.len().saturating_sub(80)..].iter().collect()
        };
        Err(BackendError::NoMatchingRule { role, excerpt })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{complete, UsageLedger};
    use crate::conversation::Message;

    fn req(text: &str, seed: u64) -> ChatRequest {
        ChatRequest::new(vec![Message::user(text)], 1.0, 64)
            .unwrap()
            .with_seed(seed)
    }

    fn coin(p: f64, seed: u64) -> ScriptedBackend {
        ScriptedBackend::new(Script::new(
            seed,
            vec![Rule::new(ScriptResponse::bernoulli(
                p,
                ScriptResponse::text("good"),
                ScriptResponse::text("bad"),
            ))
            .role(AgentRole::Action)],
        ))
        .unwrap()
    }

    #[test]
    fn degenerate_probabilities() {
        for s in 0..50 {
            assert_eq!(
                coin(1.0, 3).complete(&req("q", s), AgentRole::Action).unwrap().text,
                "good"
            );
            assert_eq!(
                coin(0.0, 3).complete(&req("q", s), AgentRole::Action).unwrap().text,
                "bad"
            );
        }
    }

    #[test]
    fn bernoulli_frequency() {
        let b = coin(0.3, 7);
        let good = (0..10_000)
            .filter(|&s| b.complete(&req("q", s), AgentRole::Action).unwrap().text == "good")
            .count();
        let freq = good as f64 / 10_000.0;
        assert!((freq - 0.3).abs() <= 0.01, "frequency {freq}");
    }

    #[test]
    fn draw_is_stable_across_steps() {
        let b = ScriptedBackend::new(Script::new(
            1,
            vec![Rule::new(ScriptResponse::bernoulli(
                0.5,
                ScriptResponse::steps(["g1", "g2"], "gdone"),
                ScriptResponse::steps(["b1"], "bdone"),
            ))],
        ))
        .unwrap();
        for seed in 0..40 {
            let mut msgs = vec![Message::system("s"), Message::user("q")];
            let first = b
                .complete(
                    &ChatRequest::new(msgs.clone(), 1.0, 8).unwrap().with_seed(seed),
                    AgentRole::Action,
                )
                .unwrap()
                .text;
            msgs.push(Message::assistant(first.clone()));
            msgs.push(Message::tool("[{}]"));
            let second = b
                .complete(
                    &ChatRequest::new(msgs, 1.0, 8).unwrap().with_seed(seed),
                    AgentRole::Action,
                )
                .unwrap()
                .text;
            match first.as_str() {
                "g1" => assert_eq!(second, "g2"),
                "b1" => assert_eq!(second, "bdone"),
                other => panic!("unexpected {other}"),
            }
        }
    }

    #[test]
    fn matchers_and_captures() {
        let b = ScriptedBackend::new(Script::new(
            0,
            vec![
                Rule::new(ScriptResponse::text("<Result>0</Result>"))
                    .role(AgentRole::SelfEval)
                    .pattern(r#"Return: \[\{"error""#),
                Rule::new(ScriptResponse::text("<Result>1</Result>")).role(AgentRole::SelfEval),
                Rule::new(ScriptResponse::text("echo $1"))
                    .pattern(r"say (\w+)")
                    .usage(7, 3),
            ],
        ))
        .unwrap();
        let r = b
            .complete(&req(r#"Return: [{"error": "x"}]"#, 0), AgentRole::SelfEval)
            .unwrap();
        assert_eq!(r.text, "<Result>0</Result>");
        let r = b.complete(&req("Return: [{}]", 0), AgentRole::SelfEval).unwrap();
        assert_eq!(r.text, "<Result>1</Result>");
        let r = b.complete(&req("please say hello", 0), AgentRole::Action).unwrap();
        assert_eq!(r.text, "echo hello");
        assert_eq!(
            r.usage,
            Usage {
                prompt_tokens: 7,
                completion_tokens: 3
            }
        );
        assert!(matches!(
            b.complete(&req("nothing", 0), AgentRole::Action),
            Err(BackendError::NoMatchingRule { .. })
        ));
    }

    #[test]
    fn ledger_counts_calls() {
        let b = coin(1.0, 0);
        let mut ledger = UsageLedger::new();
        complete(&b, &mut ledger, &req("q", 1), AgentRole::Action).unwrap();
        complete(&b, &mut ledger, &req("q", 2), AgentRole::Action).unwrap();
        assert_eq!(ledger.role(AgentRole::Action).api_calls, 2);
        assert_eq!(ledger.total().api_calls, 2);
    }

    #[test]
    fn script_json_roundtrip() {
        let script = Script::new(
            9,
            vec![Rule::new(ScriptResponse::bernoulli(
                0.5,
                ScriptResponse::steps(["[f()]"], "done"),
                ScriptResponse::text("x"),
            ))
            .role(AgentRole::Action)
            .step(0)],
        );
        let json = serde_json::to_string(&script).unwrap();
        assert_eq!(serde_json::from_str::<Script>(&json).unwrap(), script);
    }

    #[test]
    fn bad_probability_rejected() {
        let s = Script::new(
            0,
            vec![Rule::new(ScriptResponse::bernoulli(
                1.5,
                ScriptResponse::text("a"),
                ScriptResponse::text("b"),
            ))],
        );
        assert!(ScriptedBackend::new(s).is_err());
    }
}
