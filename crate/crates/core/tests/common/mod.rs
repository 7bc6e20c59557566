#![allow(dead_code)]

use atris_core::backend::{AgentRole, ChatBackend, RecordingBackend, Script, ScriptedBackend};
use atris_core::conversation::ToolCall;
use atris_core::conversation::{Message, ToolSpec};
use atris_core::demo::{demo_script, VAULT_QUERY};
use atris_core::environment::{self, Environment};
use atris_core::orchestrator::{RunConfig, TurnContext};
use atris_core::parser::{parse_action_output, ActionOutput};
use atris_core::prompts::PromptLibrary;

pub fn recording(script: Script) -> RecordingBackend<ScriptedBackend> {
    RecordingBackend::new(ScriptedBackend::new(script).expect("valid script"))
}

pub fn demo(p: f64) -> RecordingBackend<ScriptedBackend> {
    recording(demo_script(p, 11))
}

pub fn vault() -> Box<dyn Environment> {
    environment::create("vault", None).unwrap()
}

pub struct Turn {
    pub prompts: PromptLibrary,
    pub config: RunConfig,
    pub tools: Vec<ToolSpec>,
    pub history: Vec<Message>,
    pub query: String,
}

impl Turn {
    pub fn new(config: RunConfig, env: &dyn Environment, query: &str) -> Self {
        Turn {
            prompts: PromptLibrary::builtin(),
            config,
            tools: env.tools().to_vec(),
            history: Vec::new(),
            query: query.to_string(),
        }
    }

    pub fn vault(config: RunConfig) -> Self {
        Self::new(config, vault().as_ref(), VAULT_QUERY)
    }

    pub fn ctx<'a>(&'a self, backend: &'a dyn ChatBackend, seed: u64) -> TurnContext<'a> {
        TurnContext {
            backend,
            prompts: &self.prompts,
            config: &self.config,
            tools: &self.tools,
            history: &self.history,
            query: &self.query,
            seed,
        }
    }
}

pub fn config(n: usize) -> RunConfig {
    RunConfig {
        n_attempts: n,
        ..RunConfig::default()
    }
}

/// Last user message of every recorded request for `role`.
pub fn user_prompts(rec: &RecordingBackend<ScriptedBackend>, role: AgentRole) -> Vec<String> {
    rec.requests_for(role)
        .into_iter()
        .map(|r| {
            r.messages
                .iter()
                .rev()
                .find(|m| m.role == atris_core::conversation::Role::User)
                .map(|m| m.content.clone())
                .unwrap_or_default()
        })
        .collect()
}

pub fn calls(text: &str) -> Vec<ToolCall> {
    match parse_action_output(text).unwrap() {
        ActionOutput::Calls(c) => c,
        other => panic!("expected calls, got {other:?}"),
    }
}

const NAMES: &[&str] = &["A", "B", "C", "Z", ""];
const PATHS: &[&str] = &[
    "/home/user/todo.txt",
    "/home/user/notes",
    "/home/user/notes/a.txt",
    "/etc/motd",
    "/tmp/x",
    "relative.txt",
    "/",
];

fn random_literal(rng: &mut impl rand::Rng, param: &str, type_tag: &str) -> atris_core::conversation::Literal {
    use atris_core::conversation::Literal;
    if rng.gen_bool(0.05) {
        return Literal::Null;
    }
    match type_tag {
        "integer" => Literal::Int(rng.gen_range(-20..=160)),
        "boolean" => Literal::Bool(rng.gen()),
        _ if param == "path" => Literal::Str(PATHS[rng.gen_range(0..PATHS.len())].into()),
        _ if param == "content" => Literal::Str(["", "hello", "call mom"][rng.gen_range(0..3)].into()),
        _ => Literal::Str(NAMES[rng.gen_range(0..NAMES.len())].into()),
    }
}

/// A random batch over `env`'s tools, with occasional missing or unknown
/// arguments and unknown tools.
pub fn random_batch(env: &dyn Environment, rng: &mut impl rand::Rng) -> Vec<ToolCall> {
    let tools = env.tools();
    (0..rng.gen_range(1..=3))
        .map(|_| {
            if rng.gen_bool(0.05) {
                return ToolCall::new("launch", vec![]).unwrap();
            }
            let spec = &tools[rng.gen_range(0..tools.len())];
            let mut args = Vec::new();
            for (name, p) in &spec.parameters {
                if rng.gen_bool(0.05) {
                    continue;
                }
                args.push((name.clone(), random_literal(rng, name, &p.type_tag)));
            }
            if rng.gen_bool(0.03) {
                args.push(("bogus".into(), atris_core::conversation::Literal::Int(1)));
            }
            ToolCall::new(spec.name.clone(), args).unwrap()
        })
        .collect()
}

/// `len` random batches from a seed.
pub fn random_sequence(env: &dyn Environment, seed: u64, len: usize) -> Vec<Vec<ToolCall>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| random_batch(env, &mut rng)).collect()
}
