//! A canned scripted scenario on the reference environments. It backs the
//! CLI's `scripted:demo` backend and the end-to-end tests.
//!
//! The action agent is a coin flip per attempt: with probability `p` it
//! takes the good path, otherwise a path that fails on the real tools. The
//! evaluator passes exactly the attempts without error payloads, and the
//! summarizer emits a marker that makes the final execution replay the good
//! path whenever some attempt passed.

use serde_json::json;

use crate::backend::{AgentRole, Rule, Script, ScriptResponse};
use crate::task::{Expectation, TaskSpec};

pub const VAULT_QUERY: &str = "Move 30 from account A to account B, then tell me the balance of A.";
pub const FILEIO_QUERY: &str = "Save the text \"call mom\" in a new file /home/user/todo.txt.";

/// Recommendation marker that selects the good path in the final execution.
pub const REPLAY_MARKER: &str = "REPLAY_GOOD";

pub const VAULT_GOOD: [&str; 2] = [
    r#"[transfer(src="A", dst="B", amount=30)]"#,
    r#"[balance(account="A")]"#,
];
pub const VAULT_GOOD_REPLY: &str = "Moved 30 from A to B. A now holds 70.";
pub const VAULT_BAD: [&str; 1] = [r#"[transfer(src="A", dst="B", amount=150)]"#];
pub const VAULT_BAD_REPLY: &str = "I could not complete the transfer.";

pub const FILEIO_GOOD: [&str; 1] = [r#"[create_file(path="/home/user/todo.txt", content="call mom")]"#];
pub const FILEIO_BAD: [&str; 1] = [r#"[write_file(path="/home/user/todo.txt", content="call mom")]"#];

pub const PASS_EVALUATION: &str =
    "<Evaluation>Every call succeeded and the request is fulfilled.</Evaluation>\n<Result>1</Result>\n<Suggestion>None.</Suggestion>";
pub const FAIL_EVALUATION: &str = "<Evaluation>A call returned an error, so the request is not fulfilled.</Evaluation>\n<Result>0</Result>\n<Suggestion>Use arguments the environment accepts, such as an amount the source account can cover or a path that does not exist yet.</Suggestion>";

fn good_bad(p: f64, good: &[&str], good_reply: &str, bad: &[&str], bad_reply: &str) -> ScriptResponse {
    ScriptResponse::bernoulli(
        p,
        ScriptResponse::steps(good.iter().copied(), good_reply),
        ScriptResponse::steps(bad.iter().copied(), bad_reply),
    )
}

fn action(pattern: &str, response: ScriptResponse) -> Rule {
    Rule::new(response).role(AgentRole::Action).pattern(pattern)
}

/// The full demo script with per-attempt success probability `p`.
pub fn demo_script(p: f64, seed: u64) -> Script {
    let vault = regex_escape(VAULT_QUERY);
    let fileio = regex_escape(FILEIO_QUERY);
    let rules = vec![
        // Failure elicitation for the data pipeline.
        action(
            r"\[Target Failure\]\s+insufficient_funds",
            ScriptResponse::text(r#"[transfer(src="A", dst="B", amount=1000000000)]"#),
        ),
        action(r"\[Target Failure\]\s+unknown_account", ScriptResponse::text(r#"[balance(account="Z")]"#)),
        action(r"\[Target Failure\]\s+invalid_amount", ScriptResponse::text(r#"[deposit(account="A", amount=-5)]"#)),
        action(r"\[Target Failure\]\s+account_exists", ScriptResponse::text(r#"[open_account(name="A")]"#)),
        action(r"\[Target Failure\]\s+not_found", ScriptResponse::text(r#"[read_file(path="/nope")]"#)),
        action(
            r"\[Target Failure\]\s+permission_denied",
            ScriptResponse::text(r#"[write_file(path="/etc/motd", content="x")]"#),
        ),
        action(
            r"\[Target Failure\]\s+already_exists",
            ScriptResponse::text(r#"[create_file(path="/etc/motd", content="x")]"#),
        ),
        action(r"\[Target Failure\]\s+bad_path", ScriptResponse::text(r#"[read_file(path="relative.txt")]"#)),
        action(r"\[Target Failure\]", ScriptResponse::text(r#"[list_accounts()]"#)),
        // Final execution after a passing attempt.
        action(
            &format!("(?s){vault}.*{REPLAY_MARKER}"),
            ScriptResponse::steps(VAULT_GOOD, VAULT_GOOD_REPLY),
        ),
        action(
            &format!("(?s){fileio}.*{REPLAY_MARKER}"),
            ScriptResponse::steps(FILEIO_GOOD, "Saved."),
        ),
        action(&vault, good_bad(p, &VAULT_GOOD, VAULT_GOOD_REPLY, &VAULT_BAD, VAULT_BAD_REPLY)),
        action(&fileio, good_bad(p, &FILEIO_GOOD, "Saved.", &FILEIO_BAD, "The file could not be written.")),
        Rule::new(ScriptResponse::text("I cannot help with that request.")).role(AgentRole::Action),
        // Sequential revision evaluator (shares the self_eval role).
        Rule::new(ScriptResponse::text(
            r#"{"evaluation": "The transfer exceeds the source balance.", "suggestion": "Transfer an amount the source account can cover.", "score": 2}"#,
        ))
        .role(AgentRole::SelfEval)
        .pattern(r"(?s)\[Simulated Attempt\].*(amount=150|write_file\().*Assign a score"),
        Rule::new(ScriptResponse::text(
            r#"{"evaluation": "The step is consistent with the request.", "suggestion": "Continue.", "score": 9}"#,
        ))
        .role(AgentRole::SelfEval)
        .pattern("Assign a score"),
        // Task-level evaluator: pass exactly when no error payload came back.
        Rule::new(ScriptResponse::text(FAIL_EVALUATION))
            .role(AgentRole::SelfEval)
            .pattern(r#"Return: \[[^\n]*"error""#),
        Rule::new(ScriptResponse::text(PASS_EVALUATION)).role(AgentRole::SelfEval),
        // Weighted BoN scorer.
        Rule::new(ScriptResponse::text(r#"{"evaluation": "Likely to fail on the real tools.", "score": 2}"#))
            .role(AgentRole::Scorer)
            .pattern(r"(?s)\[Simulated Attempt\].*(amount=150|write_file\()"),
        Rule::new(ScriptResponse::text(r#"{"evaluation": "Looks correct.", "score": 9}"#)).role(AgentRole::Scorer),
        // Summarizer: replay the good path if any attempt passed.
        Rule::new(ScriptResponse::text(format!(
            r#"{{"recommendation": "{REPLAY_MARKER}: repeat the attempt that passed, with the same arguments.", "rationale": "It succeeded in simulation."}}"#
        )))
        .role(AgentRole::Summarizer)
        .pattern(r"<Result>1</Result>"),
        Rule::new(ScriptResponse::text(
            r#"{"recommendation": "No attempt succeeded; check balances and paths before acting.", "rationale": "Every simulated attempt failed."}"#,
        ))
        .role(AgentRole::Summarizer),
        // Learned simulator stand-in: always reports success.
        Rule::new(ScriptResponse::text(r#"<Output>[{"status": "ok"}]</Output>"#)).role(AgentRole::Simulator),
    ];
    Script::new(seed, rules)
}

fn regex_escape(text: &str) -> String {
    regex::escape(text)
}

/// `count` single-turn vault tasks with distinct seeds.
pub fn vault_tasks(count: usize) -> Vec<TaskSpec> {
    (0..count)
        .map(|i| TaskSpec {
            task_id: format!("vault-{i:05}"),
            env_id: "vault".into(),
            initial_state: None,
            turns: vec![VAULT_QUERY.into()],
            expectation: Some(Expectation {
                final_state: Some(json!({"accounts": {"A": 70, "B": 30}})),
                milestones: vec![r#"transfer(src="A", dst="B", amount=30)"#.into()],
            }),
            tools: None,
            seed: i as u64,
        })
        .collect()
}

pub fn fileio_task(i: usize) -> TaskSpec {
    TaskSpec {
        task_id: format!("fileio-{i:05}"),
        env_id: "fileio".into(),
        initial_state: None,
        turns: vec![FILEIO_QUERY.into()],
        expectation: Some(Expectation {
            final_state: None,
            milestones: vec![r#"create_file(path="/home/user/todo.txt", content="call mom")"#.into()],
        }),
        tools: None,
        seed: i as u64,
    }
}

/// A mixed task set for the CLI demo.
pub fn demo_tasks() -> Vec<TaskSpec> {
    let mut tasks = vault_tasks(6);
    tasks.extend((0..4).map(fileio_task));
    tasks
}
