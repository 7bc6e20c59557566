//! Task scoring, simulator fidelity, and API-usage reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{AgentRole, RoleUsage, UsageLedger};
use crate::conversation::{Step, ToolCall};
use crate::environment::{EnvError, EnvironmentState};
use crate::simulator::{simulate_total, PerfectSimulator, Simulator};
use crate::task::{Method, TaskRun, TaskSpec};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("malformed expectation for task {task_id}: {message}")]
    MalformedExpectation { task_id: String, message: String },
    #[error("fidelity report needs at least one pair")]
    EmptyPairs,
    #[error("embedding failed: {0}")]
    Embedding(String),
    #[error(transparent)]
    Environment(#[from] EnvError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreReason {
    StateMatch,
    MilestoneMatch,
    Mismatch,
    Discarded,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task_id: String,
    pub success: bool,
    pub reason: ScoreReason,
}

/// True when `needle` occurs in `haystack` as an ordered subsequence.
fn is_subsequence(needle: &[String], haystack: &[String]) -> bool {
    let mut it = haystack.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}

/// Succeeds iff the final state matches (when expected) and every milestone
/// call was committed in order (when listed).
pub fn score_task(task: &TaskSpec, run: &TaskRun) -> Result<TaskScore, MetricsError> {
    let malformed = |message: String| MetricsError::MalformedExpectation {
        task_id: task.task_id.clone(),
        message,
    };
    let expectation = task
        .expectation
        .as_ref()
        .ok_or_else(|| malformed("no expectation".into()))?;
    expectation.validate().map_err(malformed)?;
    let score = |success, reason| TaskScore {
        task_id: task.task_id.clone(),
        success,
        reason,
    };
    if run.discarded {
        return Ok(score(false, ScoreReason::Discarded));
    }
    let state_ok = expectation.final_state.as_ref().map(|blob| {
        let expected = EnvironmentState {
            env_id: task.env_id.clone(),
            blob: blob.clone(),
            version: 0,
        };
        expected.fingerprint() == run.final_state.fingerprint()
    });
    let milestones = expectation.canonical_milestones().map_err(malformed)?;
    let calls_ok = is_subsequence(&milestones, &run.committed_calls());
    Ok(match state_ok {
        Some(true) if calls_ok => score(true, ScoreReason::StateMatch),
        None if calls_ok => score(true, ScoreReason::MilestoneMatch),
        _ => score(false, ScoreReason::Mismatch),
    })
}

/// Maps text to a fixed-dimension vector.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>, MetricsError>;
}

/// Deterministic bag-of-tokens vectorizer: lowercase alphanumeric runs are
/// hashed into `dim` buckets and counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HashedBagEmbedder {
    pub dim: usize,
}

impl Default for HashedBagEmbedder {
    fn default() -> Self {
        HashedBagEmbedder { dim: 4096 }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl HashedBagEmbedder {
    pub fn bucket(&self, token: &str) -> usize {
        let digest = Sha256::digest(token.as_bytes());
        (u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % self.dim as u64) as usize
    }
}

impl Embedder for HashedBagEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, MetricsError> {
        let mut v = vec![0.0; self.dim];
        for token in tokenize(text) {
            v[self.bucket(&token)] += 1.0;
        }
        Ok(v)
    }
}

impl Embedder for crate::backend::RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, MetricsError> {
        self.embed_text(text)
            .map_err(|e| MetricsError::Embedding(e.to_string()))
    }
}

/// Cosine similarity clamped to [-1, 1]; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity of the embeddings. Byte-identical texts score exactly
/// 1, including texts with no tokens.
pub fn similarity(a: &str, b: &str, embedder: &dyn Embedder) -> Result<f64, MetricsError> {
    if a == b {
        return Ok(1.0);
    }
    Ok(cosine(&embedder.embed(a)?, &embedder.embed(b)?))
}

/// Similarity above which a simulated output counts as high fidelity.
pub const HF_THRESHOLD: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub pairs: usize,
    pub mean_similarity: f64,
    /// Share of pairs strictly above `threshold`.
    pub hf_ratio: f64,
    pub threshold: f64,
}

/// Report over precomputed similarities. Negative similarities count as 0
/// toward the mean.
pub fn fidelity_from_similarities(similarities: &[f64], threshold: f64) -> Result<FidelityReport, MetricsError> {
    if similarities.is_empty() {
        return Err(MetricsError::EmptyPairs);
    }
    let n = similarities.len() as f64;
    let mean = similarities.iter().map(|s| s.clamp(0.0, 1.0)).sum::<f64>() / n;
    let high = similarities.iter().filter(|&&s| s > threshold).count();
    Ok(FidelityReport {
        pairs: similarities.len(),
        mean_similarity: mean,
        hf_ratio: high as f64 / n,
        threshold,
    })
}

pub fn fidelity_report<S: AsRef<str>>(
    pairs: &[(S, S)],
    embedder: &dyn Embedder,
) -> Result<FidelityReport, MetricsError> {
    let sims = pairs
        .iter()
        .map(|(a, b)| similarity(a.as_ref(), b.as_ref(), embedder))
        .collect::<Result<Vec<_>, _>>()?;
    fidelity_from_similarities(&sims, HF_THRESHOLD)
}

/// One recorded comparison between a candidate simulator and ground truth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FidelityPair {
    pub candidate: String,
    pub perfect: String,
}

/// Runs the same step sequence through `candidate` and the perfect
/// simulator from `base`, pairing their serialized payload lists step by
/// step. Each simulator conditions on its own earlier outputs.
pub fn fidelity_pairs(
    candidate: &dyn Simulator,
    base: &EnvironmentState,
    steps: &[Vec<ToolCall>],
    ledger: &mut UsageLedger,
) -> Result<Vec<FidelityPair>, MetricsError> {
    let mut cand_hist: Vec<Step> = Vec::new();
    let mut perfect_hist: Vec<Step> = Vec::new();
    let mut pairs = Vec::with_capacity(steps.len());
    for calls in steps {
        let c = simulate_total(candidate, calls, base, &cand_hist, ledger);
        let p = simulate_total(&PerfectSimulator, calls, base, &perfect_hist, ledger);
        pairs.push(FidelityPair {
            candidate: c.outcome.render_payloads(),
            perfect: p.outcome.render_payloads(),
        });
        cand_hist.push(Step::new(calls.clone(), c.outcome).expect("aligned payloads"));
        perfect_hist.push(Step::new(calls.clone(), p.outcome).expect("aligned payloads"));
    }
    Ok(pairs)
}

/// Mean per-step similarity of one turn.
pub fn turn_similarity(pairs: &[FidelityPair], embedder: &dyn Embedder) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyPairs);
    }
    let mut total = 0.0;
    for p in pairs {
        total += similarity(&p.candidate, &p.perfect, embedder)?;
    }
    Ok(total / pairs.len() as f64)
}

/// One row of the usage table: a (method, N) group.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub method: String,
    pub n: usize,
    pub runs: usize,
    pub total: RoleUsage,
    pub action: RoleUsage,
    pub self_eval: RoleUsage,
}

/// Groups ledgers by (method, N) in sorted order.
pub fn ledger_report<'a>(entries: impl IntoIterator<Item = (Method, usize, &'a UsageLedger)>) -> Vec<LedgerRow> {
    let mut groups: BTreeMap<(Method, usize), (usize, UsageLedger)> = BTreeMap::new();
    for (method, n, ledger) in entries {
        let g = groups.entry((method, n)).or_default();
        g.0 += 1;
        g.1.absorb(ledger);
    }
    groups
        .into_iter()
        .map(|((method, n), (runs, ledger))| LedgerRow {
            method: method.to_string(),
            n,
            runs,
            total: ledger.total(),
            action: ledger.role(AgentRole::Action),
            self_eval: ledger.role(AgentRole::SelfEval),
        })
        .collect()
}

pub fn ledger_report_for_runs(runs: &[TaskRun]) -> Vec<LedgerRow> {
    ledger_report(runs.iter().map(|r| (r.method, r.n, &r.ledger)))
}

/// Plain-text table: API calls, then completion and prompt tokens, each
/// split into total, action and self-evaluation columns.
pub fn render_ledger_table(rows: &[LedgerRow]) -> String {
    let header = [
        "method",
        "N",
        "runs",
        "calls",
        "calls.act",
        "calls.eval",
        "compl",
        "compl.act",
        "compl.eval",
        "prompt",
        "prompt.act",
        "prompt.eval",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.n.to_string(),
                r.runs.to_string(),
                r.total.api_calls.to_string(),
                r.action.api_calls.to_string(),
                r.self_eval.api_calls.to_string(),
                r.total.completion_tokens.to_string(),
                r.action.completion_tokens.to_string(),
                r.self_eval.completion_tokens.to_string(),
                r.total.prompt_tokens.to_string(),
                r.action.prompt_tokens.to_string(),
                r.self_eval.prompt_tokens.to_string(),
            ]
        })
        .collect();
    render_table(&header, &body)
}

fn render_table(header: &[&str], body: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            body.iter()
                .map(|r| r[i].len())
                .chain([header[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    for r in body {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

/// Accuracy per (method, N) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub method: String,
    pub n: usize,
    pub tasks: usize,
    pub successes: usize,
    pub discarded: usize,
    pub accuracy: f64,
}

pub fn accuracy_report(scored: &[(Method, usize, TaskScore)]) -> Vec<AccuracyRow> {
    let mut groups: BTreeMap<(Method, usize), (usize, usize, usize)> = BTreeMap::new();
    for (method, n, s) in scored {
        let g = groups.entry((*method, *n)).or_default();
        g.0 += 1;
        g.1 += usize::from(s.success);
        g.2 += usize::from(s.reason == ScoreReason::Discarded);
    }
    groups
        .into_iter()
        .map(|((method, n), (tasks, successes, discarded))| AccuracyRow {
            method: method.to_string(),
            n,
            tasks,
            successes,
            discarded,
            accuracy: successes as f64 / tasks as f64,
        })
        .collect()
}

pub fn render_accuracy_table(rows: &[AccuracyRow]) -> String {
    let header = ["method", "N", "tasks", "successes", "discarded", "accuracy"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.n.to_string(),
                r.tasks.to_string(),
                r.successes.to_string(),
                r.discarded.to_string(),
                format!("{:.4}", r.accuracy),
            ]
        })
        .collect();
    render_table(&header, &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsequence() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert!(is_subsequence(&s(&["a", "c"]), &s(&["a", "b", "c"])));
        assert!(!is_subsequence(&s(&["c", "a"]), &s(&["a", "b", "c"])));
        assert!(is_subsequence(&s(&[]), &s(&[])));
    }

    #[test]
    fn cosine_edge_cases() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-12);
        assert!((cosine(&[1.0, 0.0], &[-1.0, 0.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn strict_threshold() {
        let r = fidelity_from_similarities(&[1.0, 0.96, 0.95, 0.2], HF_THRESHOLD).unwrap();
        assert_eq!(r.hf_ratio, 0.5);
        assert!((r.mean_similarity - 0.7775).abs() < 1e-12);
        assert!(fidelity_from_similarities(&[], HF_THRESHOLD).is_err());
    }

    #[test]
    fn table_has_header_and_rows() {
        let mut l = UsageLedger::new();
        l.record(
            AgentRole::Action,
            crate::backend::Usage {
                prompt_tokens: 10,
                completion_tokens: 2,
            },
        );
        let rows = ledger_report([(Method::Direct, 0, &l)]);
        let table = render_ledger_table(&rows);
        assert_eq!(table.lines().count(), 2);
        assert!(table.starts_with("method"));
        assert!(table.contains("direct"));
    }
}
