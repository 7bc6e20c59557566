//! Line-delimited transcript records for runs.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::orchestrator::TurnResult;
use crate::prompts::render_steps;
use crate::task::{Method, TaskRun};

/// Which attempt a record belongs to: a 1-based simulated attempt, or the
/// committed execution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttemptSlot {
    Attempt(usize),
    Final(FinalTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalTag {
    Final,
}

impl AttemptSlot {
    pub const FINAL: AttemptSlot = AttemptSlot::Final(FinalTag::Final);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    /// A simulated attempt with its evaluation.
    Attempt,
    Summary,
    /// A step-level candidate that was scored but maybe not executed.
    Candidate,
    /// A batch executed against the real environment.
    CommittedStep,
    FinalReply,
    /// Turn-level bookkeeping: ledger, discard flag, incidents.
    Turn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub task_id: String,
    pub method: Method,
    pub n: usize,
    pub turn_id: usize,
    pub attempt_index: AttemptSlot,
    pub record_kind: RecordKind,
    pub body: Value,
}

pub fn turn_records(
    task_id: &str,
    method: Method,
    n: usize,
    turn_id: usize,
    turn: &TurnResult,
) -> Vec<TranscriptRecord> {
    let record = |slot, kind, body| TranscriptRecord {
        task_id: task_id.to_string(),
        method,
        n,
        turn_id,
        attempt_index: slot,
        record_kind: kind,
        body,
    };
    let mut out = Vec::new();
    for a in &turn.attempts {
        out.push(record(
            AttemptSlot::Attempt(a.index),
            RecordKind::Attempt,
            serde_json::to_value(a).expect("attempt serializes"),
        ));
    }
    if let Some(s) = &turn.summary {
        out.push(record(
            AttemptSlot::FINAL,
            RecordKind::Summary,
            serde_json::to_value(s).expect("summary serializes"),
        ));
    }
    for set in &turn.candidates {
        for (i, c) in set.candidates.iter().enumerate() {
            out.push(record(
                AttemptSlot::FINAL,
                RecordKind::Candidate,
                json!({ "step": set.step, "candidate": i, "winner": i == set.winner, "scored": c }),
            ));
        }
    }
    for (i, step) in turn.final_trajectory.steps.iter().enumerate() {
        out.push(record(
            AttemptSlot::FINAL,
            RecordKind::CommittedStep,
            json!({ "step": i, "rendered": render_steps(std::slice::from_ref(step), None), "detail": step }),
        ));
    }
    if let Some(reply) = &turn.final_trajectory.closing_reply {
        out.push(record(
            AttemptSlot::FINAL,
            RecordKind::FinalReply,
            json!({ "reply": reply }),
        ));
    }
    out.push(record(
        AttemptSlot::FINAL,
        RecordKind::Turn,
        json!({
            "discarded": turn.discarded,
            "ledger": turn.ledger,
            "incidents": turn.incidents,
            "final_state": turn.final_state,
        }),
    ));
    out
}

pub fn task_records(run: &TaskRun) -> Vec<TranscriptRecord> {
    run.turns
        .iter()
        .enumerate()
        .flat_map(|(i, t)| turn_records(&run.task_id, run.method, run.n, i, t))
        .collect()
}

pub fn write_records<W: Write>(out: &mut W, records: &[TranscriptRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(input: R) -> io::Result<Vec<TranscriptRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_serialization() {
        assert_eq!(serde_json::to_value(AttemptSlot::Attempt(3)).unwrap(), json!(3));
        assert_eq!(serde_json::to_value(AttemptSlot::FINAL).unwrap(), json!("final"));
        let back: AttemptSlot = serde_json::from_value(json!("final")).unwrap();
        assert_eq!(back, AttemptSlot::FINAL);
        let back: AttemptSlot = serde_json::from_value(json!(2)).unwrap();
        assert_eq!(back, AttemptSlot::Attempt(2));
    }
}
