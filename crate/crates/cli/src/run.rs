//! `atris run`: every method and budget over a task set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use atris_core::backend::{ChatBackend, RecordingBackend};
use atris_core::demo::demo_tasks;
use atris_core::metrics::{
    accuracy_report, ledger_report_for_runs, render_accuracy_table, render_ledger_table, score_task, AccuracyRow,
    LedgerRow, ScoreReason,
};
use atris_core::prompts::PromptLibrary;
use atris_core::simulator::{LearnedSimulator, PerfectSimulator, Simulator};
use atris_core::task::{load_tasks, Method, Runner, TaskRun, TaskSpec};
use atris_core::transcript::task_records;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::BackendSpec;
use crate::config::{content_hash, file_hash, RunSettings, SimulatorChoice};
use crate::rundir::{self, Manifest};

/// Outcome of one task under one (method, N).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub method: Method,
    pub n: usize,
    pub task_id: String,
    pub success: bool,
    pub reason: ScoreReason,
    pub api_calls: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFailure {
    pub method: Method,
    pub n: usize,
    pub task_id: String,
    pub error: String,
}

/// Contents of `results.json`. Holds nothing that varies between
/// reproductions of the same run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub accuracy: Vec<AccuracyRow>,
    pub ledger: Vec<LedgerRow>,
    pub tasks: Vec<TaskOutcome>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<TaskFailure>,
}

impl Results {
    pub fn render(&self) -> String {
        format!(
            "accuracy\n{}\nusage\n{}",
            render_accuracy_table(&self.accuracy),
            render_ledger_table(&self.ledger)
        )
    }
}

pub fn load_prompts(dir: Option<&Path>) -> Result<PromptLibrary> {
    Ok(match dir {
        Some(d) => PromptLibrary::load_dir(d)?,
        None => PromptLibrary::from_env()?,
    })
}

fn load_task_set(source: &str) -> Result<Vec<TaskSpec>> {
    if source == "demo" {
        return Ok(demo_tasks());
    }
    Ok(load_tasks(Path::new(source))?)
}

/// Runs everything `settings` describes and returns the run directory.
pub fn cmd_run(settings: &RunSettings) -> Result<PathBuf> {
    let spec: BackendSpec = crate::backends::parse(&settings.backend)?;
    let prompts = Arc::new(load_prompts(settings.prompt_dir.as_deref())?);
    let tasks = load_task_set(&settings.tasks)?;
    let inner = spec.build(settings.demo_p, settings.seed)?;
    let recorder = Arc::new(RecordingBackend::new(inner));
    let backend: Arc<dyn ChatBackend> = recorder.clone();
    let simulator: Box<dyn Simulator> = match settings.simulator {
        SimulatorChoice::Perfect => Box::new(PerfectSimulator),
        SimulatorChoice::Model => Box::new(LearnedSimulator::new(backend.clone(), prompts.clone())),
    };
    let runner = Runner {
        backend: backend.as_ref(),
        prompts: &prompts,
        config: &settings.orchestrator,
        simulator: simulator.as_ref(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.jobs)
        .build()
        .context("building worker pool")?;

    let config_hash = content_hash(settings);
    let (dir, created_at) = rundir::create(&settings.out_dir, &config_hash)?;
    tracing::info!(dir = %dir.display(), tasks = tasks.len(), "starting run");

    let mut runs: Vec<TaskRun> = Vec::new();
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    let mut scored = Vec::new();
    for &method in &settings.methods {
        for n in settings.budgets(method) {
            let results: Vec<_> = pool.install(|| {
                tasks
                    .par_iter()
                    .map(|t| runner.run_task(t, method, n).map_err(|e| e.to_string()))
                    .collect()
            });
            for (task, result) in tasks.iter().zip(results) {
                match result {
                    Ok(run) => {
                        let score = score_task(task, &run)?;
                        outcomes.push(TaskOutcome {
                            method,
                            n,
                            task_id: task.task_id.clone(),
                            success: score.success,
                            reason: score.reason,
                            api_calls: run.ledger.total().api_calls,
                        });
                        scored.push((method, n, score));
                        runs.push(run);
                    }
                    Err(error) => {
                        tracing::error!(task = %task.task_id, %method, n, %error, "task failed");
                        failures.push(TaskFailure {
                            method,
                            n,
                            task_id: task.task_id.clone(),
                            error,
                        });
                    }
                }
            }
        }
    }

    let results = Results {
        accuracy: accuracy_report(&scored),
        ledger: ledger_report_for_runs(&runs),
        tasks: outcomes,
        failures,
    };
    let records: Vec<_> = runs.iter().flat_map(task_records).collect();
    rundir::write_lines(&dir.join(rundir::TRANSCRIPTS), &records)?;
    rundir::write_json(&dir.join(rundir::RESULTS), &results)?;
    std::fs::write(dir.join(rundir::REPORT), results.render())?;
    if !matches!(spec, BackendSpec::Replay(_)) {
        recorder
            .save(&dir.join(rundir::EXCHANGES))
            .context("saving exchange log")?;
    }
    let manifest = Manifest {
        command: "run".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        created_at,
        config_hash,
        config: serde_json::to_value(settings)?,
        seed: settings.seed,
        task_seeds: tasks
            .iter()
            .map(|t| (t.task_id.clone(), t.derived_seed()))
            .collect::<BTreeMap<_, _>>(),
        template_digest: prompts.digest(),
        inputs_hash: (settings.tasks != "demo")
            .then(|| file_hash(Path::new(&settings.tasks)))
            .transpose()?,
    };
    rundir::write_json(&dir.join(rundir::MANIFEST), &manifest)?;

    print!("{}", results.render());
    println!("run directory: {}", dir.display());
    if !results.failures.is_empty() {
        bail!(
            "{} task run(s) failed; see {}",
            results.failures.len(),
            dir.join(rundir::RESULTS).display()
        );
    }
    Ok(dir)
}

/// `atris report`: re-renders the tables of a finished run.
pub fn cmd_report(dir: &Path) -> Result<()> {
    let results: Results = rundir::read_json(&dir.join(rundir::RESULTS))?;
    print!("{}", results.render());
    for f in &results.failures {
        println!("failed: {} {} N={}: {}", f.task_id, f.method, f.n, f.error);
    }
    Ok(())
}
