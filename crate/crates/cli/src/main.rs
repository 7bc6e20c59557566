//! `atris`: run agents with decision-time simulation over task sets,
//! generate simulator training corpora, score simulator fidelity, and print
//! run reports.

mod backends;
mod config;
mod datagen;
mod run;
mod rundir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use atris_core::backend::RemoteConfig;
use atris_core::metrics::{fidelity_report, Embedder, FidelityPair, HashedBagEmbedder};
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{load_optional, RunOverrides, RunSettings, SimulatorChoice};
use crate::datagen::{DatagenOverrides, DatagenSettings};

#[derive(Parser)]
#[command(
    name = "atris",
    version,
    about = "Risk-aware test-time scaling for tool-using agents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Run methods over a task set.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Task file (JSON array or JSON lines), or `demo`.
        #[arg(long)]
        tasks: Option<String>,
        /// atris-seq, atris-par, direct, bon or seqrev; repeatable.
        #[arg(long = "method", value_delimiter = ',')]
        methods: Vec<String>,
        /// Budgets, e.g. `--n 0,3,5`.
        #[arg(long, value_delimiter = ',')]
        n: Vec<usize>,
        /// scripted:demo, scripted:<script.json>, replay:<exchanges.jsonl> or remote:<model>.
        #[arg(long)]
        backend: Option<String>,
        #[arg(long, value_enum)]
        simulator: Option<SimulatorChoice>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        prompt_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Success probability of the scripted demo agent.
        #[arg(long)]
        demo_p: Option<f64>,
    },
    /// Build a simulator training corpus.
    Datagen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Episode queries (JSON lines), or `demo`.
        #[arg(long)]
        queries: Option<String>,
        #[arg(long = "backend")]
        backends: Vec<String>,
        #[arg(long)]
        env: Option<String>,
        /// Failure quota as `label=count`; repeatable.
        #[arg(long = "quota", value_parser = parse_quota)]
        quota: Vec<(String, usize)>,
        #[arg(long, value_enum)]
        rebalance: Option<Switch>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        prompt_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Similarity between simulated and ground-truth returns.
    Fidelity {
        /// JSON lines of {"candidate": ..., "perfect": ...}.
        #[arg(long)]
        pairs: PathBuf,
        /// `hashed` or `remote:<model>`.
        #[arg(long, default_value = "hashed")]
        embedder: String,
    },
    /// Print the tables of a finished run.
    Report { run_dir: PathBuf },
}

fn parse_quota(s: &str) -> Result<(String, usize), String> {
    let (label, count) = s.split_once('=').ok_or_else(|| format!("`{s}` is not label=count"))?;
    let count = count.parse().map_err(|e| format!("`{s}`: {e}"))?;
    Ok((label.to_string(), count))
}

fn read_pairs(path: &Path) -> Result<Vec<FidelityPair>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let pairs = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect::<Result<Vec<FidelityPair>>>()?;
    if pairs.is_empty() {
        bail!("{} contains no pairs", path.display());
    }
    Ok(pairs)
}

fn cmd_fidelity(pairs_path: &Path, embedder: &str) -> Result<()> {
    let pairs = read_pairs(pairs_path)?;
    let embedder: Box<dyn Embedder> = match embedder.split_once(':') {
        None if embedder == "hashed" => Box::new(HashedBagEmbedder::default()),
        Some(("remote", model)) => {
            let config = RemoteConfig::from_env(model).context("ATRIS_API_BASE must be set for remote embedders")?;
            Box::new(atris_core::backend::RemoteEmbedder::new(config))
        }
        _ => bail!("unknown embedder `{embedder}` (expected hashed or remote:<model>)"),
    };
    let tuples: Vec<(&str, &str)> = pairs
        .iter()
        .map(|p| (p.candidate.as_str(), p.perfect.as_str()))
        .collect();
    let report = fidelity_report(&tuples, embedder.as_ref())?;
    println!("pairs            {}", report.pairs);
    println!("mean similarity  {:.4}", report.mean_similarity);
    println!("hf ratio (>{})  {:.4}", report.threshold, report.hf_ratio);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            tasks,
            methods,
            n,
            backend,
            simulator,
            jobs,
            seed,
            prompt_dir,
            out,
            demo_p,
        } => {
            let file = load_optional(config.as_deref())?;
            let settings = RunSettings::resolve(
                file,
                RunOverrides {
                    seed,
                    tasks,
                    backend,
                    simulator,
                    methods,
                    n,
                    jobs,
                    out_dir: out,
                    prompt_dir,
                    demo_p,
                },
            )?;
            run::cmd_run(&settings).map(|_| ())
        }
        Command::Datagen {
            config,
            queries,
            backends,
            env,
            quota,
            rebalance,
            samples,
            seed,
            prompt_dir,
            out,
        } => {
            let file = load_optional(config.as_deref())?;
            let settings = DatagenSettings::resolve(
                file,
                DatagenOverrides {
                    seed,
                    queries,
                    backends,
                    env,
                    rebalance: rebalance.map(|s| matches!(s, Switch::On)),
                    samples,
                    quota,
                    out_dir: out,
                    prompt_dir,
                },
            )?;
            datagen::cmd_datagen(&settings).map(|_| ())
        }
        Command::Fidelity { pairs, embedder } => cmd_fidelity(&pairs, &embedder),
        Command::Report { run_dir } => run::cmd_report(&run_dir),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
