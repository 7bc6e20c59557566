//! Configuration files and their resolution against command-line flags.
//!
//! Paths inside a config file are relative to the file's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use atris_core::orchestrator::RunConfig;
use atris_core::task::Method;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::BackendSpec;

pub const DEFAULT_DEMO_P: f64 = 0.3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SimulatorChoice {
    /// Replays calls on a shadow copy of the real environment.
    #[default]
    Perfect,
    /// Asks the backend's simulator role.
    Model,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub tasks: Option<String>,
    pub backend: Option<String>,
    pub simulator: Option<SimulatorChoice>,
    pub methods: Option<Vec<String>>,
    pub n: Option<Vec<usize>>,
    pub jobs: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub prompt_dir: Option<PathBuf>,
    /// Success probability of the `scripted:demo` action agent.
    pub demo_p: Option<f64>,
    /// Orchestrator knobs; `n_attempts` and `mode` are set per method and N.
    pub orchestrator: Option<RunConfig>,
    pub datagen: Option<DatagenFile>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenFile {
    pub queries: Option<String>,
    pub backends: Option<Vec<String>>,
    pub env: Option<String>,
    pub rebalance: Option<bool>,
    pub samples: Option<usize>,
    pub tries: Option<usize>,
    #[serde(default)]
    pub quota: BTreeMap<String, usize>,
}

impl FileConfig {
    /// Reads `path`; relative paths inside are rebased onto its directory.
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut String| {
            if !is_builtin(p) && Path::new(p.as_str()).is_relative() {
                *p = dir.join(&*p).display().to_string();
            }
        };
        if let Some(t) = cfg.tasks.as_mut() {
            rebase(t);
        }
        if let Some(q) = cfg.datagen.as_mut().and_then(|d| d.queries.as_mut()) {
            rebase(q);
        }
        for p in [cfg.out_dir.as_mut(), cfg.prompt_dir.as_mut()].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }
}

fn is_builtin(source: &str) -> bool {
    source == "demo"
}

/// Reads `path` when given, else an empty config.
pub fn load_optional(path: Option<&Path>) -> Result<FileConfig> {
    path.map(FileConfig::load).transpose().map(Option::unwrap_or_default)
}

/// Picks the run seed, warning when none was given anywhere.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> u64 {
    flag.or(file).unwrap_or_else(|| {
        tracing::warn!("no seed given; using 0");
        0
    })
}

/// Everything that determines a run's results.
#[derive(Clone, Debug, Serialize)]
pub struct RunSettings {
    pub seed: u64,
    pub tasks: String,
    pub backend: String,
    pub simulator: SimulatorChoice,
    pub methods: Vec<Method>,
    pub n: Vec<usize>,
    pub demo_p: f64,
    pub prompt_dir: Option<PathBuf>,
    pub orchestrator: RunConfig,
    #[serde(skip)]
    pub jobs: usize,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

/// Flag values that override the config file.
#[derive(Debug, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub tasks: Option<String>,
    pub backend: Option<String>,
    pub simulator: Option<SimulatorChoice>,
    pub methods: Vec<String>,
    pub n: Vec<usize>,
    pub jobs: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub prompt_dir: Option<PathBuf>,
    pub demo_p: Option<f64>,
}

impl RunSettings {
    pub fn resolve(file: FileConfig, flags: RunOverrides) -> Result<RunSettings> {
        let mut errors = Vec::new();
        let tasks = flags.tasks.or(file.tasks).unwrap_or_else(|| "demo".into());
        if !is_builtin(&tasks) && !Path::new(&tasks).is_file() {
            errors.push(format!("tasks: file not found: {tasks}"));
        }
        let backend = flags.backend.or(file.backend).unwrap_or_else(|| "scripted:demo".into());
        if let Err(e) = backend.parse::<BackendSpec>() {
            errors.push(format!("backend: {e}"));
        }
        let method_names = if flags.methods.is_empty() {
            file.methods.unwrap_or_else(|| vec!["atris-seq".into()])
        } else {
            flags.methods
        };
        let mut methods = Vec::new();
        for (i, name) in method_names.iter().enumerate() {
            match Method::parse(name) {
                Ok(m) => methods.push(m),
                Err(e) => errors.push(format!("methods[{i}]: {e}")),
            }
        }
        if method_names.is_empty() {
            errors.push("methods: at least one method is required".into());
        }
        let n = if flags.n.is_empty() {
            file.n.unwrap_or_else(|| vec![5])
        } else {
            flags.n
        };
        if n.is_empty() {
            errors.push("n: at least one budget is required".into());
        }
        let jobs = flags.jobs.or(file.jobs).unwrap_or(1);
        if jobs == 0 {
            errors.push("jobs: must be at least 1".into());
        }
        let demo_p = flags.demo_p.or(file.demo_p).unwrap_or(DEFAULT_DEMO_P);
        if !(0.0..=1.0).contains(&demo_p) {
            errors.push(format!("demo_p: {demo_p} is outside [0, 1]"));
        }
        let prompt_dir = flags.prompt_dir.or(file.prompt_dir);
        if let Some(dir) = &prompt_dir {
            if !dir.is_dir() {
                errors.push(format!("prompt_dir: not a directory: {}", dir.display()));
            }
        }
        let mut orchestrator = file.orchestrator.unwrap_or_default();
        let seed = resolve_seed(flags.seed, file.seed);
        orchestrator.seed = seed;
        if let Err(e) = orchestrator.validate() {
            errors.push(format!("orchestrator: {e}"));
        }
        if !errors.is_empty() {
            bail!("invalid configuration:\n  {}", errors.join("\n  "));
        }
        Ok(RunSettings {
            seed,
            tasks,
            backend,
            simulator: flags.simulator.or(file.simulator).unwrap_or_default(),
            methods,
            n,
            demo_p,
            prompt_dir,
            orchestrator,
            jobs,
            out_dir: flags.out_dir.or(file.out_dir).unwrap_or_else(|| "runs".into()),
        })
    }

    /// Budgets to run for `method`; direct execution has no budget.
    pub fn budgets(&self, method: Method) -> Vec<usize> {
        if method == Method::Direct {
            vec![0]
        } else {
            self.n.clone()
        }
    }
}

/// Hex SHA-256 of a value's JSON form.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("settings serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
