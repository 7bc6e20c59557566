//! `atris datagen`: collect episodes, elicit quota failures, rebalance, emit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use atris_core::backend::{ChatBackend, RecordingBackend, UsageLedger};
use atris_core::datagen::{
    audit_corpus, collect_episodes, documented_keys, elicit_targeted_failures, emit_sft, sample_rebalanced,
    yield_summary, EpisodeQuery, OutcomeFrequencyTable, SftInstance,
};
use atris_core::demo::{FILEIO_QUERY, VAULT_QUERY};
use atris_core::environment;
use atris_core::orchestrator::{derive_seed, RunConfig};
use serde::Serialize;

use crate::backends::{self, BackendSpec};
use crate::config::{content_hash, file_hash, resolve_seed, FileConfig, DEFAULT_DEMO_P};
use crate::run::load_prompts;
use crate::rundir::{self, Manifest};

#[derive(Clone, Debug, Serialize)]
pub struct DatagenSettings {
    pub seed: u64,
    pub queries: String,
    pub backends: Vec<String>,
    pub env: String,
    pub rebalance: bool,
    pub samples: usize,
    pub tries: usize,
    pub quota: BTreeMap<String, usize>,
    pub demo_p: f64,
    pub prompt_dir: Option<PathBuf>,
    pub orchestrator: RunConfig,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Default)]
pub struct DatagenOverrides {
    pub seed: Option<u64>,
    pub queries: Option<String>,
    pub backends: Vec<String>,
    pub env: Option<String>,
    pub rebalance: Option<bool>,
    pub samples: Option<usize>,
    pub quota: Vec<(String, usize)>,
    pub out_dir: Option<PathBuf>,
    pub prompt_dir: Option<PathBuf>,
}

impl DatagenSettings {
    pub fn resolve(file: FileConfig, flags: DatagenOverrides) -> Result<DatagenSettings> {
        let section = file.datagen.unwrap_or_default();
        let mut errors = Vec::new();
        let queries = flags.queries.or(section.queries).unwrap_or_else(|| "demo".into());
        if queries != "demo" && !Path::new(&queries).is_file() {
            errors.push(format!("datagen.queries: file not found: {queries}"));
        }
        let backends = if flags.backends.is_empty() {
            section.backends.unwrap_or_else(|| vec!["scripted:demo".into()])
        } else {
            flags.backends
        };
        if backends.is_empty() {
            errors.push("datagen.backends: at least one backend is required".into());
        }
        for (i, b) in backends.iter().enumerate() {
            if let Err(e) = b.parse::<BackendSpec>() {
                errors.push(format!("datagen.backends[{i}]: {e}"));
            }
        }
        let env = flags.env.or(section.env).unwrap_or_else(|| "vault".into());
        let probe = environment::create(&env, None);
        let mut quota = section.quota;
        quota.extend(flags.quota);
        match &probe {
            Err(e) => errors.push(format!("datagen.env: {e}")),
            Ok(probe) => {
                for label in quota.keys() {
                    if !probe.failure_labels().contains(&label.as_str()) {
                        errors.push(format!(
                            "datagen.quota.{label}: not a documented failure label of {env}"
                        ));
                    }
                }
            }
        }
        let samples = flags.samples.or(section.samples).unwrap_or(200);
        let rebalance = flags.rebalance.or(section.rebalance).unwrap_or(true);
        if rebalance && samples == 0 {
            errors.push("datagen.samples: must be at least 1 when rebalancing".into());
        }
        let max_quota = quota.values().copied().max().unwrap_or(0);
        let tries = section.tries.unwrap_or(2 * max_quota).max(max_quota);
        if !errors.is_empty() {
            bail!("invalid configuration:\n  {}", errors.join("\n  "));
        }
        let seed = resolve_seed(flags.seed, file.seed);
        let mut orchestrator = file.orchestrator.unwrap_or_default();
        orchestrator.seed = seed;
        Ok(DatagenSettings {
            seed,
            queries,
            backends,
            env,
            rebalance,
            samples,
            tries,
            quota,
            demo_p: file.demo_p.unwrap_or(DEFAULT_DEMO_P),
            prompt_dir: flags.prompt_dir.or(file.prompt_dir),
            orchestrator,
            out_dir: flags.out_dir.or(file.out_dir).unwrap_or_else(|| "runs".into()),
        })
    }
}

fn load_queries(source: &str) -> Result<Vec<EpisodeQuery>> {
    if source == "demo" {
        return Ok([("vault", VAULT_QUERY), ("fileio", FILEIO_QUERY)]
            .into_iter()
            .map(|(env, q)| EpisodeQuery {
                env_id: env.into(),
                initial_state: None,
                query: q.into(),
            })
            .collect());
    }
    let text = std::fs::read_to_string(source).with_context(|| format!("reading {source}"))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{source} line {}", i + 1)))
        .collect()
}

pub fn cmd_datagen(settings: &DatagenSettings) -> Result<PathBuf> {
    let prompts = load_prompts(settings.prompt_dir.as_deref())?;
    let queries = load_queries(&settings.queries)?;
    let recorders: Vec<Arc<RecordingBackend<Arc<dyn ChatBackend>>>> = settings
        .backends
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let backend = backends::parse(b)?.build(settings.demo_p, derive_seed(&[settings.seed, i as u64]))?;
            Ok(Arc::new(RecordingBackend::new(backend)))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&dyn ChatBackend> = recorders.iter().map(|r| r.as_ref() as &dyn ChatBackend).collect();

    let collected = collect_episodes(&queries, &refs, &prompts, &settings.orchestrator, settings.seed)?;
    for incident in &collected.incidents {
        tracing::warn!(detail = %incident.detail, "episode produced no calls");
    }
    let mut instances: Vec<SftInstance> = collected.instances;
    let mut ledger: UsageLedger = collected.ledger;

    let env = environment::create(&settings.env, None)?;
    for (i, (label, &want)) in settings.quota.iter().enumerate() {
        let found = elicit_targeted_failures(
            env.as_ref(),
            label,
            refs[0],
            &prompts,
            settings.tries,
            derive_seed(&[settings.seed, u64::MAX - 1, i as u64]),
            &mut ledger,
        )?;
        if found.len() < want {
            tracing::warn!(label, found = found.len(), quota = want, "quota shortfall");
        }
        instances.extend(found.into_iter().take(want));
    }
    if instances.is_empty() {
        bail!("no instances were collected");
    }

    let corpus = if settings.rebalance {
        let table = OutcomeFrequencyTable::from_instances(&instances);
        sample_rebalanced(&instances, &table, settings.samples, derive_seed(&[settings.seed, 7]))?
    } else {
        instances.clone()
    };
    let audit = audit_corpus(&corpus)?;
    if !audit.failures.is_empty() {
        bail!(
            "{} corpus row(s) fail replay audit: {:?}",
            audit.failures.len(),
            audit.failures
        );
    }

    let config_hash = content_hash(settings);
    let (dir, created_at) = rundir::create(&settings.out_dir, &config_hash)?;
    let rows = emit_sft(&corpus, &prompts, &dir.join(rundir::CORPUS))?;
    let mut log = Vec::new();
    for r in &recorders {
        log.extend(r.exchanges());
    }
    rundir::write_lines(&dir.join(rundir::EXCHANGES), &log)?;
    rundir::write_json(
        &dir.join(rundir::MANIFEST),
        &Manifest {
            command: "datagen".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            created_at,
            config_hash,
            config: serde_json::to_value(settings)?,
            seed: settings.seed,
            task_seeds: BTreeMap::new(),
            template_digest: prompts.digest(),
            inputs_hash: (settings.queries != "demo")
                .then(|| file_hash(Path::new(&settings.queries)))
                .transpose()?,
        },
    )?;

    let collected_counts: BTreeMap<_, _> = yield_summary(&instances).into_iter().collect();
    let emitted_counts: BTreeMap<_, _> = yield_summary(&corpus).into_iter().collect();
    println!("{:<40} {:>9} {:>9}", "key", "collected", "emitted");
    for (key, c) in &collected_counts {
        println!(
            "{:<40} {:>9} {:>9}",
            key.to_string(),
            c,
            emitted_counts.get(key).copied().unwrap_or(0)
        );
    }
    let unseen: Vec<String> = documented_keys(env.as_ref())
        .into_iter()
        .filter(|k| !collected_counts.contains_key(k))
        .map(|k| k.to_string())
        .collect();
    if !unseen.is_empty() {
        println!("documented keys with no instances: {}", unseen.join(", "));
    }
    println!("{rows} rows written to {}", dir.join(rundir::CORPUS).display());
    println!("run directory: {}", dir.display());
    Ok(dir)
}
