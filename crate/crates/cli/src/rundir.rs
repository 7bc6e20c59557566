//! Run directories and their manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MANIFEST: &str = "manifest.json";
pub const RESULTS: &str = "results.json";
pub const TRANSCRIPTS: &str = "transcripts.jsonl";
pub const EXCHANGES: &str = "exchanges.jsonl";
pub const REPORT: &str = "report.txt";
pub const CORPUS: &str = "corpus.jsonl";

/// What is needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub created_at: String,
    pub config_hash: String,
    pub config: Value,
    pub seed: u64,
    /// Derived per-task seeds, by task id.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub task_seeds: BTreeMap<String, u64>,
    pub template_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs_hash: Option<String>,
}

/// Creates `<out>/<UTC timestamp>-<hash prefix>`, adding a suffix when a
/// directory of that name already exists.
pub fn create(out: &Path, config_hash: &str) -> Result<(PathBuf, String)> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let now = chrono::Utc::now();
    let stem = format!("{}-{}", now.format("%Y%m%dT%H%M%SZ"), &config_hash[..12]);
    let mut dir = out.join(&stem);
    let mut i = 1;
    while dir.exists() {
        dir = out.join(format!("{stem}-{i}"));
        i += 1;
    }
    fs::create_dir(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok((dir, now.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
