//! Backend descriptors: `scripted:demo`, `scripted:<script.json>`,
//! `replay:<exchanges.jsonl>`, `remote:<model>`.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use atris_core::backend::{
    ChatBackend, RemoteBackend, RemoteConfig, ReplayBackend, Script, ScriptedBackend, API_BASE_ENV,
};
use atris_core::demo::demo_script;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackendSpec {
    Demo,
    Script(PathBuf),
    Replay(PathBuf),
    Remote(String),
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| format!("`{s}` is not of the form kind:argument"))?;
        if arg.is_empty() {
            return Err(format!("`{s}` has an empty argument"));
        }
        match kind {
            "scripted" if arg == "demo" => Ok(BackendSpec::Demo),
            "scripted" => Ok(BackendSpec::Script(arg.into())),
            "replay" => Ok(BackendSpec::Replay(arg.into())),
            "remote" => Ok(BackendSpec::Remote(arg.into())),
            other => Err(format!(
                "unknown backend kind `{other}` (expected scripted, replay or remote)"
            )),
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Demo => f.write_str("scripted:demo"),
            BackendSpec::Script(p) => write!(f, "scripted:{}", p.display()),
            BackendSpec::Replay(p) => write!(f, "replay:{}", p.display()),
            BackendSpec::Remote(m) => write!(f, "remote:{m}"),
        }
    }
}

impl BackendSpec {
    pub fn build(&self, demo_p: f64, seed: u64) -> Result<Arc<dyn ChatBackend>> {
        Ok(match self {
            BackendSpec::Demo => Arc::new(ScriptedBackend::new(demo_script(demo_p, seed))?),
            BackendSpec::Script(path) => {
                let text =
                    std::fs::read_to_string(path).with_context(|| format!("reading script {}", path.display()))?;
                let script: Script =
                    serde_json::from_str(&text).with_context(|| format!("parsing script {}", path.display()))?;
                Arc::new(ScriptedBackend::new(script)?)
            }
            BackendSpec::Replay(path) => Arc::new(ReplayBackend::load(path)?),
            BackendSpec::Remote(model) => {
                let Some(config) = RemoteConfig::from_env(model.clone()) else {
                    bail!("{API_BASE_ENV} must be set for remote backends");
                };
                Arc::new(RemoteBackend::new(config))
            }
        })
    }
}

pub fn parse(spec: &str) -> Result<BackendSpec> {
    spec.parse().map_err(|e: String| anyhow!(e))
}
