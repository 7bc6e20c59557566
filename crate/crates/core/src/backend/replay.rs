//! Recording and replaying model exchanges.
//!
//! A recording wraps any backend and keeps every request with its response.
//! Saved as JSON lines, the log can drive a `ReplayBackend`, which answers
//! by request fingerprint. Identical fingerprints are served in recorded
//! order.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{AgentRole, BackendError, ChatBackend, ChatRequest, ChatResponse, Usage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub fingerprint: String,
    pub role: AgentRole,
    pub request: ChatRequest,
    pub text: String,
    pub usage: Usage,
}

pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<Vec<Exchange>>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn exchanges(&self) -> Vec<Exchange> {
        self.log.lock().expect("recording lock").clone()
    }

    /// Requests sent for one role, in call order.
    pub fn requests_for(&self, role: AgentRole) -> Vec<ChatRequest> {
        self.exchanges()
            .into_iter()
            .filter(|e| e.role == role)
            .map(|e| e.request)
            .collect()
    }

    pub fn clear(&self) {
        self.log.lock().expect("recording lock").clear();
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut file = fs::File::create(path)?;
        for exchange in self.exchanges() {
            serde_json::to_writer(&mut file, &exchange)?;
            file.write_all(b"\n")?;
        }
        Ok(())
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn complete(&self, request: &ChatRequest, role: AgentRole) -> Result<ChatResponse, BackendError> {
        let response = self.inner.complete(request, role)?;
        self.log.lock().expect("recording lock").push(Exchange {
            fingerprint: request.fingerprint(role),
            role,
            request: request.clone(),
            text: response.text.clone(),
            usage: response.usage,
        });
        Ok(response)
    }
}

pub struct ReplayBackend {
    queues: Mutex<HashMap<String, VecDeque<Exchange>>>,
}

impl ReplayBackend {
    pub fn new(exchanges: impl IntoIterator<Item = Exchange>) -> Self {
        let mut queues: HashMap<String, VecDeque<Exchange>> = HashMap::new();
        for e in exchanges {
            queues.entry(e.fingerprint.clone()).or_default().push_back(e);
        }
        ReplayBackend {
            queues: Mutex::new(queues),
        }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path).map_err(|e| BackendError::ReplayLog(format!("{}: {e}", path.display())))?;
        let mut exchanges = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: Exchange = serde_json::from_str(line)
                .map_err(|err| BackendError::ReplayLog(format!("{} line {}: {err}", path.display(), i + 1)))?;
            exchanges.push(e);
        }
        Ok(Self::new(exchanges))
    }

    pub fn remaining(&self) -> usize {
        self.queues
            .lock()
            .expect("replay lock")
            .values()
            .map(VecDeque::len)
            .sum()
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest, role: AgentRole) -> Result<ChatResponse, BackendError> {
        let fingerprint = request.fingerprint(role);
        let mut queues = self.queues.lock().expect("replay lock");
        let exchange = queues
            .get_mut(&fingerprint)
            .and_then(VecDeque::pop_front)
            .ok_or(BackendError::ReplayMiss { fingerprint })?;
        Ok(ChatResponse {
            text: exchange.text,
            usage: exchange.usage,
        })
    }
}
