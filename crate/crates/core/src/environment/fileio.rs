//! `fileio`: a flat in-memory file store keyed by absolute path.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    check_arguments, check_env_id, common_label, param, tool, unknown_tool, EnvError, Environment, EnvironmentState,
    BAD_ARGUMENT_TYPE, UNKNOWN_TOOL,
};
use crate::conversation::{error_payload, ToolCall, ToolSpec};

pub const NOT_FOUND: &str = "not_found";
pub const PERMISSION_DENIED: &str = "permission_denied";
pub const ALREADY_EXISTS: &str = "already_exists";
pub const BAD_PATH: &str = "bad_path";

const LABELS: &[&str] = &[
    NOT_FOUND,
    PERMISSION_DENIED,
    ALREADY_EXISTS,
    BAD_PATH,
    UNKNOWN_TOOL,
    BAD_ARGUMENT_TYPE,
];

const MAX_PATH: usize = 256;

const NOTES: &str = "\
Paths must be absolute (start with '/'), at most 256 bytes, with no empty, '.' or '..' segments and no trailing '/'; otherwise the call fails with \"bad path: <path>\". list_dir additionally accepts '/'.
read_file(path): returns {\"path\", \"content\"}; \"not found: <path>\" if missing.
write_file(path, content): overwrites an existing file; \"not found: <path>\" if missing, \"permission denied: <path>\" if read-only. Returns {\"path\", \"bytes\"}.
create_file(path, content): creates a new writable file; \"already exists: <path>\" if present.
delete_file(path): \"not found\" if missing, \"permission denied\" if read-only.
list_dir(path): returns {\"entries\": [paths directly or transitively under path, sorted]}.
set_readonly(path, readonly): toggles the read-only flag; \"not found\" if missing.
Any tool: unknown tool names fail with \"unknown tool <name>\"; missing, extra, or wrongly typed arguments fail with \"missing argument <p>\", \"unexpected argument <p>\", or \"bad argument type for <p>: expected <type>\".";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct FileEntry {
    content: String,
    readonly: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Store {
    files: BTreeMap<String, FileEntry>,
}

#[derive(Clone, Debug)]
pub struct FileIo {
    store: Store,
    version: u64,
}

fn specs() -> &'static [ToolSpec] {
    static SPECS: OnceLock<Vec<ToolSpec>> = OnceLock::new();
    SPECS.get_or_init(|| {
        let path = || param("path", "string", "Absolute file path.");
        vec![
            tool("read_file", "Read a file's content.", vec![path()]),
            tool(
                "write_file",
                "Overwrite the content of an existing file.",
                vec![path(), param("content", "string", "New content.")],
            ),
            tool(
                "create_file",
                "Create a new file.",
                vec![path(), param("content", "string", "Initial content.")],
            ),
            tool("delete_file", "Delete a file.", vec![path()]),
            tool(
                "list_dir",
                "List files under a directory path.",
                vec![param("path", "string", "Absolute directory path.")],
            ),
            tool(
                "set_readonly",
                "Mark a file read-only or writable.",
                vec![path(), param("readonly", "boolean", "Read-only flag.")],
            ),
        ]
    })
}

fn valid_path(path: &str, allow_root: bool) -> bool {
    if allow_root && path == "/" {
        return true;
    }
    path.len() <= MAX_PATH
        && path.starts_with('/')
        && !path.chars().any(char::is_control)
        && path[1..]
            .split('/')
            .all(|seg| !seg.is_empty() && seg != "." && seg != "..")
}

impl Default for FileIo {
    fn default() -> Self {
        Self::new()
    }
}

impl FileIo {
    pub const ID: &'static str = "fileio";

    pub fn new() -> Self {
        let files = BTreeMap::from([
            (
                "/etc/motd".to_string(),
                FileEntry {
                    content: "welcome".into(),
                    readonly: true,
                },
            ),
            (
                "/home/user/notes.txt".to_string(),
                FileEntry {
                    content: "buy milk".into(),
                    readonly: false,
                },
            ),
        ]);
        FileIo {
            store: Store { files },
            version: 0,
        }
    }

    pub fn from_blob(blob: &Value) -> Result<Self, EnvError> {
        let store: Store = serde_json::from_value(blob.clone()).map_err(|e| EnvError::InvalidState {
            env: Self::ID.into(),
            reason: e.to_string(),
        })?;
        if let Some(bad) = store.files.keys().find(|p| !valid_path(p, false)) {
            return Err(EnvError::InvalidState {
                env: Self::ID.into(),
                reason: format!("bad path {bad}"),
            });
        }
        Ok(FileIo { store, version: 0 })
    }

    fn existing(&self, path: &str) -> Result<&FileEntry, Value> {
        self.store
            .files
            .get(path)
            .ok_or_else(|| error_payload(format!("not found: {path}")))
    }

    fn writable(&self, path: &str) -> Result<(), Value> {
        if self.existing(path)?.readonly {
            return Err(error_payload(format!("permission denied: {path}")));
        }
        Ok(())
    }

    fn run(&mut self, call: &ToolCall) -> Result<Value, Value> {
        let spec = specs()
            .iter()
            .find(|t| t.name == call.tool)
            .ok_or_else(|| unknown_tool(&call.tool))?;
        check_arguments(spec, call)?;
        let s = |k: &str| call.arg(k).and_then(|v| v.as_str()).unwrap_or_default().to_string();
        let path = s("path");
        if !valid_path(&path, call.tool == "list_dir") {
            return Err(error_payload(format!("bad path: {path}")));
        }
        match call.tool.as_str() {
            "read_file" => {
                let entry = self.existing(&path)?;
                Ok(json!({ "path": path, "content": entry.content }))
            }
            "write_file" => {
                self.writable(&path)?;
                let content = s("content");
                let bytes = content.len();
                self.store.files.get_mut(&path).expect("checked").content = content;
                self.version += 1;
                Ok(json!({ "path": path, "bytes": bytes }))
            }
            "create_file" => {
                if self.store.files.contains_key(&path) {
                    return Err(error_payload(format!("already exists: {path}")));
                }
                let content = s("content");
                let bytes = content.len();
                self.store.files.insert(
                    path.clone(),
                    FileEntry {
                        content,
                        readonly: false,
                    },
                );
                self.version += 1;
                Ok(json!({ "path": path, "bytes": bytes }))
            }
            "delete_file" => {
                self.writable(&path)?;
                self.store.files.remove(&path);
                self.version += 1;
                Ok(json!({ "path": path, "deleted": true }))
            }
            "list_dir" => {
                let prefix = if path == "/" {
                    "/".to_string()
                } else {
                    format!("{path}/")
                };
                let entries: Vec<&String> = self.store.files.keys().filter(|p| p.starts_with(&prefix)).collect();
                Ok(json!({ "entries": entries }))
            }
            "set_readonly" => {
                self.existing(&path)?;
                let readonly = call.arg("readonly").and_then(|v| v.as_bool()).unwrap_or(false);
                self.store.files.get_mut(&path).expect("checked").readonly = readonly;
                self.version += 1;
                Ok(json!({ "path": path, "readonly": readonly }))
            }
            _ => Err(unknown_tool(&call.tool)),
        }
    }
}

impl Environment for FileIo {
    fn env_id(&self) -> &str {
        Self::ID
    }

    fn tools(&self) -> &[ToolSpec] {
        specs()
    }

    fn failure_labels(&self) -> &'static [&'static str] {
        LABELS
    }

    fn implementation_notes(&self) -> &'static str {
        NOTES
    }

    fn execute_call(&mut self, call: &ToolCall) -> Value {
        self.run(call).unwrap_or_else(|err| err)
    }

    fn snapshot(&self) -> EnvironmentState {
        EnvironmentState {
            env_id: Self::ID.into(),
            blob: serde_json::to_value(&self.store).expect("store serializes"),
            version: self.version,
        }
    }

    fn restore(&mut self, state: &EnvironmentState) -> Result<(), EnvError> {
        check_env_id(Self::ID, state)?;
        let restored = FileIo::from_blob(&state.blob)?;
        self.store = restored.store;
        self.version = state.version;
        Ok(())
    }

    fn failure_label(&self, message: &str) -> Option<&'static str> {
        if message.starts_with("not found: ") {
            Some(NOT_FOUND)
        } else if message.starts_with("permission denied: ") {
            Some(PERMISSION_DENIED)
        } else if message.starts_with("already exists: ") {
            Some(ALREADY_EXISTS)
        } else if message.starts_with("bad path: ") {
            Some(BAD_PATH)
        } else {
            common_label(message)
        }
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}
