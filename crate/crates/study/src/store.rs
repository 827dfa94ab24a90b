//! Append-only response log with exactly-once semantics per (session, trial).

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::batch::StudyBatch;
use crate::error::{Result, StudyError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Response {
    pub trial_id: String,
    pub session: String,
    pub choice: Choice,
    pub response_time_ms: u64,
    /// Milliseconds since the Unix epoch.
    #[serde(default)]
    pub timestamp: u64,
}

#[derive(Debug, Default)]
struct Inner {
    responses: Vec<Response>,
    answered: HashMap<String, HashSet<String>>,
    file: Option<File>,
}

/// Thread-safe response store, optionally backed by a JSONL file.
#[derive(Debug)]
pub struct ResponseStore {
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
}

impl ResponseStore {
    pub fn in_memory() -> Self {
        ResponseStore {
            path: None,
            inner: Mutex::new(Inner::default()),
        }
    }

    /// Opens (or creates) a log, replaying any responses already in it.
    pub fn open(path: &Path) -> Result<Self> {
        let mut inner = Inner::default();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| StudyError::io(path, e))?;
            for (n, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let r: Response = serde_json::from_str(line)
                    .map_err(|e| StudyError::Manifest(format!("{} line {}: {e}", path.display(), n + 1)))?;
                if !inner.answered.entry(r.session.clone()).or_default().insert(r.trial_id.clone()) {
                    return Err(StudyError::Manifest(format!(
                        "{} line {}: duplicate response for session {} trial {}",
                        path.display(),
                        n + 1,
                        r.session,
                        r.trial_id
                    )));
                }
                inner.responses.push(r);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| StudyError::io(path, e))?;
        inner.file = Some(file);
        Ok(ResponseStore {
            path: Some(path.to_path_buf()),
            inner: Mutex::new(inner),
        })
    }

    /// Stores a response after checking the trial exists in `batch` and the
    /// (session, trial) key is new.
    pub fn record(&self, batch: &StudyBatch, response: Response) -> Result<()> {
        if response.session.is_empty() {
            return Err(StudyError::Invalid("session must be nonempty".into()));
        }
        if batch.trial(&response.trial_id).is_none() {
            return Err(StudyError::NotFound(format!("trial {}", response.trial_id)));
        }
        let mut inner = self.inner.lock().expect("store lock poisoned");
        if inner
            .answered
            .get(&response.session)
            .is_some_and(|s| s.contains(&response.trial_id))
        {
            return Err(StudyError::Conflict {
                session: response.session,
                trial: response.trial_id,
            });
        }
        if let Some(file) = inner.file.as_mut() {
            let mut line = serde_json::to_string(&response).expect("responses serialize");
            line.push('\n');
            let path = self.path.clone().unwrap_or_default();
            file.write_all(line.as_bytes()).map_err(|e| StudyError::io(&path, e))?;
            file.flush().map_err(|e| StudyError::io(&path, e))?;
        }
        inner
            .answered
            .entry(response.session.clone())
            .or_default()
            .insert(response.trial_id.clone());
        inner.responses.push(response);
        Ok(())
    }

    /// Consistent copy of every stored response, in arrival order.
    pub fn snapshot(&self) -> Vec<Response> {
        self.inner.lock().expect("store lock poisoned").responses.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("store lock poisoned").responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn answered(&self, session: &str) -> HashSet<String> {
        self.inner
            .lock()
            .expect("store lock poisoned")
            .answered
            .get(session)
            .cloned()
            .unwrap_or_default()
    }
}

/// Reads a response log without opening it for writing.
pub fn read_responses(path: &Path) -> Result<Vec<Response>> {
    let text = fs::read_to_string(path).map_err(|e| StudyError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| StudyError::Manifest(format!("{} line {}: {e}", path.display(), n + 1)))
        })
        .collect()
}
