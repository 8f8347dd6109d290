//! Content-addressed prediction cache.
//!
//! `<root>/<backend name>/<content hash>.json` holds a JSON array of entries
//! `{version, task, result}`. Entries are only ever appended; a lookup
//! matches on backend version and task.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendDescriptor, Label, Task};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CachedResult {
    Label { label: String, confidence: Option<f64> },
    FaceNotDetected,
}

impl From<&Label> for CachedResult {
    fn from(l: &Label) -> Self {
        CachedResult::Label { label: l.label.clone(), confidence: l.confidence }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    version: String,
    task: Task,
    result: CachedResult,
}

#[derive(Debug)]
pub struct Cache {
    root: PathBuf,
    writer: Mutex<()>,
}

impl Cache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), writer: Mutex::new(()) }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, hash: &str, backend: &BackendDescriptor) -> PathBuf {
        self.root.join(&backend.name).join(format!("{hash}.json"))
    }

    fn entries(path: &Path) -> Result<Vec<Entry>> {
        match std::fs::read(path) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn lookup(&self, hash: &str, backend: &BackendDescriptor, task: Task) -> Result<Option<CachedResult>> {
        Ok(Self::entries(&self.path(hash, backend))?
            .into_iter()
            .find(|e| e.version == backend.version && e.task == task)
            .map(|e| e.result))
    }

    /// Appends an entry unless one already exists for the key.
    pub fn store(&self, hash: &str, backend: &BackendDescriptor, task: Task, result: &CachedResult) -> Result<()> {
        let _guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let path = self.path(hash, backend);
        let mut entries = Self::entries(&path)?;
        if entries.iter().any(|e| e.version == backend.version && e.task == task) {
            return Ok(());
        }
        entries.push(Entry { version: backend.version.clone(), task, result: result.clone() });
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&entries)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }
}
