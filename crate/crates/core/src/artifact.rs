//! On-disk formats: traces and commit-logs as JSON lines, checkpoints and
//! run metadata as JSON documents.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Checkpoint, CpNum, Key, ReplicaId, ResolverKind, Schema, Timestamp, TxnId, Value, Versioned,
};
use crate::simnet::TimedEntry;
use crate::trace::TraceRecord;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
}

impl ArtifactError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        ArtifactError::Io {
            path: path.to_owned(),
            source,
        }
    }
}

/// One stored object. The file holds exactly one of these per key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateEntry {
    pub key: Key,
    pub value: Value,
    pub ts: Timestamp,
}

/// A checkpoint as written to disk. Only these four fields are accepted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFile {
    pub cp_num: CpNum,
    pub vpogc: BTreeMap<ReplicaId, u64>,
    pub cp_set: Vec<TxnId>,
    pub state: Vec<StateEntry>,
}

impl From<&Checkpoint> for CheckpointFile {
    fn from(cp: &Checkpoint) -> Self {
        CheckpointFile {
            cp_num: cp.cp_num,
            vpogc: cp.vpogc.clone(),
            cp_set: cp.cp_set.iter().copied().collect(),
            state: cp
                .state
                .iter()
                .map(|(k, v)| StateEntry {
                    key: k.clone(),
                    value: v.value,
                    ts: v.ts,
                })
                .collect(),
        }
    }
}

impl CheckpointFile {
    /// In-memory view. Later duplicates of a key overwrite earlier ones; use
    /// the verifier's concision check to detect them.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            cp_num: self.cp_num,
            state: self
                .state
                .iter()
                .map(|e| (e.key.clone(), Versioned::new(e.value, e.ts)))
                .collect(),
            cp_set: self.cp_set.iter().copied().collect(),
            vpogc: self.vpogc.clone(),
        }
    }

    pub fn file_name(&self) -> String {
        format!("cp-{:04}.json", self.cp_num.0)
    }
}

/// What recovery needs to know about a run besides checkpoint and logs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub replicas: u16,
    pub resolver: ResolverKind,
    pub keys: Vec<Key>,
    pub initial_value: Value,
}

impl RunMeta {
    pub fn schema(&self) -> Schema {
        Schema {
            keys: self.keys.clone(),
            initial_value: self.initial_value,
        }
    }
}

pub const META_FILE: &str = "meta.json";

pub fn log_file_name(replica: ReplicaId) -> String {
    format!("log-r{}.jsonl", replica.0)
}

fn write_text(path: &Path, text: &str) -> Result<(), ArtifactError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| ArtifactError::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| ArtifactError::io(path, e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| ArtifactError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ArtifactError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifacts serialize");
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ArtifactError> {
    let text = fs::read_to_string(path).map_err(|e| ArtifactError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ArtifactError::Parse {
        path: path.to_owned(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ArtifactError> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).expect("artifacts serialize"));
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ArtifactError> {
    let f = fs::File::open(path).map_err(|e| ArtifactError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| ArtifactError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| ArtifactError::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Read a trace and check that `seq` numbers are strictly increasing.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, ArtifactError> {
    let trace: Vec<TraceRecord> = read_jsonl(path)?;
    if let Some(w) = trace.windows(2).find(|w| w[1].seq <= w[0].seq) {
        return Err(ArtifactError::Malformed {
            path: path.to_owned(),
            message: format!("seq {} follows seq {}", w[1].seq, w[0].seq),
        });
    }
    Ok(trace)
}

/// All `cp-*.json` files in `dir`, in file-name order.
pub fn read_checkpoint_dir(dir: &Path) -> Result<Vec<(PathBuf, CheckpointFile)>, ArtifactError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| ArtifactError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("cp-") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| read_json(&p).map(|cp| (p, cp)))
        .collect()
}

/// Per-replica commit-logs from `log-r<i>.jsonl` files. Entry indices must be dense.
pub fn read_logs_dir(
    dir: &Path,
    replicas: u16,
) -> Result<BTreeMap<ReplicaId, Vec<TimedEntry>>, ArtifactError> {
    let mut logs = BTreeMap::new();
    for r in 0..replicas {
        let id = ReplicaId(r);
        let path = dir.join(log_file_name(id));
        if !path.exists() {
            continue;
        }
        let entries: Vec<TimedEntry> = read_jsonl(&path)?;
        if let Some((i, e)) = entries
            .iter()
            .enumerate()
            .find(|(i, e)| e.index != *i as u64)
        {
            return Err(ArtifactError::Malformed {
                path,
                message: format!("entry {i} has index {}", e.index),
            });
        }
        logs.insert(id, entries);
    }
    Ok(logs)
}
