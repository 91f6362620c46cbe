//! Checkpoint file format.
//!
//! ```text
//! ENSEMBLE-CHECKPOINT v1 sha256=<64 hex digits> bytes=<payload length>\n
//! <JSON payload>
//! ```
//!
//! The payload holds the base workflow, the current workflow, the store
//! version, the delta log, handled triggers and one resume record per
//! pipeline. The header checksum covers the payload bytes exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::store::{CheckpointRecord, GlobalGraphStore, LogEntry};
use crate::adapt::apply_mutation;
use crate::model::{graph_unchecked, Workflow};

pub const MAGIC: &str = "ENSEMBLE-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointPayload {
    pub version: u64,
    pub base: Workflow,
    pub workflow: Workflow,
    pub log: Vec<LogEntry>,
    pub handled: BTreeMap<String, Option<u64>>,
    pub stages_done: u64,
    pub records: Vec<CheckpointRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: {0}")]
    Header(String),
    #[error("checksum mismatch: header says {expected}, payload hashes to {actual}")]
    Checksum { expected: String, actual: String },
    #[error("payload is {actual} bytes, header says {expected}")]
    Length { expected: usize, actual: usize },
    #[error("payload: {0}")]
    Json(#[from] serde_json::Error),
    #[error("log_gap: checkpoint is at version {version} but the log ends at {log_end}")]
    LogGap { version: u64, log_end: u64 },
    #[error("replaying the delta log does not reproduce the stored task graph")]
    ReplayMismatch,
}

impl CheckpointPayload {
    pub fn from_store(store: &GlobalGraphStore) -> Self {
        Self {
            version: store.version,
            base: store.base.clone(),
            workflow: store.workflow.clone(),
            log: store.log.clone(),
            handled: store.handled.clone(),
            stages_done: store.stages_done,
            records: store.records(),
        }
    }

    /// Checks internal consistency and rebuilds the store.
    pub fn into_store(self) -> Result<GlobalGraphStore, CheckpointError> {
        let log_end = self.log.last().map_or(0, |e| e.version);
        let contiguous = self.log.iter().enumerate().all(|(i, e)| e.version == i as u64 + 1);
        if !contiguous || log_end != self.version {
            return Err(CheckpointError::LogGap {
                version: self.version,
                log_end,
            });
        }
        let mut replay = self.base.clone();
        for e in &self.log {
            let p = replay.pipeline_mut(&e.pipeline).ok_or(CheckpointError::ReplayMismatch)?;
            for m in &e.mutations {
                apply_mutation(p, m).map_err(|_| CheckpointError::ReplayMismatch)?;
            }
        }
        if graph_unchecked(&replay) != graph_unchecked(&self.workflow) {
            return Err(CheckpointError::ReplayMismatch);
        }
        Ok(GlobalGraphStore {
            base: self.base,
            workflow: self.workflow,
            version: self.version,
            log: self.log,
            handled: self.handled,
            transitions: Vec::new(),
            stages_done: self.stages_done,
        })
    }
}

pub fn encode(payload: &CheckpointPayload) -> Result<Vec<u8>, CheckpointError> {
    let body = serde_json::to_vec(payload)?;
    let digest = hex::encode(Sha256::digest(&body));
    let mut out = format!("{MAGIC} v{FORMAT_VERSION} sha256={digest} bytes={}\n", body.len()).into_bytes();
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointPayload, CheckpointError> {
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| CheckpointError::Header("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| CheckpointError::Header("header is not UTF-8".into()))?;
    let body = &bytes[nl + 1..];
    let mut parts = header.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(CheckpointError::Header(format!("bad magic in {header:?}")));
    }
    if parts.next() != Some(&format!("v{FORMAT_VERSION}")) {
        return Err(CheckpointError::Header(format!("unsupported format in {header:?}")));
    }
    let field = |p: Option<&str>, key: &str| -> Result<String, CheckpointError> {
        p.and_then(|s| s.strip_prefix(key))
            .map(str::to_string)
            .ok_or_else(|| CheckpointError::Header(format!("missing {key} in {header:?}")))
    };
    let expected = field(parts.next(), "sha256=")?;
    let len: usize = field(parts.next(), "bytes=")?
        .parse()
        .map_err(|_| CheckpointError::Header("bad length".into()))?;
    if body.len() != len {
        return Err(CheckpointError::Length {
            expected: len,
            actual: body.len(),
        });
    }
    let actual = hex::encode(Sha256::digest(body));
    if actual != expected {
        return Err(CheckpointError::Checksum { expected, actual });
    }
    Ok(serde_json::from_slice(body)?)
}

/// Writes via a temporary file and rename so readers never see a torn file.
pub fn write_checkpoint(path: &Path, store: &GlobalGraphStore) -> Result<(), CheckpointError> {
    let bytes = encode(&CheckpointPayload::from_store(store))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<GlobalGraphStore, CheckpointError> {
    decode(&fs::read(path)?)?.into_store()
}
