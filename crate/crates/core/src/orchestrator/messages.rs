//! Everything the components say to each other over the bus.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::store::{RejectReason, SyncDelta};
use super::transitions::StateUpdate;
use crate::adapt::AdaptationError;
use crate::exec::TaskExit;
use crate::model::TaskSpec;

pub const Q_APPMANAGER: &str = "appmanager";
pub const Q_WFP: &str = "wfp";
pub const Q_EMGR: &str = "emgr";

/// Per-pipeline queue the store answers sync requests on.
pub fn sync_reply_queue(pipeline: &str) -> String {
    format!("sync_ack.{pipeline}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AppManagerMsg {
    State(StateUpdate),
    Sync { request: u64, reply_to: String, delta: SyncDelta },
    /// A hook ran and produced no mutations; nothing to commit.
    TriggerHandled { pipeline: String, trigger: String },
    Fatal(Fatal),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fatal {
    Adaptation(AdaptationError),
    Allocation(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncReply {
    pub request: u64,
    pub result: SyncResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncResult {
    Ack { version: u64 },
    Reject { reason: RejectReason, version: u64 },
}

/// Outcome of one attempt, forwarded from the execution manager.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub pipeline: String,
    pub stage: String,
    pub task: String,
    pub attempt: u32,
    pub exit_code: i32,
    #[serde(default)]
    pub files: Vec<PathBuf>,
    /// False when the attempt never started (spawn error, no fit).
    pub launched: bool,
    /// Killed by a runtime failure; does not count against the retry budget.
    #[serde(default)]
    pub lost: bool,
    /// Set when retrying cannot help.
    #[serde(default)]
    pub permanent: Option<String>,
}

impl Completion {
    pub fn succeeded(&self) -> bool {
        self.exit_code == 0 && self.launched && !self.lost && self.permanent.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WfpMsg {
    /// Walk every pipeline and pick up whatever is due.
    Scan,
    Completed(Completion),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EmgrMsg {
    Submit {
        pipeline: String,
        stage: String,
        task: TaskSpec,
        attempt: u32,
    },
    Exited {
        pipeline: String,
        stage: String,
        task: String,
        attempt: u32,
        exit: TaskExit,
    },
    /// Drop queued, not yet launched work of a failed pipeline.
    CancelPipeline { pipeline: String },
}
