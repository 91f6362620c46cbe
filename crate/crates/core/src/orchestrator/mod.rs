//! Runs a workflow: the AppManager, the workflow processor and the
//! execution manager, talking over the message bus.
//!
//! The AppManager holds the only authoritative copy of the workflow in a
//! [`GlobalGraphStore`]. The workflow processor keeps a local copy it plans
//! from and reports every state change it makes; the execution manager
//! places tasks on the resource pool and launches them. Adaptations are
//! evaluated by the processor and committed through a versioned sync with
//! the store, so a stale delta is rejected rather than merged.
//!
//! Every message is acked only after it has been acted on. If a component
//! dies, the AppManager replaces it and the bus redelivers what the dead
//! instance had not finished.

mod appmanager;
mod checkpoint;
mod config;
mod emgr;
mod messages;
mod processor;
mod store;
mod transitions;

pub use appmanager::{resume_from_checkpoint, run_workflow, AppManager, ComponentId};
pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, read_checkpoint, write_checkpoint, CheckpointError,
    CheckpointPayload,
};
pub use config::{EngineConfig, EngineError, ExecutionSummary, FaultInjection};
pub use messages::{AppManagerMsg, Completion, EmgrMsg, Fatal, SyncReply, SyncResult, WfpMsg};
pub use store::{CheckpointRecord, GlobalGraphStore, LogEntry, RejectReason, SyncDelta};
pub use transitions::{apply_update, current_attempt, Applied, StateUpdate, UpdateError};
