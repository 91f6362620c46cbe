//! The authoritative copy of the workflow and its version history.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::transitions::{apply_update, Applied, StateUpdate, UpdateError};
use crate::adapt::{apply_mutation, Mutation, MutationError};
use crate::model::{
    entity_path, graph_unchecked, AdaptationTypes, EntityKind, EntityState, TaskGraph, TaskState, TransitionEvent, Workflow,
};

/// A batch of mutations proposed by one hook firing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncDelta {
    pub base_version: u64,
    pub pipeline: String,
    pub trigger_uid: String,
    pub mutations: Vec<Mutation>,
    pub classified_types: AdaptationTypes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    VersionMismatch,
    PipelineTerminal,
    Guard(MutationError),
    Invalid(String),
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::VersionMismatch => f.write_str("version_mismatch"),
            Self::PipelineTerminal => f.write_str("pipeline_terminal"),
            Self::Guard(m) => write!(f, "guard: {m}"),
            Self::Invalid(m) => write!(f, "invalid: {m}"),
        }
    }
}

/// One committed delta. Replaying the log on the base workflow reproduces
/// the current task graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub version: u64,
    pub pipeline: String,
    pub trigger_uid: String,
    pub mutations: Vec<Mutation>,
    pub classified_types: AdaptationTypes,
}

/// Resume point of one pipeline: its last completed stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub pipeline: String,
    pub stage: String,
    pub tasks: Vec<String>,
    pub version: u64,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalGraphStore {
    pub(crate) base: Workflow,
    pub(crate) workflow: Workflow,
    pub(crate) version: u64,
    pub(crate) log: Vec<LogEntry>,
    /// Trigger uid -> version it committed at, `None` if it had nothing to commit.
    pub(crate) handled: BTreeMap<String, Option<u64>>,
    /// Every applied transition; stage uids are qualified as `pipeline/stage`.
    pub(crate) transitions: Vec<TransitionEvent>,
    pub(crate) stages_done: u64,
}

impl GlobalGraphStore {
    pub fn new(w: Workflow) -> Self {
        Self {
            base: w.clone(),
            workflow: w,
            version: 0,
            log: Vec::new(),
            handled: BTreeMap::new(),
            transitions: Vec::new(),
            stages_done: 0,
        }
    }

    pub fn workflow(&self) -> &Workflow {
        &self.workflow
    }

    pub fn base(&self) -> &Workflow {
        &self.base
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn transitions(&self) -> &[TransitionEvent] {
        &self.transitions
    }

    pub fn handled(&self) -> &BTreeMap<String, Option<u64>> {
        &self.handled
    }

    pub fn is_handled(&self, trigger: &str) -> bool {
        self.handled.contains_key(trigger)
    }

    /// Stage completions applied so far, across all pipelines.
    pub fn stages_done(&self) -> u64 {
        self.stages_done
    }

    pub fn task_graph(&self) -> TaskGraph {
        graph_unchecked(&self.workflow)
    }

    /// Commits `delta` if it was computed against the current version. All
    /// mutations apply or none do. Re-proposing a committed trigger returns
    /// the version it committed at.
    pub fn propose(&mut self, delta: &SyncDelta) -> Result<u64, RejectReason> {
        if let Some(Some(v)) = self.handled.get(&delta.trigger_uid) {
            return Ok(*v);
        }
        if delta.base_version != self.version {
            return Err(RejectReason::VersionMismatch);
        }
        let p = self
            .workflow
            .pipeline_mut(&delta.pipeline)
            .ok_or_else(|| RejectReason::Invalid(format!("unknown pipeline {}", delta.pipeline)))?;
        if p.state.is_terminal() {
            return Err(RejectReason::PipelineTerminal);
        }
        let mut next = p.clone();
        for m in &delta.mutations {
            apply_mutation(&mut next, m).map_err(|e| match e {
                MutationError::Guard { .. } => RejectReason::Guard(e),
                e => RejectReason::Invalid(e.to_string()),
            })?;
        }
        next.adaptations += 1;
        *p = next;
        self.version += 1;
        self.log.push(LogEntry {
            version: self.version,
            pipeline: delta.pipeline.clone(),
            trigger_uid: delta.trigger_uid.clone(),
            mutations: delta.mutations.clone(),
            classified_types: delta.classified_types.clone(),
        });
        self.handled.insert(delta.trigger_uid.clone(), Some(self.version));
        Ok(self.version)
    }

    /// Records a hook firing that changed nothing. Idempotent.
    pub fn mark_handled(&mut self, pipeline: &str, trigger: &str) -> bool {
        if self.handled.contains_key(trigger) {
            return false;
        }
        let Some(p) = self.workflow.pipeline_mut(pipeline) else {
            return false;
        };
        p.adaptations += 1;
        self.handled.insert(trigger.to_string(), None);
        true
    }

    pub fn apply_update(&mut self, u: &StateUpdate) -> Result<Applied, UpdateError> {
        let p = self
            .workflow
            .pipeline_mut(&u.pipeline)
            .ok_or_else(|| UpdateError::Unknown(u.pipeline.clone()))?;
        let applied = apply_update(p, u)?;
        if applied.stage_done {
            self.stages_done += 1;
        }
        // stage uids repeat across pipelines; the audit log needs them unique
        self.transitions.extend(applied.steps.iter().map(|ev| {
            let mut ev = ev.clone();
            if ev.kind == EntityKind::Stage {
                ev.uid = entity_path(&u.pipeline, Some(&ev.uid), None);
            }
            ev
        }));
        Ok(applied)
    }

    /// Last completed stage of every pipeline that has one.
    pub fn records(&self) -> Vec<CheckpointRecord> {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        self.workflow
            .pipelines
            .iter()
            .filter_map(|p| {
                let s = p.stages.iter().rev().find(|s| s.state == EntityState::Done)?;
                Some(CheckpointRecord {
                    pipeline: p.uid.clone(),
                    stage: s.uid.clone(),
                    tasks: s.tasks.iter().map(|t| t.spec.uid.clone()).collect(),
                    version: self.version,
                    timestamp_ms: now,
                })
            })
            .collect()
    }

    /// Prepares a restored store for a new run: anything that was in flight
    /// when the checkpoint was taken starts over.
    pub(crate) fn reset_in_flight(&mut self) {
        for p in &mut self.workflow.pipelines {
            for s in &mut p.stages {
                if s.state == EntityState::Scheduled {
                    s.state = EntityState::Pending;
                }
                for t in &mut s.tasks {
                    if !t.state.is_terminal() {
                        t.state = TaskState::Pending;
                    }
                }
            }
            p.cursor = p.first_open_stage();
        }
        self.transitions.clear();
    }
}
