//! Idempotent application of state updates.
//!
//! The global store and the workflow processor's local copy both go through
//! [`apply_update`], so the two copies see identical side effects. Updates
//! may arrive twice (redelivery) or out of step with each other (several
//! publishers); stale and duplicate updates are ignored and missing
//! intermediate steps are filled in along the canonical path.

use serde::{Deserialize, Serialize};

use crate::model::{AnyState, EntityKind, EntityState, Pipeline, Task, TaskState, TransitionEvent};

/// One state change published on the bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateUpdate {
    pub pipeline: String,
    #[serde(default)]
    pub stage: Option<String>,
    pub event: TransitionEvent,
    /// The attempt was killed by a runtime failure.
    #[serde(default)]
    pub lost: bool,
}

impl StateUpdate {
    pub fn task(pipeline: &str, stage: &str, task: &str, attempt: u32, from: TaskState, to: TaskState) -> Self {
        Self {
            pipeline: pipeline.to_string(),
            stage: Some(stage.to_string()),
            event: TransitionEvent {
                kind: EntityKind::Task,
                uid: task.to_string(),
                attempt,
                from: AnyState::Task(from),
                to: AnyState::Task(to),
            },
            lost: false,
        }
    }

    pub fn stage(pipeline: &str, stage: &str, from: EntityState, to: EntityState) -> Self {
        Self {
            pipeline: pipeline.to_string(),
            stage: Some(stage.to_string()),
            event: entity_event(EntityKind::Stage, stage, from, to),
            lost: false,
        }
    }

    pub fn pipeline(pipeline: &str, from: EntityState, to: EntityState) -> Self {
        Self {
            pipeline: pipeline.to_string(),
            stage: None,
            event: entity_event(EntityKind::Pipeline, pipeline, from, to),
            lost: false,
        }
    }

    pub fn lost(mut self) -> Self {
        self.lost = true;
        self
    }
}

fn entity_event(kind: EntityKind, uid: &str, from: EntityState, to: EntityState) -> TransitionEvent {
    TransitionEvent {
        kind,
        uid: uid.to_string(),
        attempt: 0,
        from: AnyState::Entity(from),
        to: AnyState::Entity(to),
    }
}

/// Attempt number the task's state refers to. A pending or ready task is
/// waiting for its next launch.
pub fn current_attempt(t: &Task) -> u32 {
    match t.state {
        TaskState::Pending | TaskState::Ready => t.attempts + 1,
        _ => t.attempts,
    }
}

fn task_rank(s: TaskState) -> u8 {
    match s {
        TaskState::Pending => 0,
        TaskState::Ready => 1,
        TaskState::Submitted => 2,
        TaskState::Running => 3,
        _ => 4,
    }
}

const TASK_PATH: [TaskState; 4] = [TaskState::Pending, TaskState::Ready, TaskState::Submitted, TaskState::Running];

fn entity_rank(s: EntityState) -> u8 {
    match s {
        EntityState::Pending => 0,
        EntityState::Scheduled => 1,
        _ => 2,
    }
}

/// What [`apply_update`] did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Applied {
    /// Transitions actually performed, with their real `from` states.
    pub steps: Vec<TransitionEvent>,
    pub stage_done: bool,
}

impl Applied {
    pub fn is_noop(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum UpdateError {
    #[error("unknown entity {0}")]
    Unknown(String),
    #[error("update for {0} mixes task and entity states")]
    Malformed(String),
}

fn advance_task(task: &mut Task, attempt: u32, to: TaskState, lost: bool, steps: &mut Vec<TransitionEvent>) {
    let mut push = |task: &mut Task, next: TaskState| {
        steps.push(TransitionEvent {
            kind: EntityKind::Task,
            uid: task.spec.uid.clone(),
            attempt,
            from: AnyState::Task(task.state),
            to: AnyState::Task(next),
        });
        task.state = next;
        if next == TaskState::Submitted {
            task.attempts = attempt;
        }
        if next == TaskState::Failed && lost {
            task.lost += 1;
        }
    };
    while !task.state.can_transition(to) && task_rank(task.state) < 3 {
        let next = TASK_PATH[task_rank(task.state) as usize + 1];
        push(task, next);
    }
    if task.state.can_transition(to) {
        push(task, to);
    }
}

fn apply_task(task: &mut Task, ev: &TransitionEvent, lost: bool) -> Result<Vec<TransitionEvent>, UpdateError> {
    let (AnyState::Task(from), AnyState::Task(to)) = (ev.from, ev.to) else {
        return Err(UpdateError::Malformed(ev.uid.clone()));
    };
    let cur = current_attempt(task);
    if ev.attempt < cur {
        return Ok(Vec::new());
    }
    if ev.attempt > cur {
        // a fresh attempt supersedes whatever the previous one was doing
        task.state = TaskState::Pending;
        task.attempts = ev.attempt - 1;
    } else if task_rank(to) <= task_rank(task.state) {
        return Ok(Vec::new());
    }
    let mut steps = Vec::new();
    if task_rank(task.state) < task_rank(from) {
        advance_task(task, ev.attempt, from, false, &mut steps);
    }
    advance_task(task, ev.attempt, to, lost, &mut steps);
    Ok(steps)
}

fn advance_entity(state: &mut EntityState, kind: EntityKind, uid: &str, to: EntityState) -> Vec<TransitionEvent> {
    let mut steps = Vec::new();
    if entity_rank(to) <= entity_rank(*state) {
        return steps;
    }
    if !state.can_transition(to) && *state == EntityState::Pending {
        steps.push(entity_event(kind, uid, *state, EntityState::Scheduled));
        *state = EntityState::Scheduled;
    }
    if state.can_transition(to) {
        steps.push(entity_event(kind, uid, *state, to));
        *state = to;
    }
    steps
}

/// Applies `u` to pipeline `p`. Never fails on stale or duplicate input;
/// errors only for references to entities that do not exist.
pub fn apply_update(p: &mut Pipeline, u: &StateUpdate) -> Result<Applied, UpdateError> {
    let ev = &u.event;
    let mut out = Applied::default();
    match ev.kind {
        EntityKind::Pipeline => {
            let AnyState::Entity(to) = ev.to else {
                return Err(UpdateError::Malformed(ev.uid.clone()));
            };
            out.steps = advance_entity(&mut p.state, EntityKind::Pipeline, &p.uid.clone(), to);
            if p.state == EntityState::Done && !out.steps.is_empty() {
                p.cursor = p.stages.len();
            }
        }
        EntityKind::Stage => {
            let AnyState::Entity(to) = ev.to else {
                return Err(UpdateError::Malformed(ev.uid.clone()));
            };
            let idx = p.stage_index(&ev.uid).ok_or_else(|| UpdateError::Unknown(ev.uid.clone()))?;
            let s = &mut p.stages[idx];
            out.steps = advance_entity(&mut s.state, EntityKind::Stage, &ev.uid, to);
            if out.steps.iter().any(|e| e.to == AnyState::Entity(EntityState::Scheduled)) {
                p.cursor = idx;
            }
            if s.state == EntityState::Done && !out.steps.is_empty() {
                // a stage completes past failures only if they were ignored
                for t in &mut s.tasks {
                    if t.state == TaskState::Failed {
                        t.ignored = true;
                    }
                }
                out.stage_done = true;
            }
        }
        EntityKind::Task => {
            let stage = u.stage.as_deref().ok_or_else(|| UpdateError::Malformed(ev.uid.clone()))?;
            let s = p.stage_mut(stage).ok_or_else(|| UpdateError::Unknown(stage.to_string()))?;
            let t = s.task_mut(&ev.uid).ok_or_else(|| UpdateError::Unknown(ev.uid.clone()))?;
            out.steps = apply_task(t, ev, u.lost)?;
        }
    }
    Ok(out)
}
