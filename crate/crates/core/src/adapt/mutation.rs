//! Staged changes to a pipeline and the guard that restricts them to
//! not-yet-executed entities.

use serde::{Deserialize, Serialize};

use crate::model::{NodeType, Pipeline, Stage, Task, TaskSpec, TaskState};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskUpdate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cores: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_type: Option<NodeType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executable: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arguments: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_hint: Option<f64>,
}

impl TaskUpdate {
    pub fn cores(cores: u32) -> Self {
        Self {
            cores: Some(cores),
            ..Self::default()
        }
    }

    /// Applies the update, returning whether anything changed.
    pub fn apply(&self, t: &mut TaskSpec) -> bool {
        let before = t.clone();
        if let Some(c) = self.cores {
            t.cores = c;
        }
        if let Some(nt) = self.node_type {
            t.node_type = nt;
        }
        if let Some(n) = self.node_count {
            t.node_count = n;
        }
        if let Some(e) = &self.executable {
            t.executable = e.clone();
        }
        if let Some(a) = &self.arguments {
            t.arguments = a.clone();
        }
        if let Some(d) = self.duration_hint {
            t.duration_hint = Some(d);
        }
        *t != before
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Mutation {
    AppendStage { stage: Stage },
    RemoveStage { stage: String },
    AddTask { stage: String, task: TaskSpec },
    RemoveTask { stage: String, task: String },
    /// New order of the pipeline's future stages, by uid.
    ReorderStages { order: Vec<String> },
    UpdateTask { stage: String, task: String, update: TaskUpdate },
}

impl Mutation {
    /// Task uids this mutation introduces.
    pub fn new_task_uids(&self) -> Vec<&str> {
        match self {
            Mutation::AppendStage { stage } => stage.tasks.iter().map(|t| t.uid()).collect(),
            Mutation::AddTask { task, .. } => vec![task.uid.as_str()],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum MutationError {
    #[error("entity {uid} is {state} and cannot be adapted")]
    Guard { uid: String, state: String },
    #[error("unknown entity {0}")]
    Unknown(String),
    #[error("uid {0} already exists")]
    Conflict(String),
    #[error("invalid reorder: {0}")]
    InvalidOrder(String),
    #[error("invalid mutation: {0}")]
    Invalid(String),
}

/// Index where the run of future stages at the tail of the pipeline begins.
pub fn future_start(p: &Pipeline) -> usize {
    let mut i = p.stages.len();
    while i > 0 && p.stages[i - 1].is_future() {
        i -= 1;
    }
    i
}

fn future_stage_mut<'a>(p: &'a mut Pipeline, uid: &str) -> Result<&'a mut Stage, MutationError> {
    let start = future_start(p);
    match p.stages.iter().position(|s| s.uid == uid) {
        None => Err(MutationError::Unknown(uid.to_string())),
        Some(i) if i < start => Err(MutationError::Guard {
            uid: uid.to_string(),
            state: p.stages[i].state.to_string(),
        }),
        Some(i) => Ok(&mut p.stages[i]),
    }
}

/// Applies one mutation, refusing anything that touches a stage or task that
/// has already been scheduled, is running, or has finished.
pub fn apply_mutation(p: &mut Pipeline, m: &Mutation) -> Result<(), MutationError> {
    match m {
        Mutation::AppendStage { stage } => {
            if p.stages.iter().any(|s| s.uid == stage.uid) {
                return Err(MutationError::Conflict(stage.uid.clone()));
            }
            if !stage.is_future() {
                return Err(MutationError::Invalid(format!(
                    "appended stage {} must be pending",
                    stage.uid
                )));
            }
            if stage.tasks.is_empty() {
                return Err(MutationError::Invalid(format!("appended stage {} has no tasks", stage.uid)));
            }
            p.stages.push(stage.clone());
            p.next_stage_seq = (p.next_stage_seq + 1).max(p.stages.len() as u64);
        }
        Mutation::RemoveStage { stage } => {
            future_stage_mut(p, stage)?;
            p.stages.retain(|s| &s.uid != stage);
        }
        Mutation::AddTask { stage, task } => {
            let s = future_stage_mut(p, stage)?;
            if s.task(&task.uid).is_some() {
                return Err(MutationError::Conflict(task.uid.clone()));
            }
            s.tasks.push(Task::new(task.clone()));
        }
        Mutation::RemoveTask { stage, task } => {
            let s = future_stage_mut(p, stage)?;
            if s.task(task).is_none() {
                return Err(MutationError::Unknown(task.clone()));
            }
            if s.tasks.len() == 1 {
                return Err(MutationError::Invalid(format!(
                    "removing {task} would leave stage {stage} empty"
                )));
            }
            s.tasks.retain(|t| t.uid() != task);
        }
        // Permutes the last `order.len()` stages, all of which must be future.
        // Addressing the tail keeps the mutation replayable on an earlier
        // version of the pipeline.
        Mutation::ReorderStages { order } => {
            let n = order.len();
            if n > p.stages.len() {
                return Err(MutationError::InvalidOrder(format!(
                    "{n} stages listed, pipeline has {}",
                    p.stages.len()
                )));
            }
            let start = p.stages.len() - n;
            let future = future_start(p);
            let mut picks = Vec::with_capacity(n);
            for uid in order {
                match p.stages.iter().position(|s| &s.uid == uid) {
                    Some(i) if i < future => {
                        return Err(MutationError::Guard {
                            uid: uid.clone(),
                            state: p.stages[i].state.to_string(),
                        })
                    }
                    Some(i) if i < start => {
                        return Err(MutationError::InvalidOrder(format!("{uid} is not among the last {n} stages")))
                    }
                    Some(i) if !picks.contains(&i) => picks.push(i),
                    Some(_) => return Err(MutationError::InvalidOrder(format!("{uid} listed twice"))),
                    None => return Err(MutationError::Unknown(uid.clone())),
                }
            }
            let mut tail: Vec<Option<Stage>> = p.stages.drain(start..).map(Some).collect();
            for i in picks {
                p.stages.push(tail[i - start].take().expect("each index picked once"));
            }
        }
        Mutation::UpdateTask { stage, task, update } => {
            let s = future_stage_mut(p, stage)?;
            let t = s.task_mut(task).ok_or_else(|| MutationError::Unknown(task.clone()))?;
            if t.state != TaskState::Pending {
                return Err(MutationError::Guard {
                    uid: task.clone(),
                    state: t.state.to_string(),
                });
            }
            update.apply(&mut t.spec);
        }
    }
    Ok(())
}
