//! Pipeline / stage / task description types.
//!
//! A [`Workflow`] is a set of pipelines that run concurrently. Each
//! [`Pipeline`] is an ordered list of stages that run one after another, and
//! each [`Stage`] is a set of tasks with no mutual dependencies.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::state::{EntityState, TaskState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeType {
    #[default]
    SingleNode,
    MultiNode,
}

/// Description of one computational process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub uid: String,
    pub executable: String,
    #[serde(default)]
    pub arguments: Vec<String>,
    /// Cores per node. Multi-node tasks occupy whole nodes regardless.
    pub cores: u32,
    #[serde(default)]
    pub node_type: NodeType,
    pub node_count: u32,
    /// Seconds the mock executor sleeps for this task.
    #[serde(default)]
    pub duration_hint: Option<f64>,
    #[serde(default)]
    pub input_refs: Vec<String>,
    #[serde(default)]
    pub environment: BTreeMap<String, String>,
}

impl TaskSpec {
    pub fn new(uid: impl Into<String>, executable: impl Into<String>) -> Self {
        Self {
            uid: uid.into(),
            executable: executable.into(),
            arguments: Vec::new(),
            cores: 1,
            node_type: NodeType::SingleNode,
            node_count: 1,
            duration_hint: None,
            input_refs: Vec::new(),
            environment: BTreeMap::new(),
        }
    }

    pub fn with_cores(mut self, cores: u32) -> Self {
        self.cores = cores;
        self
    }

    /// Spans `nodes` whole nodes.
    pub fn multi_node(mut self, nodes: u32) -> Self {
        self.node_type = NodeType::MultiNode;
        self.node_count = nodes;
        self
    }

    pub fn with_duration(mut self, seconds: f64) -> Self {
        self.duration_hint = Some(seconds);
        self
    }

    pub fn with_args<I, S>(mut self, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.arguments = args.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_env(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.environment.insert(key.into(), value.into());
        self
    }
}

/// A task plus its runtime bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub spec: TaskSpec,
    pub state: TaskState,
    /// Number of launches so far.
    pub attempts: u32,
    /// Set when a failed task was ignored so its stage could complete.
    #[serde(default)]
    pub ignored: bool,
    /// Attempts killed by a runtime failure rather than failing on their own;
    /// they do not count against the retry budget.
    #[serde(default)]
    pub lost: u32,
}

impl Task {
    pub fn new(spec: TaskSpec) -> Self {
        Self {
            spec,
            state: TaskState::Pending,
            attempts: 0,
            ignored: false,
            lost: 0,
        }
    }

    pub fn uid(&self) -> &str {
        &self.spec.uid
    }

    /// Terminal in the sense that matters for stage completion.
    pub fn is_settled(&self) -> bool {
        match self.state {
            TaskState::Done | TaskState::Canceled => true,
            TaskState::Failed => self.ignored,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub uid: String,
    pub tasks: Vec<Task>,
    pub state: EntityState,
    /// Key of an adaptation policy in the run's bindings.
    #[serde(default)]
    pub post_exec: Option<String>,
}

impl Stage {
    pub fn new(uid: impl Into<String>) -> Self {
        Self {
            uid: uid.into(),
            tasks: Vec::new(),
            state: EntityState::Pending,
            post_exec: None,
        }
    }

    pub fn with_tasks<I: IntoIterator<Item = TaskSpec>>(mut self, tasks: I) -> Self {
        self.tasks.extend(tasks.into_iter().map(Task::new));
        self
    }

    pub fn add_task(&mut self, spec: TaskSpec) {
        self.tasks.push(Task::new(spec));
    }

    pub fn with_post_exec(mut self, policy: impl Into<String>) -> Self {
        self.post_exec = Some(policy.into());
        self
    }

    pub fn task(&self, uid: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.spec.uid == uid)
    }

    pub fn task_mut(&mut self, uid: &str) -> Option<&mut Task> {
        self.tasks.iter_mut().find(|t| t.spec.uid == uid)
    }

    pub fn all_settled(&self) -> bool {
        self.tasks.iter().all(Task::is_settled)
    }

    /// A stage may be adapted only while it and all of its tasks are untouched.
    pub fn is_future(&self) -> bool {
        self.state == EntityState::Pending
            && self.tasks.iter().all(|t| t.state == TaskState::Pending)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub uid: String,
    pub stages: Vec<Stage>,
    /// Index of the stage currently executing; `stages.len()` once finished.
    pub cursor: usize,
    pub state: EntityState,
    #[serde(default)]
    pub post_exec: Option<String>,
    /// Post-exec triggers evaluated so far on this pipeline.
    #[serde(default)]
    pub adaptations: u64,
    /// Monotone counter used to mint fresh stage uids.
    #[serde(default)]
    pub next_stage_seq: u64,
}

impl Pipeline {
    pub fn new(uid: impl Into<String>) -> Self {
        Self {
            uid: uid.into(),
            stages: Vec::new(),
            cursor: 0,
            state: EntityState::Pending,
            post_exec: None,
            adaptations: 0,
            next_stage_seq: 0,
        }
    }

    pub fn with_stage(mut self, stage: Stage) -> Self {
        self.add_stage(stage);
        self
    }

    pub fn add_stage(&mut self, stage: Stage) {
        self.stages.push(stage);
        self.next_stage_seq = self.next_stage_seq.max(self.stages.len() as u64);
    }

    pub fn with_post_exec(mut self, policy: impl Into<String>) -> Self {
        self.post_exec = Some(policy.into());
        self
    }

    pub fn stage(&self, uid: &str) -> Option<&Stage> {
        self.stages.iter().find(|s| s.uid == uid)
    }

    pub fn stage_index(&self, uid: &str) -> Option<usize> {
        self.stages.iter().position(|s| s.uid == uid)
    }

    pub fn stage_mut(&mut self, uid: &str) -> Option<&mut Stage> {
        self.stages.iter_mut().find(|s| s.uid == uid)
    }

    /// Index of the first stage that is not terminal.
    pub fn first_open_stage(&self) -> usize {
        self.stages
            .iter()
            .position(|s| !s.state.is_terminal())
            .unwrap_or(self.stages.len())
    }

    pub fn task_count(&self) -> usize {
        self.stages.iter().map(|s| s.tasks.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workflow {
    pub pipelines: Vec<Pipeline>,
    /// Directory ensemble members use to exchange data asynchronously.
    #[serde(default)]
    pub shared_data_dir: PathBuf,
}

impl Workflow {
    pub fn new() -> Self {
        Self {
            pipelines: Vec::new(),
            shared_data_dir: std::env::temp_dir().join("adaptive-ensemble-shared"),
        }
    }

    pub fn with_pipeline(mut self, pipeline: Pipeline) -> Self {
        self.pipelines.push(pipeline);
        self
    }

    pub fn with_shared_data_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.shared_data_dir = dir.into();
        self
    }

    pub fn pipeline(&self, uid: &str) -> Option<&Pipeline> {
        self.pipelines.iter().find(|p| p.uid == uid)
    }

    pub fn pipeline_mut(&mut self, uid: &str) -> Option<&mut Pipeline> {
        self.pipelines.iter_mut().find(|p| p.uid == uid)
    }

    pub fn tasks(&self) -> impl Iterator<Item = (&Pipeline, &Stage, &Task)> {
        self.pipelines.iter().flat_map(|p| {
            p.stages
                .iter()
                .flat_map(move |s| s.tasks.iter().map(move |t| (p, s, t)))
        })
    }

    pub fn task_count(&self) -> usize {
        self.pipelines.iter().map(Pipeline::task_count).sum()
    }

    pub fn is_finished(&self) -> bool {
        self.pipelines.iter().all(|p| p.state.is_terminal())
    }
}

impl Default for Workflow {
    fn default() -> Self {
        Self::new()
    }
}

/// Slash-qualified path of an entity, e.g. `p0/s1/t3`. Used as the entity id in
/// profiles so that the pipeline/stage of every task is recoverable.
pub fn entity_path(pipeline: &str, stage: Option<&str>, task: Option<&str>) -> String {
    match (stage, task) {
        (Some(s), Some(t)) => format!("{pipeline}/{s}/{t}"),
        (Some(s), None) => format!("{pipeline}/{s}"),
        _ => pipeline.to_string(),
    }
}
