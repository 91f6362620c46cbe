use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;

use super::checkpoint::CheckpointError;
use crate::adapt::{AdaptationError, AdaptationRecord};
use crate::clock::MonotonicClock;
use crate::exec::{AllocationError, Executor, MockExecutor, RetryPolicy, TaskAssignment};
use crate::model::{EntityState, Task, TransitionEvent, ValidationReport, Workflow};
use crate::profiler::{compute_metrics, MetricsReport, ProfileEvent};

/// Deliberate failures, for exercising the recovery paths.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultInjection {
    /// The workflow processor stops after receiving this many messages.
    pub kill_processor_after: Option<u64>,
    /// The execution manager stops after receiving this many messages.
    pub kill_executor_after: Option<u64>,
    /// The whole run stops, checkpoint written, once this many stages are done.
    pub crash_after_stage: Option<u64>,
}

#[derive(Clone)]
pub struct EngineConfig {
    pub executor: Arc<dyn Executor>,
    pub retry: RetryPolicy,
    /// Task stdout/stderr land here.
    pub run_dir: PathBuf,
    pub checkpoint_path: Option<PathBuf>,
    pub profile_path: Option<PathBuf>,
    pub heartbeat_interval: Duration,
    /// How long a pipeline waits for the store to answer a sync request.
    pub ack_timeout: Duration,
    /// Hooks evaluated per pipeline before the run is aborted.
    pub max_adaptations: u64,
    /// Resends of a delta rejected for a stale base version.
    pub sync_retries: u32,
    pub max_reallocations: u32,
    pub auto_recover: bool,
    pub faults: FaultInjection,
    pub clock: MonotonicClock,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            executor: Arc::new(MockExecutor::new()),
            retry: RetryPolicy::default(),
            run_dir: std::env::temp_dir().join("adaptive-ensemble-run"),
            checkpoint_path: None,
            profile_path: None,
            heartbeat_interval: Duration::from_secs(1),
            ack_timeout: Duration::from_secs(10),
            max_adaptations: 10_000,
            sync_retries: 32,
            max_reallocations: 3,
            auto_recover: true,
            faults: FaultInjection::default(),
            clock: MonotonicClock::new(),
        }
    }
}

impl EngineConfig {
    pub fn with_executor(mut self, executor: Arc<dyn Executor>) -> Self {
        self.executor = executor;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_run_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.run_dir = dir.into();
        self
    }

    pub fn with_checkpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint_path = Some(path.into());
        self
    }

    pub fn with_profile(mut self, path: impl Into<PathBuf>) -> Self {
        self.profile_path = Some(path.into());
        self
    }

    pub fn with_faults(mut self, faults: FaultInjection) -> Self {
        self.faults = faults;
        self
    }

    pub fn with_max_adaptations(mut self, n: u64) -> Self {
        self.max_adaptations = n;
        self
    }
}

impl std::fmt::Debug for EngineConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EngineConfig")
            .field("executor", &self.executor.name())
            .field("retry", &self.retry)
            .field("run_dir", &self.run_dir)
            .field("checkpoint_path", &self.checkpoint_path)
            .field("max_adaptations", &self.max_adaptations)
            .field("faults", &self.faults)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("workflow is invalid:\n{0}")]
    Invalid(ValidationReport),
    #[error("no policy bound to {0:?}")]
    UnboundPolicy(String),
    #[error(transparent)]
    Adaptation(#[from] AdaptationError),
    #[error("resource allocation failed: {0}")]
    Allocation(String),
    #[error("pipelines failed after retries: {}", .pipelines.join(", "))]
    ExecutorFailure {
        pipelines: Vec<String>,
        summary: Box<ExecutionSummary>,
    },
    #[error("injected crash after {stages_done} completed stages")]
    InjectedCrash { stages_done: u64 },
    #[error("component {0} failed and automatic recovery is off")]
    ComponentFailed(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("bus: {0}")]
    Bus(#[from] crate::bus::BusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<AllocationError> for EngineError {
    fn from(e: AllocationError) -> Self {
        Self::Allocation(e.to_string())
    }
}

/// Everything a finished run reports.
#[derive(Debug, Clone, Serialize)]
pub struct ExecutionSummary {
    /// Final state of the global store.
    pub workflow: Workflow,
    /// Final local copy held by the workflow processor.
    pub local_workflow: Workflow,
    pub adaptations: Vec<AdaptationRecord>,
    pub transitions: Vec<TransitionEvent>,
    /// One entry per launched attempt, in launch order.
    pub launches: Vec<TaskAssignment>,
    #[serde(skip)]
    pub profile: Vec<ProfileEvent>,
    pub profile_path: Option<PathBuf>,
    /// Versions committed during this run, in commit order.
    pub committed_versions: Vec<u64>,
    pub version: u64,
    pub recoveries: Vec<String>,
    pub makespan_s: f64,
}

impl ExecutionSummary {
    pub fn all_done(&self) -> bool {
        self.workflow.pipelines.iter().all(|p| p.state == EntityState::Done)
    }

    pub fn failed_pipelines(&self) -> Vec<String> {
        self.workflow
            .pipelines
            .iter()
            .filter(|p| p.state == EntityState::Failed)
            .map(|p| p.uid.clone())
            .collect()
    }

    pub fn local_matches_global(&self) -> bool {
        self.local_workflow == self.workflow
    }

    pub fn task(&self, uid: &str) -> Option<&Task> {
        self.workflow.tasks().map(|(_, _, t)| t).find(|t| t.spec.uid == uid)
    }

    /// `uid -> state` for every pipeline, stage and task.
    pub fn entity_states(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for p in &self.workflow.pipelines {
            out.insert(p.uid.clone(), p.state.to_string());
            for s in &p.stages {
                out.insert(format!("{}/{}", p.uid, s.uid), s.state.to_string());
                for t in &s.tasks {
                    out.insert(format!("{}/{}/{}", p.uid, s.uid, t.spec.uid), t.state.to_string());
                }
            }
        }
        out
    }

    pub fn metrics(&self) -> MetricsReport {
        compute_metrics(&self.profile)
    }
}

/// Liveness beacon a component touches on every loop iteration.
#[derive(Debug)]
pub(crate) struct Heartbeat {
    clock: MonotonicClock,
    last: AtomicU64,
}

impl Heartbeat {
    pub(crate) fn new(clock: MonotonicClock) -> Arc<Self> {
        let last = AtomicU64::new(clock.now_ns());
        Arc::new(Self { clock, last })
    }

    pub(crate) fn beat(&self) {
        self.last.store(self.clock.now_ns(), Ordering::Relaxed);
    }

    pub(crate) fn age(&self) -> Duration {
        Duration::from_nanos(self.clock.now_ns().saturating_sub(self.last.load(Ordering::Relaxed)))
    }
}
