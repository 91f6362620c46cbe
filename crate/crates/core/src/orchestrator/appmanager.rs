//! The AppManager: owns the global store, applies what the components
//! report, answers sync requests and restarts components that die.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use super::checkpoint::{read_checkpoint, write_checkpoint};
use super::config::{EngineConfig, EngineError, ExecutionSummary, Heartbeat};
use super::emgr::{EmgrHandle, EmgrShared};
use super::messages::{
    sync_reply_queue, AppManagerMsg, Completion, Fatal, SyncReply, SyncResult, WfpMsg, Q_APPMANAGER, Q_EMGR, Q_WFP,
};
use super::processor::{Slot, WfpHandle, WfpShared};
use super::store::GlobalGraphStore;
use crate::adapt::{AdaptationRecord, PolicyBindings, UidRegistry};
use crate::bus::{Consumer, MessageBus};
use crate::exec::{allocate_pool, ResourceRequest, TaskAssignment, EXIT_KILLED};
use crate::model::{rule, validate_workflow, TaskState, Workflow};
use crate::profiler::{write_csv_file, Recorder};

const POLL: Duration = Duration::from_millis(5);
/// Restarts tolerated per run before giving up on a component.
const MAX_RECOVERIES: usize = 16;
/// Longest a changed store goes unwritten while the inbox stays busy.
const CHECKPOINT_EVERY: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComponentId {
    WorkflowProcessor,
    ExecutionManager,
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::WorkflowProcessor => "workflow_processor",
            Self::ExecutionManager => "execution_manager",
        })
    }
}

pub struct AppManager {
    store: GlobalGraphStore,
    bus: MessageBus,
    inbox: Consumer,
    recorder: Recorder,
    config: EngineConfig,
    bindings: Arc<PolicyBindings>,
    resources: ResourceRequest,
    shared_data_dir: PathBuf,
    wfp: Option<WfpHandle>,
    emgr: Option<EmgrHandle>,
    wfp_spawned: u32,
    emgr_spawned: u32,
    records: Arc<Mutex<Vec<AdaptationRecord>>>,
    launches: Arc<Mutex<Vec<TaskAssignment>>>,
    committed: Vec<u64>,
    /// Set when the store changed after the last checkpoint write.
    dirty_since: Option<Instant>,
    recoveries: Vec<String>,
    error: Option<EngineError>,
    local_workflow: Option<Workflow>,
    t_start: u64,
}

/// Validates, starts the components and runs `w` to completion.
pub fn run_workflow(
    w: Workflow,
    resources: ResourceRequest,
    bindings: PolicyBindings,
    config: EngineConfig,
) -> Result<ExecutionSummary, EngineError> {
    AppManager::start(w, resources, bindings, config)?.run()
}

/// Continues a run from a checkpoint. Work that was in flight when the
/// checkpoint was written is executed again.
pub fn resume_from_checkpoint(
    path: &Path,
    resources: ResourceRequest,
    bindings: PolicyBindings,
    config: EngineConfig,
) -> Result<ExecutionSummary, EngineError> {
    let mut store = read_checkpoint(path)?;
    store.reset_in_flight();
    AppManager::from_store(store, resources, bindings, config)?.run()
}

impl AppManager {
    pub fn start(
        w: Workflow,
        resources: ResourceRequest,
        bindings: PolicyBindings,
        config: EngineConfig,
    ) -> Result<Self, EngineError> {
        let mut report = validate_workflow(&w);
        report.violations.retain(|v| v.rule != rule::WORKFLOW_EMPTY);
        if !report.is_empty() {
            return Err(EngineError::Invalid(report));
        }
        Self::from_store(GlobalGraphStore::new(w), resources, bindings, config)
    }

    pub fn from_store(
        store: GlobalGraphStore,
        resources: ResourceRequest,
        bindings: PolicyBindings,
        config: EngineConfig,
    ) -> Result<Self, EngineError> {
        let w = store.workflow();
        let keys = w
            .pipelines
            .iter()
            .flat_map(|p| p.post_exec.iter().chain(p.stages.iter().filter_map(|s| s.post_exec.as_ref())));
        for key in keys {
            if bindings.get(key).is_none() {
                return Err(EngineError::UnboundPolicy(key.clone()));
            }
        }
        allocate_pool(&resources)?;
        let shared_data_dir = w.shared_data_dir.clone();
        std::fs::create_dir_all(&config.run_dir)?;
        std::fs::create_dir_all(&shared_data_dir)?;

        let bus = MessageBus::new();
        for q in [Q_APPMANAGER, Q_WFP, Q_EMGR] {
            bus.declare(q);
        }
        for p in &w.pipelines {
            bus.declare(&sync_reply_queue(&p.uid));
        }
        let inbox = bus.consumer(Q_APPMANAGER)?;
        let recorder = Recorder::new(config.clock.clone());
        let t_start = config.clock.now_ns();
        let mut am = Self {
            store,
            bus,
            inbox,
            recorder,
            config,
            bindings: Arc::new(bindings),
            resources,
            shared_data_dir,
            wfp: None,
            emgr: None,
            wfp_spawned: 0,
            emgr_spawned: 0,
            records: Arc::default(),
            launches: Arc::default(),
            committed: Vec::new(),
            dirty_since: None,
            recoveries: Vec::new(),
            error: None,
            local_workflow: None,
            t_start,
        };
        am.emgr = Some(am.spawn_emgr()?);
        am.wfp = Some(am.spawn_wfp()?);
        am.bus.publish(Q_WFP, &WfpMsg::Scan)?;
        Ok(am)
    }

    pub fn store(&self) -> &GlobalGraphStore {
        &self.store
    }

    fn spawn_wfp(&mut self) -> Result<WfpHandle, EngineError> {
        let w = self.store.workflow();
        let slots = w.pipelines.iter().map(|p| Arc::new(Slot::new(p.clone()))).collect();
        let kill_after = if self.wfp_spawned == 0 {
            self.config.faults.kill_processor_after
        } else {
            None
        };
        self.wfp_spawned += 1;
        let shared = WfpShared {
            bus: self.bus.clone(),
            recorder: self.recorder.clone(),
            bindings: self.bindings.clone(),
            registry: UidRegistry::from_workflow(w),
            retry: self.config.retry.clone(),
            max_adaptations: self.config.max_adaptations,
            sync_retries: self.config.sync_retries,
            ack_timeout: self.config.ack_timeout,
            shared_data_dir: self.shared_data_dir.clone(),
            slots,
            version: AtomicU64::new(self.store.version()),
            handled: Mutex::new(self.store.handled().keys().cloned().collect::<HashSet<_>>()),
            records: self.records.clone(),
            stop: AtomicBool::new(false),
            heartbeat: Heartbeat::new(self.config.clock.clone()),
            kill_after,
            // unique across instances, so replies meant for a dead
            // predecessor are never mistaken for our own
            request_seq: AtomicU64::new(self.config.clock.now_ns()),
            sync_lock: Mutex::new(()),
        };
        Ok(WfpHandle::spawn(shared)?)
    }

    fn spawn_emgr(&mut self) -> Result<EmgrHandle, EngineError> {
        let kill_after = if self.emgr_spawned == 0 {
            self.config.faults.kill_executor_after
        } else {
            None
        };
        self.emgr_spawned += 1;
        let shared = EmgrShared {
            bus: self.bus.clone(),
            recorder: self.recorder.clone(),
            executor: self.config.executor.clone(),
            resources: self.resources.clone(),
            run_dir: self.config.run_dir.clone(),
            shared_data_dir: self.shared_data_dir.clone(),
            launches: self.launches.clone(),
            stop: AtomicBool::new(false),
            heartbeat: Heartbeat::new(self.config.clock.clone()),
            kill_after,
            max_reallocations: self.config.max_reallocations,
        };
        Ok(EmgrHandle::spawn(shared)?)
    }

    /// Drives the run until every pipeline is terminal or something fatal
    /// happens, then shuts the components down and reports.
    pub fn run(mut self) -> Result<ExecutionSummary, EngineError> {
        let outcome = self.event_loop();
        self.shutdown();
        match outcome {
            Ok(()) => {
                self.final_checkpoint()?;
                let summary = self.summary()?;
                let failed = summary.failed_pipelines();
                if failed.is_empty() {
                    Ok(summary)
                } else {
                    Err(EngineError::ExecutorFailure {
                        pipelines: failed,
                        summary: Box::new(summary),
                    })
                }
            }
            // the checkpoint stays as it was at the crash point
            Err(e @ EngineError::InjectedCrash { .. }) => Err(e),
            Err(e) => {
                if let Err(ce) = self.final_checkpoint() {
                    log::error!("cannot write checkpoint: {ce}");
                }
                Err(e)
            }
        }
    }

    fn event_loop(&mut self) -> Result<(), EngineError> {
        loop {
            if let Some(e) = self.error.take() {
                if self.dirty_since.is_some() {
                    self.final_checkpoint()?;
                }
                return Err(e);
            }
            if self.store.workflow().is_finished() {
                return Ok(());
            }
            let busy = self.pump(POLL)?;
            if let Some(since) = self.dirty_since {
                if !busy || since.elapsed() >= CHECKPOINT_EVERY {
                    self.final_checkpoint()?;
                }
            }
            if self.error.is_none() {
                self.monitor()?;
            }
        }
    }

    /// Handles at most one inbox message. Returns whether there was one.
    fn pump(&mut self, timeout: Duration) -> Result<bool, EngineError> {
        let env = if timeout.is_zero() {
            self.inbox.try_recv()?
        } else {
            self.inbox.recv_timeout(timeout)?
        };
        let Some(env) = env else {
            return Ok(false);
        };
        match env.decode::<AppManagerMsg>() {
            Ok(msg) => self.handle(msg)?,
            Err(e) => log::error!("app manager: undecodable message {}: {e}", env.id),
        }
        self.inbox.ack(env.id)?;
        Ok(true)
    }

    fn handle(&mut self, msg: AppManagerMsg) -> Result<(), EngineError> {
        match msg {
            AppManagerMsg::State(u) => {
                let applied = match self.store.apply_update(&u) {
                    Ok(a) => a,
                    Err(e) => {
                        log::error!("app manager: {e}");
                        return Ok(());
                    }
                };
                if applied.stage_done {
                    self.dirty_since.get_or_insert_with(Instant::now);
                    let done = self.store.stages_done();
                    if self.config.faults.crash_after_stage == Some(done) && self.error.is_none() {
                        log::warn!("injected crash after {done} completed stages");
                        self.error = Some(EngineError::InjectedCrash { stages_done: done });
                    }
                }
            }
            AppManagerMsg::Sync {
                request,
                reply_to,
                delta,
            } => {
                let before = self.store.version();
                let result = match self.store.propose(&delta) {
                    Ok(version) => {
                        if version > before {
                            self.committed.push(version);
                            self.dirty_since.get_or_insert_with(Instant::now);
                        }
                        SyncResult::Ack { version }
                    }
                    Err(reason) => {
                        log::debug!("delta {} rejected: {reason}", delta.trigger_uid);
                        SyncResult::Reject {
                            reason,
                            version: self.store.version(),
                        }
                    }
                };
                self.bus.publish(&reply_to, &SyncReply { request, result })?;
            }
            AppManagerMsg::TriggerHandled { pipeline, trigger } => {
                self.store.mark_handled(&pipeline, &trigger);
            }
            AppManagerMsg::Fatal(f) => {
                if self.error.is_none() {
                    self.error = Some(match f {
                        Fatal::Adaptation(e) => EngineError::Adaptation(e),
                        Fatal::Allocation(m) => EngineError::Allocation(m),
                    });
                }
            }
        }
        Ok(())
    }

    fn monitor(&mut self) -> Result<(), EngineError> {
        let limit = self.config.heartbeat_interval * 3;
        let wfp_down = self
            .wfp
            .as_ref()
            .map_or(true, |h| h.is_finished() || h.shared.heartbeat.age() > limit);
        let emgr_down = self
            .emgr
            .as_ref()
            .map_or(true, |h| h.is_finished() || h.shared.heartbeat.age() > limit);
        for (down, id) in [
            (emgr_down, ComponentId::ExecutionManager),
            (wfp_down, ComponentId::WorkflowProcessor),
        ] {
            if !down {
                continue;
            }
            if !self.config.auto_recover || self.recoveries.len() >= MAX_RECOVERIES {
                return Err(EngineError::ComponentFailed(id.to_string()));
            }
            self.recover_component(id)?;
        }
        Ok(())
    }

    /// Replaces a component. The old instance is stopped, its last reports
    /// are applied, and the replacement starts from the global store.
    pub fn recover_component(&mut self, id: ComponentId) -> Result<(), EngineError> {
        log::warn!("recovering {id}");
        self.recoveries.push(id.to_string());
        match id {
            ComponentId::WorkflowProcessor => {
                if let Some(old) = self.wfp.take() {
                    old.shared.stop.store(true, std::sync::atomic::Ordering::SeqCst);
                    // the old workers may be waiting on a sync reply
                    while !old.is_finished() {
                        self.pump(POLL)?;
                    }
                    let _ = old.thread.join();
                }
                while self.pump(Duration::ZERO)? {}
                self.wfp = Some(self.spawn_wfp()?);
                self.bus.publish(Q_WFP, &WfpMsg::Scan)?;
            }
            ComponentId::ExecutionManager => {
                if let Some(old) = self.emgr.take() {
                    old.shared.stop.store(true, std::sync::atomic::Ordering::SeqCst);
                    while !old.is_finished() {
                        self.pump(POLL)?;
                    }
                    let _ = old.thread.join();
                }
                while self.pump(Duration::ZERO)? {}
                // whatever the old instance had launched died with it
                let lost: Vec<Completion> = self
                    .store
                    .workflow()
                    .tasks()
                    .filter(|(_, _, t)| t.state.is_in_flight())
                    .map(|(p, s, t)| Completion {
                        pipeline: p.uid.clone(),
                        stage: s.uid.clone(),
                        task: t.spec.uid.clone(),
                        attempt: t.attempts,
                        exit_code: EXIT_KILLED,
                        files: Vec::new(),
                        launched: t.state == TaskState::Running,
                        lost: true,
                        permanent: None,
                    })
                    .collect();
                for c in lost {
                    self.bus.publish(Q_WFP, &WfpMsg::Completed(c))?;
                }
                self.emgr = Some(self.spawn_emgr()?);
            }
        }
        Ok(())
    }

    fn shutdown(&mut self) {
        if let Some(h) = self.wfp.take() {
            h.shared.stop.store(true, std::sync::atomic::Ordering::SeqCst);
            while !h.is_finished() {
                if self.pump(POLL).is_err() {
                    break;
                }
            }
            let _ = h.thread.join();
            self.local_workflow = Some(h.shared.local_workflow());
        }
        if let Some(h) = self.emgr.take() {
            h.shared.stop.store(true, std::sync::atomic::Ordering::SeqCst);
            let _ = h.thread.join();
        }
        while let Ok(true) = self.pump(Duration::ZERO) {}
    }

    fn final_checkpoint(&mut self) -> Result<(), EngineError> {
        self.dirty_since = None;
        if let Some(path) = &self.config.checkpoint_path {
            write_checkpoint(path, &self.store)?;
        }
        Ok(())
    }

    fn summary(&mut self) -> Result<ExecutionSummary, EngineError> {
        let mut profile = self.recorder.snapshot();
        profile.sort_by_key(|e| e.t);
        if let Some(path) = &self.config.profile_path {
            write_csv_file(path, &profile)?;
        }
        let workflow = self.store.workflow().clone();
        let makespan_ns = self.config.clock.now_ns().saturating_sub(self.t_start);
        Ok(ExecutionSummary {
            local_workflow: self.local_workflow.take().unwrap_or_else(|| workflow.clone()),
            workflow,
            adaptations: self.records.lock().clone(),
            transitions: self.store.transitions().to_vec(),
            launches: self.launches.lock().clone(),
            profile,
            profile_path: self.config.profile_path.clone(),
            committed_versions: self.committed.clone(),
            version: self.store.version(),
            recoveries: self.recoveries.clone(),
            makespan_s: makespan_ns as f64 * 1e-9,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::{AdaptationPolicy, AddStages, Branch, BranchTaken, Condition};
    use crate::exec::{FaultInjectingExecutor, FaultPlan, MockExecutor, RetryPolicy};
    use crate::model::{check_transition_log, EntityState, Pipeline, Stage, TaskSpec};
    use crate::orchestrator::FaultInjection;

    fn ensemble(pipelines: usize, stages: usize, tasks: usize, dir: &Path) -> Workflow {
        let mut w = Workflow::new().with_shared_data_dir(dir.join("shared"));
        for p in 0..pipelines {
            let mut pipe = Pipeline::new(format!("p{p}"));
            for s in 0..stages {
                let specs = (0..tasks).map(|t| TaskSpec::new(format!("p{p}.s{s}.t{t}"), "sleep").with_duration(0.005));
                pipe.add_stage(Stage::new(format!("s{s}")).with_tasks(specs));
            }
            w.pipelines.push(pipe);
        }
        w
    }

    fn config(dir: &Path) -> EngineConfig {
        EngineConfig::default().with_run_dir(dir.join("run"))
    }

    fn pool() -> ResourceRequest {
        ResourceRequest::new(2, 4)
    }

    #[test]
    fn sixteen_tasks_finish() {
        let dir = tempfile::tempdir().unwrap();
        let s = run_workflow(ensemble(4, 2, 2, dir.path()), pool(), PolicyBindings::new(), config(dir.path())).unwrap();
        assert!(s.all_done());
        assert_eq!(s.workflow.tasks().filter(|(_, _, t)| t.state == TaskState::Done).count(), 16);
        assert_eq!(s.launches.len(), 16);
        assert!(s.local_matches_global());
        let v = check_transition_log(&s.transitions);
        assert!(v.is_empty(), "{v:?}");
        assert!(s.metrics().flags.is_empty(), "{:?}", s.metrics().flags);
    }

    #[test]
    fn empty_workflow_is_trivially_done() {
        let dir = tempfile::tempdir().unwrap();
        let w = Workflow::new().with_shared_data_dir(dir.path().join("shared"));
        let s = run_workflow(w, pool(), PolicyBindings::new(), config(dir.path())).unwrap();
        assert!(s.launches.is_empty());
    }

    #[test]
    fn unbound_hook_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ensemble(1, 1, 1, dir.path());
        w.pipelines[0].stages[0].post_exec = Some("missing".into());
        let err = run_workflow(w, pool(), PolicyBindings::new(), config(dir.path())).unwrap_err();
        assert!(matches!(err, EngineError::UnboundPolicy(k) if k == "missing"));
    }

    fn growing(dir: &Path) -> (Workflow, PolicyBindings) {
        let mut w = ensemble(1, 1, 2, dir);
        w.pipelines[0].stages[0].post_exec = Some("grow".into());
        let add = AddStages::new(1, 2, TaskSpec::new("x", "sleep").with_duration(0.002))
            .inherit()
            .build()
            .unwrap();
        let policy = AdaptationPolicy::new(Condition::iterations_below(4), add, Branch::noop());
        (w, PolicyBindings::new().bind("grow", policy))
    }

    #[test]
    fn hook_grows_pipeline_until_condition_fails() {
        let dir = tempfile::tempdir().unwrap();
        let (w, b) = growing(dir.path());
        let s = run_workflow(w, pool(), b, config(dir.path())).unwrap();
        assert_eq!(s.workflow.pipelines[0].stages.len(), 5);
        let taken: Vec<_> = s.adaptations.iter().map(|r| r.branch_taken).collect();
        assert_eq!(taken[..4], [BranchTaken::True; 4]);
        assert_eq!(taken[4], BranchTaken::False);
        assert_eq!(s.committed_versions, [1, 2, 3, 4]);
        assert!(s.local_matches_global());
    }

    #[test]
    fn failed_attempts_are_retried() {
        let dir = tempfile::tempdir().unwrap();
        let exec = FaultInjectingExecutor::new(Arc::new(MockExecutor::new()), FaultPlan::fail_first(1));
        let cfg = config(dir.path()).with_executor(Arc::new(exec));
        let s = run_workflow(ensemble(2, 2, 2, dir.path()), pool(), PolicyBindings::new(), cfg).unwrap();
        assert!(s.all_done());
        assert!(s.workflow.tasks().all(|(_, _, t)| t.attempts == 2));
    }

    #[test]
    fn exhausted_retries_with_abort_fail_the_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let plan = FaultPlan {
            fail_tasks: vec!["p0.s0.t0".into()],
            ..FaultPlan::default()
        };
        let exec = FaultInjectingExecutor::new(Arc::new(MockExecutor::new()), plan);
        let cfg = config(dir.path()).with_executor(Arc::new(exec)).with_retry(RetryPolicy::abort());
        let err = run_workflow(ensemble(2, 2, 1, dir.path()), pool(), PolicyBindings::new(), cfg).unwrap_err();
        let EngineError::ExecutorFailure { pipelines, summary } = err else {
            panic!("unexpected error")
        };
        assert_eq!(pipelines, ["p0"]);
        assert_eq!(summary.workflow.pipelines[1].state, EntityState::Done);
    }

    fn final_states(s: &ExecutionSummary) -> Vec<(String, TaskState)> {
        s.workflow.tasks().map(|(_, _, t)| (t.spec.uid.clone(), t.state)).collect()
    }

    #[test]
    fn processor_failure_is_recovered() {
        let dir = tempfile::tempdir().unwrap();
        let base = run_workflow(ensemble(3, 2, 2, dir.path()), pool(), PolicyBindings::new(), config(dir.path())).unwrap();
        let faults = FaultInjection {
            kill_processor_after: Some(4),
            ..FaultInjection::default()
        };
        let cfg = config(dir.path()).with_faults(faults);
        let s = run_workflow(ensemble(3, 2, 2, dir.path()), pool(), PolicyBindings::new(), cfg).unwrap();
        assert_eq!(s.recoveries, ["workflow_processor"]);
        assert_eq!(final_states(&s), final_states(&base));
        assert!(s.local_matches_global());
    }

    #[test]
    fn executor_failure_is_recovered() {
        let dir = tempfile::tempdir().unwrap();
        let faults = FaultInjection {
            kill_executor_after: Some(5),
            ..FaultInjection::default()
        };
        let cfg = config(dir.path()).with_faults(faults);
        let s = run_workflow(ensemble(3, 2, 2, dir.path()), pool(), PolicyBindings::new(), cfg).unwrap();
        assert_eq!(s.recoveries, ["execution_manager"]);
        assert!(s.all_done());
        assert!(check_transition_log(&s.transitions).is_empty());
    }

    #[test]
    fn crash_then_resume_completes() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt");
        let (w, b) = growing(dir.path());
        let faults = FaultInjection {
            crash_after_stage: Some(2),
            ..FaultInjection::default()
        };
        let cfg = config(dir.path()).with_checkpoint(&ckpt).with_faults(faults);
        let err = run_workflow(w, pool(), b, cfg).unwrap_err();
        assert!(matches!(err, EngineError::InjectedCrash { stages_done: 2 }));

        let (_, b) = growing(dir.path());
        let s = resume_from_checkpoint(&ckpt, pool(), b, config(dir.path()).with_checkpoint(&ckpt)).unwrap();
        assert!(s.all_done());
        assert_eq!(s.workflow.pipelines[0].stages.len(), 5);
        assert_eq!(s.version, 4);
    }
}
