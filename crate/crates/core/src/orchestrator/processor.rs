//! Workflow processor: walks the task graph, submits ready stages, reacts to
//! task completions and runs the adaptation hooks.
//!
//! One dispatcher thread reads the `wfp` queue and hands each message to the
//! worker owning that pipeline, so a pipeline's events are processed in order
//! while different pipelines proceed in parallel. A message is acked only
//! after its worker finished with it; anything unacked when the processor
//! dies is redelivered to its replacement.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use super::config::Heartbeat;
use super::messages::{
    sync_reply_queue, AppManagerMsg, Completion, EmgrMsg, Fatal, SyncReply, SyncResult, WfpMsg, Q_APPMANAGER,
    Q_EMGR, Q_WFP,
};
use super::store::{RejectReason, SyncDelta};
use super::transitions::{apply_update, current_attempt, StateUpdate};
use crate::adapt::{
    apply_mutation, evaluate_post_exec, future_start, AdaptableView, AdaptationError, AdaptationRecord,
    BranchTaken, PolicyBindings, SignalContext, TaskOutput, TriggerId, UidRegistry,
};
use crate::bus::{BusError, Consumer, MessageBus};
use crate::exec::{handle_task_failure, FailureAction, OnExhausted, RetryPolicy};
use crate::model::{entity_path, EntityState, Pipeline, TaskState, Workflow};
use crate::profiler::{EventKind, Recorder};

const POLL: Duration = Duration::from_millis(5);

pub(crate) struct Slot {
    pub uid: String,
    pub data: Mutex<Pipeline>,
    /// Held for the whole of an adaptation, from hook evaluation to ack.
    adapt_lock: Mutex<()>,
    /// Outputs of the stage currently executing, for the hook's signal.
    outputs: Mutex<BTreeMap<String, TaskOutput>>,
}

impl Slot {
    pub fn new(p: Pipeline) -> Self {
        Self {
            uid: p.uid.clone(),
            data: Mutex::new(p),
            adapt_lock: Mutex::new(()),
            outputs: Mutex::new(BTreeMap::new()),
        }
    }
}

pub(crate) struct WfpShared {
    pub bus: MessageBus,
    pub recorder: Recorder,
    pub bindings: Arc<PolicyBindings>,
    pub registry: UidRegistry,
    pub retry: RetryPolicy,
    pub max_adaptations: u64,
    pub sync_retries: u32,
    pub ack_timeout: Duration,
    pub shared_data_dir: PathBuf,
    pub slots: Vec<Arc<Slot>>,
    pub version: AtomicU64,
    pub handled: Mutex<HashSet<String>>,
    pub records: Arc<Mutex<Vec<AdaptationRecord>>>,
    pub stop: AtomicBool,
    pub heartbeat: Arc<Heartbeat>,
    pub kill_after: Option<u64>,
    pub request_seq: AtomicU64,
    /// Held for a whole propose/answer round, so hooks that finish together
    /// queue for the store instead of starving each other on stale versions.
    pub sync_lock: Mutex<()>,
}

impl WfpShared {
    pub fn local_workflow(&self) -> Workflow {
        snapshot(&self.slots, &self.shared_data_dir)
    }
}

fn snapshot(slots: &[Arc<Slot>], dir: &std::path::Path) -> Workflow {
    Workflow {
        pipelines: slots.iter().map(|s| s.data.lock().clone()).collect(),
        shared_data_dir: dir.to_path_buf(),
    }
}

pub(crate) struct WfpHandle {
    pub shared: Arc<WfpShared>,
    pub thread: JoinHandle<()>,
}

impl WfpHandle {
    pub fn spawn(shared: WfpShared) -> std::io::Result<Self> {
        let shared = Arc::new(shared);
        let s = shared.clone();
        let thread = std::thread::Builder::new().name("wfp".into()).spawn(move || dispatch(s))?;
        Ok(Self { shared, thread })
    }

    pub fn is_finished(&self) -> bool {
        self.thread.is_finished()
    }
}

/// Acks a bus message once every worker it was handed to is done with it.
struct AckToken {
    id: u64,
    remaining: AtomicUsize,
    consumer: Arc<Consumer>,
}

impl AckToken {
    fn new(id: u64, parts: usize, consumer: &Arc<Consumer>) -> Arc<Self> {
        Arc::new(Self {
            id,
            remaining: AtomicUsize::new(parts),
            consumer: consumer.clone(),
        })
    }

    fn done(&self) {
        if self.remaining.fetch_sub(1, Ordering::AcqRel) == 1 {
            let _ = self.consumer.ack(self.id);
        }
    }
}

struct Job {
    msg: WfpMsg,
    token: Arc<AckToken>,
}

fn dispatch(s: Arc<WfpShared>) {
    let consumer = match s.bus.consumer(Q_WFP) {
        Ok(c) => Arc::new(c),
        Err(e) => {
            log::error!("workflow processor: {e}");
            return;
        }
    };
    let mut senders = Vec::with_capacity(s.slots.len());
    let mut workers = Vec::with_capacity(s.slots.len());
    let mut index = HashMap::new();
    for (i, slot) in s.slots.iter().enumerate() {
        let (tx, rx) = mpsc::channel::<Job>();
        let w = Worker {
            s: s.clone(),
            slot: slot.clone(),
            replies: None,
        };
        match std::thread::Builder::new()
            .name(format!("wfp-{}", slot.uid))
            .spawn(move || w.run(rx))
        {
            Ok(h) => workers.push(h),
            Err(e) => {
                log::error!("workflow processor: cannot start worker: {e}");
                s.stop.store(true, Ordering::SeqCst);
            }
        }
        senders.push(tx);
        index.insert(slot.uid.clone(), i);
    }

    let mut received = 0u64;
    while !s.stop.load(Ordering::SeqCst) {
        s.heartbeat.beat();
        let env = match consumer.recv_timeout(POLL) {
            Ok(Some(env)) => env,
            Ok(None) => continue,
            Err(e) => {
                log::error!("workflow processor: {e}");
                break;
            }
        };
        received += 1;
        if s.kill_after.is_some_and(|n| received >= n) {
            log::warn!("workflow processor: injected failure after {received} messages");
            s.stop.store(true, Ordering::SeqCst);
            break;
        }
        match env.decode::<WfpMsg>() {
            Ok(WfpMsg::Scan) => {
                let token = AckToken::new(env.id, senders.len(), &consumer);
                if senders.is_empty() {
                    let _ = consumer.ack(env.id);
                }
                for tx in &senders {
                    let _ = tx.send(Job {
                        msg: WfpMsg::Scan,
                        token: token.clone(),
                    });
                }
            }
            Ok(WfpMsg::Completed(c)) => match index.get(&c.pipeline) {
                Some(&i) => {
                    let token = AckToken::new(env.id, 1, &consumer);
                    let _ = senders[i].send(Job {
                        msg: WfpMsg::Completed(c),
                        token,
                    });
                }
                None => {
                    log::warn!("workflow processor: completion for unknown pipeline {}", c.pipeline);
                    let _ = consumer.ack(env.id);
                }
            },
            Err(e) => {
                log::error!("workflow processor: undecodable message {}: {e}", env.id);
                let _ = consumer.ack(env.id);
            }
        }
    }
    drop(senders);
    for w in workers {
        let _ = w.join();
    }
}

enum Halt {
    Fatal(Fatal),
    /// The store did not answer in time; this processor instance gives up.
    Timeout,
    Bus(BusError),
}

impl From<BusError> for Halt {
    fn from(e: BusError) -> Self {
        Halt::Bus(e)
    }
}

#[derive(PartialEq, Eq)]
enum Flow {
    Continue,
    Aborted,
}

struct Worker {
    s: Arc<WfpShared>,
    slot: Arc<Slot>,
    replies: Option<Consumer>,
}

impl Worker {
    fn run(mut self, rx: mpsc::Receiver<Job>) {
        for job in rx {
            if self.s.stop.load(Ordering::SeqCst) {
                break;
            }
            let r = match &job.msg {
                WfpMsg::Scan => self.scan(),
                WfpMsg::Completed(c) => self.on_completed(c),
            };
            match r {
                Ok(()) => job.token.done(),
                Err(Halt::Fatal(f)) => {
                    let _ = self.s.bus.publish(Q_APPMANAGER, &AppManagerMsg::Fatal(f));
                    job.token.done();
                }
                Err(Halt::Timeout) => {
                    log::error!(
                        "pipeline {}: no sync reply within {:?}; workflow processor shutting down",
                        self.slot.uid,
                        self.s.ack_timeout
                    );
                    self.s.stop.store(true, Ordering::SeqCst);
                    break;
                }
                Err(Halt::Bus(e)) => {
                    log::error!("pipeline {}: {e}", self.slot.uid);
                    self.s.stop.store(true, Ordering::SeqCst);
                    break;
                }
            }
        }
    }

    fn publish_state(&self, u: &StateUpdate) -> Result<(), Halt> {
        self.s.bus.publish(Q_APPMANAGER, &AppManagerMsg::State(u.clone()))?;
        Ok(())
    }

    /// Applies `u` to the local copy and forwards it if it changed anything.
    fn transition(&self, p: &mut Pipeline, u: StateUpdate) -> Result<bool, Halt> {
        match apply_update(p, &u) {
            Ok(a) if a.is_noop() => Ok(false),
            Ok(_) => {
                self.publish_state(&u)?;
                Ok(true)
            }
            Err(e) => {
                log::error!("pipeline {}: {e}", p.uid);
                Ok(false)
            }
        }
    }

    fn is_handled(&self, trigger: &TriggerId) -> bool {
        self.s.handled.lock().contains(&trigger.to_string())
    }

    /// Picks up whatever is due on this pipeline. Safe to run at any time;
    /// used at start, after recovery and after resume.
    fn scan(&mut self) -> Result<(), Halt> {
        let p = self.slot.data.lock().clone();
        if p.state.is_terminal() {
            return Ok(());
        }
        if p.stages.iter().any(|s| s.state == EntityState::Failed) {
            let mut data = self.slot.data.lock();
            self.transition(&mut data, StateUpdate::pipeline(&p.uid, p.state, EntityState::Failed))?;
            return Ok(());
        }
        let open = p.first_open_stage();
        if open == p.stages.len() || p.stages[open].state == EntityState::Pending {
            return self.advance(open.checked_sub(1));
        }
        self.pick_up(open)
    }

    /// Runs the hooks owed by completed stage `done`, then moves on to the
    /// next open stage or finishes the pipeline.
    fn advance(&mut self, done: Option<usize>) -> Result<(), Halt> {
        if let Some(d) = done {
            let p = self.slot.data.lock().clone();
            let stage = &p.stages[d];
            if stage.state == EntityState::Done {
                if let Some(key) = &stage.post_exec {
                    let trigger = TriggerId::stage(&p.uid, &stage.uid);
                    if !self.is_handled(&trigger) {
                        self.adapt(trigger, key, d)?;
                    }
                }
                let p = self.slot.data.lock().clone();
                if p.first_open_stage() == p.stages.len() {
                    if let Some(key) = &p.post_exec {
                        let trigger = TriggerId::pipeline(&p.uid, &p.stages[d].uid);
                        if !self.is_handled(&trigger) {
                            self.adapt(trigger, key, d)?;
                        }
                    }
                }
            }
        }
        let mut data = self.slot.data.lock();
        if data.state.is_terminal() {
            return Ok(());
        }
        let open = data.first_open_stage();
        if open < data.stages.len() {
            drop(data);
            return self.schedule_stage(open);
        }
        let (uid, state) = (data.uid.clone(), data.state);
        self.transition(&mut data, StateUpdate::pipeline(&uid, state, EntityState::Done))?;
        Ok(())
    }

    fn schedule_stage(&mut self, i: usize) -> Result<(), Halt> {
        {
            let mut data = self.slot.data.lock();
            let uid = data.uid.clone();
            if data.state == EntityState::Pending {
                self.transition(&mut data, StateUpdate::pipeline(&uid, EntityState::Pending, EntityState::Scheduled))?;
            }
            let stage = data.stages[i].uid.clone();
            self.transition(&mut data, StateUpdate::stage(&uid, &stage, EntityState::Pending, EntityState::Scheduled))?;
            self.s.recorder.record(entity_path(&uid, Some(&stage), None), EventKind::StageStart);
            self.slot.outputs.lock().clear();
        }
        self.pick_up(i)
    }

    /// Submits the pending tasks of scheduled stage `i`, settles failures
    /// nobody acted on, and completes the stage if nothing is left.
    fn pick_up(&mut self, i: usize) -> Result<(), Halt> {
        let mut submits = Vec::new();
        let failed: Vec<String>;
        {
            let mut data = self.slot.data.lock();
            let uid = data.uid.clone();
            let stage = data.stages[i].uid.clone();
            for j in 0..data.stages[i].tasks.len() {
                let t = &data.stages[i].tasks[j];
                let attempt = current_attempt(t);
                let spec = t.spec.clone();
                match t.state {
                    TaskState::Pending => {
                        let u = StateUpdate::task(&uid, &stage, &spec.uid, attempt, TaskState::Pending, TaskState::Ready);
                        self.transition(&mut data, u)?;
                    }
                    TaskState::Ready => {}
                    _ => continue,
                }
                submits.push(EmgrMsg::Submit {
                    pipeline: uid.clone(),
                    stage: stage.clone(),
                    task: spec,
                    attempt,
                });
            }
            failed = data.stages[i]
                .tasks
                .iter()
                .filter(|t| t.state == TaskState::Failed && !t.ignored)
                .map(|t| t.spec.uid.clone())
                .collect();
        }
        for m in &submits {
            self.s.bus.publish(Q_EMGR, m)?;
        }
        for t in failed {
            if self.after_failure(i, &t, None)? == Flow::Aborted {
                return Ok(());
            }
        }
        let settled = self.slot.data.lock().stages[i].all_settled();
        if settled {
            self.stage_settled(i)?;
        }
        Ok(())
    }

    fn on_completed(&mut self, c: &Completion) -> Result<(), Halt> {
        let i;
        let failed;
        {
            let mut data = self.slot.data.lock();
            let Some(idx) = data.stage_index(&c.stage) else {
                log::warn!("completion for unknown stage {}/{}", c.pipeline, c.stage);
                return Ok(());
            };
            i = idx;
            failed = !c.succeeded();
            let from = if c.launched {
                TaskState::Running
            } else {
                TaskState::Submitted
            };
            let to = if failed { TaskState::Failed } else { TaskState::Done };
            let mut u = StateUpdate::task(&c.pipeline, &c.stage, &c.task, c.attempt, from, to);
            if c.lost {
                u = u.lost();
            }
            if !self.transition(&mut data, u)? || data.state.is_terminal() {
                return Ok(());
            }
            self.slot.outputs.lock().insert(
                c.task.clone(),
                TaskOutput {
                    exit_code: c.exit_code,
                    files: c.files.clone(),
                },
            );
        }
        if failed && self.after_failure(i, &c.task, c.permanent.as_deref())? == Flow::Aborted {
            return Ok(());
        }
        let settled = self.slot.data.lock().stages[i].all_settled();
        if settled {
            self.stage_settled(i)?;
        }
        Ok(())
    }

    fn after_failure(&mut self, i: usize, task: &str, permanent: Option<&str>) -> Result<Flow, Halt> {
        let mut data = self.slot.data.lock();
        let uid = data.uid.clone();
        let stage = data.stages[i].uid.clone();
        let Some(t) = data.stages[i].task(task).cloned() else {
            return Ok(Flow::Continue);
        };
        let action = match permanent {
            Some(_) => match self.s.retry.on_exhausted {
                OnExhausted::Ignore => FailureAction::Ignore,
                OnExhausted::Abort => FailureAction::AbortStage,
            },
            None => handle_task_failure(&t, &self.s.retry),
        };
        match action {
            FailureAction::Resubmit => {
                let attempt = t.attempts + 1;
                let u = StateUpdate::task(&uid, &stage, task, attempt, TaskState::Pending, TaskState::Ready);
                self.transition(&mut data, u)?;
                drop(data);
                let m = EmgrMsg::Submit {
                    pipeline: uid,
                    stage,
                    task: t.spec,
                    attempt,
                };
                self.s.bus.publish(Q_EMGR, &m)?;
                Ok(Flow::Continue)
            }
            FailureAction::Ignore => {
                log::warn!("task {task} failed after {} attempts; ignoring", t.attempts);
                if let Some(t) = data.stages[i].task_mut(task) {
                    t.ignored = true;
                }
                Ok(Flow::Continue)
            }
            FailureAction::AbortStage => {
                log::error!("task {task} failed; aborting stage {stage} of pipeline {uid}");
                for j in 0..data.stages[i].tasks.len() {
                    let t = &data.stages[i].tasks[j];
                    if matches!(t.state, TaskState::Pending | TaskState::Ready) {
                        let u = StateUpdate::task(&uid, &stage, &t.spec.uid.clone(), current_attempt(t), t.state, TaskState::Canceled);
                        self.transition(&mut data, u)?;
                    }
                }
                self.transition(&mut data, StateUpdate::stage(&uid, &stage, EntityState::Scheduled, EntityState::Failed))?;
                let state = data.state;
                self.transition(&mut data, StateUpdate::pipeline(&uid, state, EntityState::Failed))?;
                drop(data);
                self.s.bus.publish(Q_EMGR, &EmgrMsg::CancelPipeline { pipeline: uid })?;
                Ok(Flow::Aborted)
            }
        }
    }

    fn stage_settled(&mut self, i: usize) -> Result<(), Halt> {
        {
            let mut data = self.slot.data.lock();
            let uid = data.uid.clone();
            let stage = data.stages[i].uid.clone();
            let u = StateUpdate::stage(&uid, &stage, EntityState::Scheduled, EntityState::Done);
            if !self.transition(&mut data, u)? {
                return Ok(());
            }
            self.s.recorder.record(entity_path(&uid, Some(&stage), None), EventKind::StageEnd);
        }
        self.advance(Some(i))
    }

    fn fatal(trigger: &TriggerId, message: String) -> Halt {
        Halt::Fatal(Fatal::Adaptation(AdaptationError::AdaptationFailed {
            trigger: trigger.to_string(),
            message,
        }))
    }

    /// Evaluates the hook bound to `key` and commits its mutations through
    /// the store before touching the local copy.
    fn adapt(&mut self, trigger: TriggerId, key: &str, anchor: usize) -> Result<(), Halt> {
        let slot = self.slot.clone();
        let _exclusive = slot.adapt_lock.lock();
        let Some(policy) = self.s.bindings.get(key) else {
            return Err(Self::fatal(&trigger, format!("no policy bound to {key:?}")));
        };
        let p = self.slot.data.lock().clone();
        if p.adaptations >= self.s.max_adaptations {
            return Err(Self::fatal(
                &trigger,
                format!("pipeline {} reached the limit of {} adaptations", p.uid, self.s.max_adaptations),
            ));
        }
        let outputs = self.slot.outputs.lock().clone();
        let (slots, dir) = (self.s.slots.clone(), self.s.shared_data_dir.clone());
        let ctx = SignalContext::new(trigger.clone(), p.adaptations, dir.clone())
            .with_outputs(outputs)
            .with_snapshot_fn(move || snapshot(&slots, &dir));
        let future = future_start(&p).max(anchor + 1);
        let view = AdaptableView::new(
            &p,
            Some(&p.stages[anchor]),
            &p.stages[future..],
            p.stages[anchor].post_exec.clone(),
            self.s.registry.clone(),
        );
        let trig = trigger.to_string();
        let rec = self.s.recorder.clone();
        let rec = &rec;
        let ev = evaluate_post_exec(policy, &ctx, view, rec.clock()).map_err(|e| Halt::Fatal(Fatal::Adaptation(e)))?;
        rec.record_at(trig.clone(), EventKind::AdaptStart, ev.record.t_start);
        rec.record_at(trig.clone(), EventKind::AdaptEnd, ev.record.t_end);
        let mut record = ev.record;

        // a taken branch always commits, even an empty delta: the sync is
        // part of what an adaptation costs and every adaptation gets a version
        if ev.mutations.is_empty() && record.branch_taken != BranchTaken::True {
            let msg = AppManagerMsg::TriggerHandled {
                pipeline: p.uid.clone(),
                trigger: trig.clone(),
            };
            self.s.bus.publish(Q_APPMANAGER, &msg)?;
            self.slot.data.lock().adaptations += 1;
            self.s.handled.lock().insert(trig);
            self.s.records.lock().push(record);
            return Ok(());
        }

        let t_sync = rec.record(trig.clone(), EventKind::SyncStart);
        let mut delta = SyncDelta {
            base_version: 0,
            pipeline: p.uid.clone(),
            trigger_uid: trig.clone(),
            mutations: ev.mutations,
            classified_types: record.classified_types.clone(),
        };
        let shared = self.s.clone();
        for _ in 0..=self.s.sync_retries {
            let _round = shared.sync_lock.lock();
            delta.base_version = self.s.version.load(Ordering::SeqCst);
            match self.sync(&delta)? {
                SyncResult::Ack { version } => {
                    let t_ack = rec.record(trig.clone(), EventKind::SyncAck);
                    self.s.version.fetch_max(version, Ordering::SeqCst);
                    {
                        let mut data = self.slot.data.lock();
                        for m in &delta.mutations {
                            if let Err(e) = apply_mutation(&mut data, m) {
                                log::error!("pipeline {}: committed mutation does not apply locally: {e}", p.uid);
                            }
                        }
                        data.adaptations += 1;
                    }
                    self.s.registry.register(&p.uid, &delta.mutations);
                    self.s.handled.lock().insert(trig);
                    record.sync_duration = t_ack.saturating_sub(t_sync);
                    record.committed_version = Some(version);
                    self.s.records.lock().push(record);
                    return Ok(());
                }
                SyncResult::Reject {
                    reason: RejectReason::VersionMismatch,
                    version,
                } => {
                    self.s.version.fetch_max(version, Ordering::SeqCst);
                }
                SyncResult::Reject {
                    reason: RejectReason::PipelineTerminal,
                    ..
                } => {
                    rec.record(trig.clone(), EventKind::SyncAck);
                    log::warn!("adaptation {trig} dropped: pipeline already terminal");
                    return Ok(());
                }
                SyncResult::Reject {
                    reason: RejectReason::Guard(source),
                    ..
                } => {
                    return Err(Halt::Fatal(Fatal::Adaptation(AdaptationError::MutationGuardViolation {
                        trigger: trig,
                        source,
                    })))
                }
                SyncResult::Reject {
                    reason: RejectReason::Invalid(m),
                    ..
                } => return Err(Self::fatal(&trigger, format!("store rejected the delta: {m}"))),
            }
        }
        Err(Self::fatal(
            &trigger,
            format!("delta still stale after {} retries", self.s.sync_retries),
        ))
    }

    fn sync(&mut self, delta: &SyncDelta) -> Result<SyncResult, Halt> {
        let reply_to = sync_reply_queue(&self.slot.uid);
        if self.replies.is_none() {
            self.replies = Some(self.s.bus.consumer(&reply_to)?);
        }
        let replies = self.replies.as_ref().expect("set above");
        let request = self.s.request_seq.fetch_add(1, Ordering::SeqCst);
        let msg = AppManagerMsg::Sync {
            request,
            reply_to,
            delta: delta.clone(),
        };
        self.s.bus.publish(Q_APPMANAGER, &msg)?;
        let deadline = Instant::now() + self.s.ack_timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(Halt::Timeout);
            }
            if let Some(env) = replies.recv_timeout(left)? {
                let _ = replies.ack(env.id);
                match env.decode::<SyncReply>() {
                    Ok(r) if r.request == request => return Ok(r.result),
                    Ok(_) => log::debug!("stale sync reply on {}", env.queue),
                    Err(e) => log::error!("undecodable sync reply: {e}"),
                }
            }
        }
    }
}
