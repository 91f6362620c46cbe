//! Execution manager: owns the pilot pool, places submitted tasks on it and
//! launches them. Pool bookkeeping is touched by this loop only.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;

use super::config::Heartbeat;
use super::messages::{AppManagerMsg, Completion, EmgrMsg, Fatal, WfpMsg, Q_APPMANAGER, Q_EMGR, Q_WFP};
use super::transitions::StateUpdate;
use crate::bus::{BusError, Consumer, MessageBus};
use crate::exec::{
    allocate_pool, schedule_ready_tasks, Executor, KillSwitch, LaunchRequest, Placement, ResourcePool,
    ResourceRequest, TaskAssignment, EXIT_NOT_FOUND,
};
use crate::model::{entity_path, TaskSpec, TaskState};
use crate::profiler::{EventKind, Recorder};

const POLL: Duration = Duration::from_millis(5);

pub(crate) struct EmgrShared {
    pub bus: MessageBus,
    pub recorder: Recorder,
    pub executor: Arc<dyn Executor>,
    pub resources: ResourceRequest,
    pub run_dir: PathBuf,
    pub shared_data_dir: PathBuf,
    pub launches: Arc<Mutex<Vec<TaskAssignment>>>,
    pub stop: AtomicBool,
    pub heartbeat: Arc<Heartbeat>,
    pub kill_after: Option<u64>,
    pub max_reallocations: u32,
}

pub(crate) struct EmgrHandle {
    pub shared: Arc<EmgrShared>,
    pub thread: JoinHandle<()>,
}

impl EmgrHandle {
    pub fn spawn(shared: EmgrShared) -> std::io::Result<Self> {
        let shared = Arc::new(shared);
        let s = shared.clone();
        let thread = std::thread::Builder::new()
            .name("emgr".into())
            .spawn(move || Emgr::new(s).run())?;
        Ok(Self { shared, thread })
    }

    pub fn is_finished(&self) -> bool {
        self.thread.is_finished()
    }
}

struct Queued {
    envelope: u64,
    pipeline: String,
    stage: String,
    spec: TaskSpec,
    attempt: u32,
    t_submit: u64,
}

struct Active {
    pipeline: String,
    stage: String,
    placements: Vec<Placement>,
    kill: KillSwitch,
    generation: u32,
    lost: bool,
}

struct Emgr {
    s: Arc<EmgrShared>,
    queue: VecDeque<Queued>,
    seen: HashSet<(String, u32)>,
    active: HashMap<(String, u32), Active>,
    generation: u32,
}

impl Emgr {
    fn new(s: Arc<EmgrShared>) -> Self {
        Self {
            s,
            queue: VecDeque::new(),
            seen: HashSet::new(),
            active: HashMap::new(),
            generation: 0,
        }
    }

    fn fatal(&self, msg: String) {
        log::error!("execution manager: {msg}");
        let _ = self.s.bus.publish(Q_APPMANAGER, &AppManagerMsg::Fatal(Fatal::Allocation(msg)));
    }

    fn run(mut self) {
        let consumer = match self.s.bus.consumer(Q_EMGR) {
            Ok(c) => c,
            Err(e) => return self.fatal(e.to_string()),
        };
        let mut pool = match allocate_pool(&self.s.resources) {
            Ok(p) => p,
            Err(e) => return self.fatal(e.to_string()),
        };
        let mut received = 0u64;
        let mut reallocations = 0u32;
        while !self.s.stop.load(Ordering::SeqCst) {
            self.s.heartbeat.beat();
            if pool.check_walltime() {
                reallocations += 1;
                if reallocations > self.s.max_reallocations {
                    self.fatal(format!("pool walltime exceeded {reallocations} times"));
                    break;
                }
                log::warn!("pool walltime exceeded; killing running tasks and reallocating");
                for a in self.active.values_mut() {
                    a.lost = true;
                    a.kill.kill();
                }
                pool.release_all();
                pool = match allocate_pool(&self.s.resources) {
                    Ok(p) => p,
                    Err(e) => {
                        self.fatal(e.to_string());
                        break;
                    }
                };
                self.generation += 1;
            }
            let timeout = if self.active.is_empty() && self.queue.is_empty() {
                POLL * 4
            } else {
                POLL
            };
            // take everything already queued before placing, so one
            // scheduling pass sees a whole stage
            let mut next = consumer.recv_timeout(timeout);
            let mut killed = false;
            loop {
                match next {
                    Ok(Some(env)) => {
                        received += 1;
                        if self.s.kill_after.is_some_and(|n| received >= n) {
                            log::warn!("execution manager: injected failure after {received} messages");
                            killed = true;
                            break;
                        }
                        match env.decode::<EmgrMsg>() {
                            Ok(msg) => self.handle(msg, env.id, &consumer, &mut pool),
                            Err(e) => {
                                log::error!("execution manager: undecodable message {}: {e}", env.id);
                                let _ = consumer.ack(env.id);
                            }
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        log::error!("execution manager: {e}");
                        killed = true;
                        break;
                    }
                }
                next = consumer.try_recv();
            }
            if killed {
                break;
            }
            if let Err(e) = self.schedule(&consumer, &mut pool) {
                log::error!("execution manager: {e}");
                break;
            }
        }
        for a in self.active.values() {
            a.kill.kill();
        }
        // dropping the consumer puts unlaunched submissions back on the queue
    }

    fn handle(&mut self, msg: EmgrMsg, envelope: u64, consumer: &Consumer, pool: &mut ResourcePool) {
        match msg {
            EmgrMsg::Submit {
                pipeline,
                stage,
                task,
                attempt,
            } => {
                if !self.seen.insert((task.uid.clone(), attempt)) {
                    let _ = consumer.ack(envelope);
                    return;
                }
                self.queue.push_back(Queued {
                    envelope,
                    pipeline,
                    stage,
                    spec: task,
                    attempt,
                    t_submit: self.s.recorder.clock().now_ns(),
                });
            }
            EmgrMsg::Exited {
                task, attempt, exit, ..
            } => {
                let _ = consumer.ack(envelope);
                let Some(a) = self.active.remove(&(task.clone(), attempt)) else {
                    log::debug!("execution manager: exit of unknown attempt {task}#{attempt}");
                    return;
                };
                if a.generation == self.generation {
                    pool.release(&a.placements);
                }
                let lost = a.lost || exit.killed;
                let c = Completion {
                    pipeline: a.pipeline,
                    stage: a.stage,
                    task,
                    attempt,
                    exit_code: exit.exit_code,
                    files: exit.files,
                    launched: true,
                    lost,
                    permanent: None,
                };
                if let Err(e) = self.s.bus.publish(Q_WFP, &WfpMsg::Completed(c)) {
                    log::error!("execution manager: {e}");
                }
            }
            EmgrMsg::CancelPipeline { pipeline } => {
                let _ = consumer.ack(envelope);
                self.queue.retain(|q| {
                    let keep = q.pipeline != pipeline;
                    if !keep {
                        let _ = consumer.ack(q.envelope);
                    }
                    keep
                });
            }
        }
    }

    fn schedule(&mut self, consumer: &Consumer, pool: &mut ResourcePool) -> Result<(), BusError> {
        if self.queue.is_empty() {
            return Ok(());
        }
        let specs: Vec<TaskSpec> = self.queue.iter().map(|q| q.spec.clone()).collect();
        let Ok(plan) = schedule_ready_tasks(&specs, pool) else {
            return Ok(());
        };
        let mut placed: HashMap<usize, Vec<Placement>> = HashMap::new();
        let mut rejected: HashMap<usize, String> = HashMap::new();
        // uids are unique among queued entries except across attempts; match
        // in queue order so each plan entry binds to the earliest queued one
        let claim = |uid: &str, taken: &HashSet<usize>| {
            self.queue
                .iter()
                .enumerate()
                .position(|(i, q)| q.spec.uid == uid && !taken.contains(&i))
        };
        let mut taken = HashSet::new();
        for (uid, p) in plan.assignments {
            if let Some(i) = claim(&uid, &taken) {
                taken.insert(i);
                placed.insert(i, p);
            }
        }
        for (uid, reason) in plan.unschedulable {
            if let Some(i) = claim(&uid, &taken) {
                taken.insert(i);
                rejected.insert(i, reason);
            }
        }
        let queue = std::mem::take(&mut self.queue);
        for (i, q) in queue.into_iter().enumerate() {
            if let Some(p) = placed.remove(&i) {
                self.launch(q, p, consumer, pool)?;
            } else if let Some(reason) = rejected.remove(&i) {
                self.reject(q, reason, consumer)?;
            } else {
                self.queue.push_back(q);
            }
        }
        Ok(())
    }

    fn state(&self, q: &Queued, from: TaskState, to: TaskState) -> Result<u64, BusError> {
        let u = StateUpdate::task(&q.pipeline, &q.stage, &q.spec.uid, q.attempt, from, to);
        self.s.bus.publish(Q_APPMANAGER, &AppManagerMsg::State(u))
    }

    fn reject(&mut self, q: Queued, reason: String, consumer: &Consumer) -> Result<(), BusError> {
        log::error!("task {} can never be placed: {reason}", q.spec.uid);
        self.state(&q, TaskState::Ready, TaskState::Submitted)?;
        let c = Completion {
            pipeline: q.pipeline.clone(),
            stage: q.stage.clone(),
            task: q.spec.uid.clone(),
            attempt: q.attempt,
            exit_code: -1,
            files: Vec::new(),
            launched: false,
            lost: false,
            permanent: Some(reason),
        };
        self.s.bus.publish(Q_WFP, &WfpMsg::Completed(c))?;
        let _ = consumer.ack(q.envelope);
        Ok(())
    }

    fn launch(
        &mut self,
        q: Queued,
        placements: Vec<Placement>,
        consumer: &Consumer,
        pool: &mut ResourcePool,
    ) -> Result<(), BusError> {
        let path = entity_path(&q.pipeline, Some(&q.stage), Some(&q.spec.uid));
        self.s.recorder.record(path.clone(), EventKind::TaskSubmit);
        self.state(&q, TaskState::Ready, TaskState::Submitted)?;
        let req = LaunchRequest {
            spec: q.spec.clone(),
            attempt: q.attempt,
            placements: placements.clone(),
            run_dir: self.s.run_dir.clone(),
            shared_data_dir: self.s.shared_data_dir.clone(),
        };
        match self.s.executor.launch(req) {
            Ok(handle) => {
                let t_start = self.s.recorder.record(path.clone(), EventKind::TaskStart);
                self.state(&q, TaskState::Submitted, TaskState::Running)?;
                let launch_index = {
                    let mut l = self.s.launches.lock();
                    l.push(TaskAssignment {
                        task_uid: q.spec.uid.clone(),
                        attempt: q.attempt,
                        placements: placements.clone(),
                        t_submit: q.t_submit,
                        t_start,
                        t_end: t_start,
                    });
                    l.len() - 1
                };
                self.active.insert(
                    (q.spec.uid.clone(), q.attempt),
                    Active {
                        pipeline: q.pipeline.clone(),
                        stage: q.stage.clone(),
                        placements,
                        kill: handle.kill_switch(),
                        generation: self.generation,
                        lost: false,
                    },
                );
                let (bus, recorder, launches) = (self.s.bus.clone(), self.s.recorder.clone(), self.s.launches.clone());
                let msg_base = (q.pipeline.clone(), q.stage.clone(), q.spec.uid.clone(), q.attempt);
                let spawned = std::thread::Builder::new()
                    .name(format!("task-{}", q.spec.uid))
                    .spawn(move || {
                        let exit = handle.wait();
                        let t_end = recorder.record(path, EventKind::TaskEnd);
                        if let Some(a) = launches.lock().get_mut(launch_index) {
                            a.t_end = t_end;
                        }
                        let (pipeline, stage, task, attempt) = msg_base;
                        let msg = EmgrMsg::Exited {
                            pipeline,
                            stage,
                            task,
                            attempt,
                            exit,
                        };
                        if let Err(e) = bus.publish(Q_EMGR, &msg) {
                            log::error!("task thread: {e}");
                        }
                    });
                if let Err(e) = spawned {
                    log::error!("cannot start task thread: {e}");
                }
            }
            Err(e) => {
                log::warn!("{e}");
                pool.release(&placements);
                let c = Completion {
                    pipeline: q.pipeline.clone(),
                    stage: q.stage.clone(),
                    task: q.spec.uid.clone(),
                    attempt: q.attempt,
                    exit_code: EXIT_NOT_FOUND,
                    files: Vec::new(),
                    launched: false,
                    lost: false,
                    permanent: None,
                };
                self.s.bus.publish(Q_WFP, &WfpMsg::Completed(c))?;
            }
        }
        let _ = consumer.ack(q.envelope);
        Ok(())
    }
}
