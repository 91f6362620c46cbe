//! Task launchers. The execution manager only sees [`Executor`] and
//! [`RunningTask`]; what a "task" physically is depends on the implementation.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pool::Placement;
use crate::clock::{mix_seed, stable_hash};
use crate::model::TaskSpec;

/// Executables with this prefix name an in-process kernel rather than a program.
pub const KERNEL_PREFIX: &str = "kernel:";

/// Exit code reported for attempts stopped through their kill switch.
pub const EXIT_KILLED: i32 = -9;
pub const EXIT_NOT_FOUND: i32 = 127;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExit {
    pub exit_code: i32,
    pub files: Vec<PathBuf>,
    pub killed: bool,
}

impl TaskExit {
    pub fn code(exit_code: i32) -> Self {
        Self {
            exit_code,
            files: Vec::new(),
            killed: false,
        }
    }

    pub fn killed() -> Self {
        Self {
            exit_code: EXIT_KILLED,
            files: Vec::new(),
            killed: true,
        }
    }

    pub fn success(&self) -> bool {
        self.exit_code == 0 && !self.killed
    }
}

/// Idempotent, shareable stop signal for one running attempt.
#[derive(Debug, Clone, Default)]
pub struct KillSwitch {
    inner: Arc<(Mutex<bool>, Condvar)>,
}

impl KillSwitch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn kill(&self) {
        *self.inner.0.lock() = true;
        self.inner.1.notify_all();
    }

    pub fn is_killed(&self) -> bool {
        *self.inner.0.lock()
    }

    /// Sleeps for `d` unless killed first; returns true if killed.
    pub fn sleep(&self, d: Duration) -> bool {
        let deadline = Instant::now() + d;
        let mut killed = self.inner.0.lock();
        while !*killed {
            if self.inner.1.wait_until(&mut killed, deadline).timed_out() {
                return *killed;
            }
        }
        true
    }
}

#[derive(Debug, Clone)]
pub struct LaunchRequest {
    pub spec: TaskSpec,
    pub attempt: u32,
    pub placements: Vec<Placement>,
    pub run_dir: PathBuf,
    pub shared_data_dir: PathBuf,
}

pub trait RunningTask: Send {
    /// Blocks until the attempt finishes. Consumes the handle.
    fn wait(self: Box<Self>) -> TaskExit;
    fn kill_switch(&self) -> KillSwitch;
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("failed to start {executable}: {source}")]
    Spawn {
        executable: String,
        #[source]
        source: std::io::Error,
    },
}

pub trait Executor: Send + Sync {
    fn name(&self) -> &str;
    fn launch(&self, req: LaunchRequest) -> Result<Box<dyn RunningTask>, ExecError>;
}

pub struct KernelCall<'a> {
    pub spec: &'a TaskSpec,
    pub attempt: u32,
    pub shared_data_dir: &'a Path,
    pub run_dir: &'a Path,
    pub kill: &'a KillSwitch,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KernelOutput {
    pub exit_code: i32,
    pub files: Vec<PathBuf>,
}

pub type KernelFn = dyn Fn(&KernelCall<'_>) -> anyhow::Result<KernelOutput> + Send + Sync;

/// Named in-process kernels, addressed as `kernel:<name>`.
#[derive(Clone, Default)]
pub struct KernelRegistry {
    kernels: HashMap<String, Arc<KernelFn>>,
}

impl KernelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        f: impl Fn(&KernelCall<'_>) -> anyhow::Result<KernelOutput> + Send + Sync + 'static,
    ) {
        self.kernels.insert(name.into(), Arc::new(f));
    }

    pub fn with(mut self, other: &KernelRegistry) -> Self {
        self.kernels.extend(other.kernels.iter().map(|(k, v)| (k.clone(), v.clone())));
        self
    }

    pub fn get(&self, executable: &str) -> Option<Arc<KernelFn>> {
        self.kernels.get(executable.strip_prefix(KERNEL_PREFIX)?).cloned()
    }

    pub fn names(&self) -> BTreeSet<&str> {
        self.kernels.keys().map(String::as_str).collect()
    }
}

impl std::fmt::Debug for KernelRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.names()).finish()
    }
}

fn run_kernel(kernels: &KernelRegistry, req: &LaunchRequest, kill: &KillSwitch) -> TaskExit {
    let Some(k) = kernels.get(&req.spec.executable) else {
        log::error!("{}: no kernel named {}", req.spec.uid, req.spec.executable);
        return TaskExit::code(EXIT_NOT_FOUND);
    };
    let call = KernelCall {
        spec: &req.spec,
        attempt: req.attempt,
        shared_data_dir: &req.shared_data_dir,
        run_dir: &req.run_dir,
        kill,
    };
    match k(&call) {
        Ok(out) => TaskExit {
            exit_code: out.exit_code,
            files: out.files,
            killed: false,
        },
        Err(e) => {
            log::warn!("{}: kernel failed: {e:#}", req.spec.uid);
            TaskExit::code(1)
        }
    }
}

/// Sleeps `duration_hint` seconds, then runs the named kernel if any.
#[derive(Debug, Clone, Default)]
pub struct MockExecutor {
    kernels: KernelRegistry,
}

impl MockExecutor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_kernels(kernels: KernelRegistry) -> Self {
        Self { kernels }
    }
}

struct MockTask {
    req: LaunchRequest,
    kernels: KernelRegistry,
    kill: KillSwitch,
    sleep: bool,
}

impl RunningTask for MockTask {
    fn wait(self: Box<Self>) -> TaskExit {
        let d = self.req.spec.duration_hint.unwrap_or(0.0);
        if self.sleep && d > 0.0 && self.kill.sleep(Duration::from_secs_f64(d)) {
            return TaskExit::killed();
        }
        if self.kill.is_killed() {
            return TaskExit::killed();
        }
        if self.req.spec.executable.starts_with(KERNEL_PREFIX) {
            run_kernel(&self.kernels, &self.req, &self.kill)
        } else {
            TaskExit::code(0)
        }
    }

    fn kill_switch(&self) -> KillSwitch {
        self.kill.clone()
    }
}

impl Executor for MockExecutor {
    fn name(&self) -> &str {
        "mock"
    }

    fn launch(&self, req: LaunchRequest) -> Result<Box<dyn RunningTask>, ExecError> {
        Ok(Box::new(MockTask {
            req,
            kernels: self.kernels.clone(),
            kill: KillSwitch::new(),
            sleep: true,
        }))
    }
}

/// Spawns real processes. Output goes to `<run_dir>/<uid>.<attempt>.out|err`.
#[derive(Debug, Clone, Default)]
pub struct LocalExecutor {
    kernels: KernelRegistry,
}

impl LocalExecutor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_kernels(kernels: KernelRegistry) -> Self {
        Self { kernels }
    }
}

struct LocalTask {
    child: Child,
    files: Vec<PathBuf>,
    kill: KillSwitch,
}

impl RunningTask for LocalTask {
    fn wait(mut self: Box<Self>) -> TaskExit {
        loop {
            match self.child.try_wait() {
                Ok(Some(status)) => {
                    return TaskExit {
                        exit_code: exit_code(status),
                        files: self.files,
                        killed: false,
                    }
                }
                Ok(None) => {}
                Err(e) => {
                    log::error!("waiting on pid {}: {e}", self.child.id());
                    return TaskExit::code(-1);
                }
            }
            if self.kill.sleep(Duration::from_millis(2)) {
                let _ = self.child.kill();
                let _ = self.child.wait();
                return TaskExit {
                    files: self.files,
                    ..TaskExit::killed()
                };
            }
        }
    }

    fn kill_switch(&self) -> KillSwitch {
        self.kill.clone()
    }
}

#[cfg(unix)]
fn exit_code(status: std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
}

#[cfg(not(unix))]
fn exit_code(status: std::process::ExitStatus) -> i32 {
    status.code().unwrap_or(-1)
}

impl Executor for LocalExecutor {
    fn name(&self) -> &str {
        "local"
    }

    fn launch(&self, req: LaunchRequest) -> Result<Box<dyn RunningTask>, ExecError> {
        if req.spec.executable.starts_with(KERNEL_PREFIX) {
            return Ok(Box::new(MockTask {
                req,
                kernels: self.kernels.clone(),
                kill: KillSwitch::new(),
                sleep: false,
            }));
        }
        let spawn_err = |source| ExecError::Spawn {
            executable: req.spec.executable.clone(),
            source,
        };
        std::fs::create_dir_all(&req.run_dir).map_err(spawn_err)?;
        let base = format!("{}.{}", req.spec.uid, req.attempt);
        let out = req.run_dir.join(format!("{base}.out"));
        let err = req.run_dir.join(format!("{base}.err"));
        let child = Command::new(&req.spec.executable)
            .args(&req.spec.arguments)
            .envs(&req.spec.environment)
            .env("ENSEMBLE_TASK_UID", &req.spec.uid)
            .env("ENSEMBLE_SHARED_DIR", &req.shared_data_dir)
            .stdin(Stdio::null())
            .stdout(File::create(&out).map_err(spawn_err)?)
            .stderr(File::create(&err).map_err(spawn_err)?)
            .spawn()
            .map_err(spawn_err)?;
        Ok(Box::new(LocalTask {
            child,
            files: vec![out, err],
            kill: KillSwitch::new(),
        }))
    }
}

/// Which attempts a [`FaultInjectingExecutor`] turns into failures.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultPlan {
    /// Every task fails its first `n` attempts.
    #[serde(default)]
    pub fail_first_attempts: u32,
    /// These tasks fail on every attempt.
    #[serde(default)]
    pub fail_tasks: Vec<String>,
    #[serde(default)]
    pub probability: f64,
    #[serde(default)]
    pub seed: u64,
}

impl FaultPlan {
    pub fn fail_first(n: u32) -> Self {
        Self {
            fail_first_attempts: n,
            ..Self::default()
        }
    }

    pub fn should_fail(&self, uid: &str, attempt: u32) -> bool {
        if attempt <= self.fail_first_attempts || self.fail_tasks.iter().any(|t| t == uid) {
            return true;
        }
        self.probability > 0.0 && {
            let seed = mix_seed(self.seed, stable_hash(uid) ^ u64::from(attempt));
            ChaCha8Rng::seed_from_u64(seed).gen_bool(self.probability.min(1.0))
        }
    }
}

/// Runs tasks on an inner executor and then reports planned failures.
pub struct FaultInjectingExecutor {
    inner: Arc<dyn Executor>,
    plan: FaultPlan,
}

impl FaultInjectingExecutor {
    pub fn new(inner: Arc<dyn Executor>, plan: FaultPlan) -> Self {
        Self { inner, plan }
    }
}

struct FaultyTask {
    inner: Box<dyn RunningTask>,
    fail: bool,
}

impl RunningTask for FaultyTask {
    fn wait(self: Box<Self>) -> TaskExit {
        let mut exit = self.inner.wait();
        if self.fail && !exit.killed {
            exit.exit_code = 1;
        }
        exit
    }

    fn kill_switch(&self) -> KillSwitch {
        self.inner.kill_switch()
    }
}

impl Executor for FaultInjectingExecutor {
    fn name(&self) -> &str {
        "fault"
    }

    fn launch(&self, req: LaunchRequest) -> Result<Box<dyn RunningTask>, ExecError> {
        let fail = self.plan.should_fail(&req.spec.uid, req.attempt);
        Ok(Box::new(FaultyTask {
            inner: self.inner.launch(req)?,
            fail,
        }))
    }
}
