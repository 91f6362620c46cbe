//! The `ensemble` command line: validate and run workflow files, and run
//! the overhead benchmarks.
//!
//! Every command is a function over library calls, so anything done here
//! can be done through the API with the same result for the same seed.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 invalid workflow or
//! benchmark spec, 3 unparseable file, 4 adaptation failure, 5 executor or
//! pool failure, 137 injected crash.

mod file;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

pub use file::{
    rule, DriverSpec, EngineSection, ExecutorKind, FileError, LoadedWorkflow, PipelineEntry, ResourcesSection,
    StageEntry, TaskEntry, WorkflowFile,
};

use crate::drivers;
use crate::exec::{Executor, LocalExecutor, MockExecutor};
use crate::orchestrator::{
    resume_from_checkpoint, run_workflow, EngineConfig, EngineError, ExecutionSummary, FaultInjection,
};
use crate::profiler::{run_experiment, ExperimentId, ExperimentSpec, DEFAULT_SCALE};

pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const INVALID: i32 = 2;
    pub const PARSE: i32 = 3;
    pub const ADAPTATION: i32 = 4;
    pub const EXECUTOR: i32 = 5;
    pub const CRASHED: i32 = 137;
}

pub const LOG_ENV: &str = "ENGINE_LOG_LEVEL";

/// `println!` that tolerates a closed stdout, as in `ensemble run ... | head`.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

#[derive(Debug, Parser)]
#[command(name = "ensemble", version, about = "Adaptive ensemble workflow engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a workflow file without running it.
    Validate {
        #[arg(long)]
        workflow: PathBuf,
    },
    /// Run a workflow file.
    Run(RunArgs),
    /// Run one overhead experiment.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub workflow: PathBuf,
    /// Profile CSV to write.
    #[arg(long)]
    pub profile: PathBuf,
    /// Continue from this checkpoint instead of starting over.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Holds `shared/`, `run/` and the checkpoint. Defaults to `<profile>.work`.
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
    /// Execution summary JSON. Defaults to `<profile>.summary.json`.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Stop the run, checkpoint written, once this many stages completed.
    #[arg(long)]
    pub crash_after_stage: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// I, II, III, IV or V.
    #[arg(long)]
    pub experiment: String,
    #[arg(long, default_value_t = DEFAULT_SCALE)]
    pub scale: f64,
    #[arg(long, default_value_t = 3)]
    pub trials: u32,
    /// Report CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Kernel duration in seconds; defaults to the experiment's own.
    #[arg(long)]
    pub kernel: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).try_init();
    match Cli::try_parse_from(args) {
        Ok(cli) => match cli.command {
            Command::Validate { workflow } => cmd_validate(&workflow),
            Command::Run(a) => cmd_run(&a),
            Command::Bench(a) => cmd_bench(&a),
        },
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}

fn read(path: &Path) -> Result<WorkflowFile, i32> {
    WorkflowFile::read(path).map_err(|e| {
        eprintln!("error: {e}");
        match e {
            FileError::Read { .. } => exit::FAILURE,
            FileError::Parse { .. } => exit::PARSE,
        }
    })
}

fn load(file: WorkflowFile, path: &Path, shared: &Path) -> Result<LoadedWorkflow, i32> {
    file.load(shared).map_err(|report| {
        eprintln!("{}: {} violation(s)", path.display(), report.violations.len());
        for v in &report.violations {
            eprintln!("  {v}");
        }
        exit::INVALID
    })
}

pub fn cmd_validate(workflow: &Path) -> i32 {
    let file = match read(workflow) {
        Ok(f) => f,
        Err(code) => return code,
    };
    let shared = std::env::temp_dir().join("ensemble-validate");
    match load(file, workflow, &shared) {
        Ok(l) => {
            say!(
                "{}: ok ({} pipelines, {} tasks)",
                workflow.display(),
                l.workflow.pipelines.len(),
                l.workflow.task_count()
            );
            exit::OK
        }
        Err(code) => code,
    }
}

/// Where a run keeps its files.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPaths {
    pub shared: PathBuf,
    pub run: PathBuf,
    pub checkpoint: PathBuf,
    pub summary: PathBuf,
}

impl RunPaths {
    pub fn for_args(a: &RunArgs) -> Self {
        let work = a.work_dir.clone().unwrap_or_else(|| suffixed(&a.profile, ".work"));
        Self {
            shared: work.join("shared"),
            run: work.join("run"),
            checkpoint: work.join("checkpoint"),
            summary: a.summary.clone().unwrap_or_else(|| suffixed(&a.profile, ".summary.json")),
        }
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// The engine settings a loaded file asks for.
pub fn engine_config(l: &LoadedWorkflow, paths: &RunPaths, profile: &Path) -> EngineConfig {
    let kernels = drivers::kernels();
    let executor: Arc<dyn Executor> = match l.file.resources.executor {
        ExecutorKind::Mock => Arc::new(MockExecutor::with_kernels(kernels)),
        ExecutorKind::Local => Arc::new(LocalExecutor::with_kernels(kernels)),
    };
    let mut c = EngineConfig::default()
        .with_executor(executor)
        .with_retry(l.file.resources.retry)
        .with_run_dir(&paths.run)
        .with_checkpoint(&paths.checkpoint)
        .with_profile(profile);
    if let Some(n) = l.file.engine.max_adaptations {
        c = c.with_max_adaptations(n);
    }
    c
}

pub fn cmd_run(a: &RunArgs) -> i32 {
    let file = match read(&a.workflow) {
        Ok(f) => f,
        Err(code) => return code,
    };
    let paths = RunPaths::for_args(a);
    if a.resume.is_none() && file.driver.is_some() {
        if let Err(e) = drivers::reset_data(&paths.shared) {
            eprintln!("error: clearing {}: {e}", paths.shared.display());
            return exit::FAILURE;
        }
    }
    let loaded = match load(file, &a.workflow, &paths.shared) {
        Ok(l) => l,
        Err(code) => return code,
    };
    let config = engine_config(&loaded, &paths, &a.profile).with_faults(FaultInjection {
        crash_after_stage: a.crash_after_stage,
        ..Default::default()
    });
    let result = match &a.resume {
        Some(ckpt) => resume_from_checkpoint(ckpt, loaded.resources, loaded.bindings, config),
        None => run_workflow(loaded.workflow, loaded.resources, loaded.bindings, config),
    };
    let code = match &result {
        Ok(s) if s.all_done() => exit::OK,
        Ok(_) => exit::EXECUTOR,
        Err(e) => exit_code(e),
    };
    let summary = match &result {
        Ok(s) => Some(s),
        Err(EngineError::ExecutorFailure { summary, .. }) => Some(&**summary),
        Err(_) => None,
    };
    if let Some(s) = summary {
        if let Err(e) = write_summary(&paths.summary, s) {
            eprintln!("error: writing {}: {e}", paths.summary.display());
            return exit::FAILURE;
        }
        say!("{}", describe(s, &a.profile, &paths.summary));
    }
    match result {
        Err(EngineError::InjectedCrash { stages_done }) => eprintln!(
            "crashed after {stages_done} stages; resume with --resume {}",
            paths.checkpoint.display()
        ),
        Err(e) => eprintln!("error: {e}"),
        Ok(_) => {}
    }
    code
}

pub fn exit_code(e: &EngineError) -> i32 {
    match e {
        EngineError::Invalid(_) | EngineError::UnboundPolicy(_) => exit::INVALID,
        EngineError::Adaptation(_) => exit::ADAPTATION,
        EngineError::Allocation(_) | EngineError::ExecutorFailure { .. } => exit::EXECUTOR,
        EngineError::InjectedCrash { .. } => exit::CRASHED,
        _ => exit::FAILURE,
    }
}

fn write_summary(path: &Path, s: &ExecutionSummary) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(f, s).map_err(std::io::Error::other)
}

fn describe(s: &ExecutionSummary, profile: &Path, summary: &Path) -> String {
    let m = s.metrics();
    format!(
        "{} of {} pipelines done, {} tasks launched, {} adaptations, makespan {:.3} s, \
         adaptation overhead {:.4} s\nprofile: {}\nsummary: {}",
        s.workflow.pipelines.len() - s.failed_pipelines().len(),
        s.workflow.pipelines.len(),
        s.launches.len(),
        s.adaptations.len(),
        s.makespan_s,
        m.adaptation_overhead,
        profile.display(),
        summary.display()
    )
}

pub fn cmd_bench(a: &BenchArgs) -> i32 {
    let id: ExperimentId = match a.experiment.parse() {
        Ok(id) => id,
        Err(e) => {
            eprintln!("error: {e}");
            return exit::INVALID;
        }
    };
    let mut spec = ExperimentSpec::new(id, a.scale)
        .with_trials(a.trials)
        .with_work_dir(suffixed(&a.out, ".work"));
    if let Some(k) = a.kernel {
        spec = spec.with_kernel(k);
    }
    if let Some(seed) = a.seed {
        spec = spec.with_seed(seed);
    }
    if let Err(e) = spec.validate() {
        eprintln!("error: {e}");
        return exit::INVALID;
    }
    let report = match run_experiment(&spec) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return exit::FAILURE;
        }
    };
    let written = std::fs::File::create(&a.out).and_then(|f| report.write_csv(std::io::BufWriter::new(f)));
    if let Err(e) = written {
        eprintln!("error: writing {}: {e}", a.out.display());
        return exit::FAILURE;
    }
    say!("{}", report.summary());
    exit::OK
}
