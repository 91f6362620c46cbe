//! The five adaptation-overhead experiments, at desk scale.
//!
//! Every experiment runs one pipeline on the mock executor and reports the
//! adaptation overhead and task execution time of each (config, trial).
//!
//! | id  | adaptation    | variable               | fixed                               |
//! |-----|---------------|------------------------|-------------------------------------|
//! | I   | task count    | number of adaptations  | 16 single-node tasks per new stage  |
//! | II  | task count    | tasks per adaptation   | 2 adaptations                       |
//! | III | task count    | single- or multi-node  | 2 adaptations, `2^10 * 2^s` tasks   |
//! | IV  | task order    | number of adaptations  | shuffle remaining stages            |
//! | V   | task property | number of adaptations  | next stage's cores drawn in `[1,15]` |
//!
//! `scale` shrinks the full-size counts. Kernel durations are set separately.

use std::fmt;
use std::io::{self, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use crate::adapt::{
    AdaptationPolicy, AddStages, Branch, Condition, PolicyBindings, SetTaskCores, ShuffleRemaining,
};
use crate::clock::mix_seed;
use crate::exec::{MockExecutor, ResourceRequest};
use crate::model::{AdaptationType, NodeType, Pipeline, Stage, TaskSpec, Workflow};
use crate::orchestrator::{run_workflow, EngineConfig, EngineError};

pub const REPORT_HEADER: &str =
    "experiment,config,trial,adaptations,tasks_added,task_type,adaptation_overhead_s,task_execution_time_s,seed";

/// Scale at which the suite runs on a laptop in minutes.
pub const DEFAULT_SCALE: f64 = 1.0 / 16.0;
/// Kernel seconds for the experiments varying adaptation count.
pub const SHORT_KERNEL_S: f64 = 2.0;
/// Kernel seconds for the experiments adding many tasks.
pub const LONG_KERNEL_S: f64 = 5.0;

const TASKS_PER_STAGE: u32 = 16;
const CORES_PER_NODE: u32 = 16;
const MULTI_NODE_NODES: u32 = 2;
const HOOK: &str = "adapt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExperimentId {
    I,
    II,
    III,
    IV,
    V,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 5] = [Self::I, Self::II, Self::III, Self::IV, Self::V];

    pub fn adaptation_type(self) -> AdaptationType {
        match self {
            Self::I | Self::II | Self::III => AdaptationType::TaskCount,
            Self::IV => AdaptationType::TaskOrder,
            Self::V => AdaptationType::TaskProperty,
        }
    }

    /// Whether the experiment varies the number of adaptations.
    pub fn varies_adaptations(self) -> bool {
        matches!(self, Self::I | Self::IV | Self::V)
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for ExperimentId {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|id| id.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| BenchError::UnknownExperiment(s.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("unknown experiment {0:?}; expected one of I, II, III, IV, V")]
    UnknownExperiment(String),
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error("run {config} trial {trial} failed: {source}")]
    Run {
        config: String,
        trial: u32,
        #[source]
        source: Box<EngineError>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One experimental configuration of Table-1 shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub id: ExperimentId,
    /// Values of the experiment variable: adaptation counts (I, IV, V),
    /// tasks per adaptation (II) or node types (III, as 0 = single, 1 = multi).
    pub values: Vec<u32>,
    pub trials: u32,
    pub scale: f64,
    pub kernel_s: f64,
    pub seed: u64,
    pub work_dir: PathBuf,
}

fn round_pow2(x: f64) -> u32 {
    let x = x.max(1.0);
    2u32.pow(x.log2().round() as u32)
}

impl ExperimentSpec {
    /// The experiment at `scale` with its default kernel and one trial.
    ///
    /// Adaptation counts double up to `256 * scale`; tasks added per
    /// adaptation are `256, 1024, 4096` times `scale`.
    pub fn new(id: ExperimentId, scale: f64) -> Self {
        let values = match id {
            ExperimentId::I | ExperimentId::IV | ExperimentId::V => {
                let top = round_pow2(256.0 * scale).max(4);
                vec![top / 4, top / 2, top]
            }
            ExperimentId::II => [256.0, 1024.0, 4096.0].iter().map(|v| round_pow2(v * scale)).collect(),
            ExperimentId::III => vec![0, 1],
        };
        let kernel_s = match id {
            ExperimentId::II | ExperimentId::III => LONG_KERNEL_S,
            _ => SHORT_KERNEL_S,
        };
        Self {
            id,
            values,
            trials: 1,
            scale,
            kernel_s,
            seed: 1,
            work_dir: std::env::temp_dir().join("adaptive-ensemble-bench"),
        }
    }

    pub fn with_trials(mut self, trials: u32) -> Self {
        self.trials = trials;
        self
    }

    pub fn with_kernel(mut self, seconds: f64) -> Self {
        self.kernel_s = seconds;
        self
    }

    pub fn with_values(mut self, values: impl Into<Vec<u32>>) -> Self {
        self.values = values.into();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_work_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.work_dir = dir.into();
        self
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidSpec(m.to_string()));
        if self.values.is_empty() {
            return bad("no values for the experiment variable");
        }
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return bad("scale must be in (0, 1]");
        }
        if !(self.kernel_s.is_finite() && self.kernel_s >= 0.0) {
            return bad("kernel duration must be a non-negative number of seconds");
        }
        match self.id {
            ExperimentId::III if self.values.iter().any(|v| *v > 1) => bad("experiment III values are 0 (single) or 1 (multi)"),
            _ if self.values.contains(&0) && self.id != ExperimentId::III => bad("values must be at least 1"),
            _ => Ok(()),
        }
    }

    /// Tasks added by the adaptation creating stage `s` in experiment III.
    fn exp3_tasks(&self, s: u64) -> u32 {
        round_pow2(1024.0 * 2f64.powi(s as i32) * self.scale)
    }
}

/// One line of the benchmark report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentRow {
    pub experiment: ExperimentId,
    pub config: String,
    pub trial: u32,
    pub adaptations: u32,
    /// Total tasks created by adaptations in this run.
    pub tasks_added: u32,
    pub task_type: NodeType,
    pub adaptation_overhead_s: f64,
    pub task_execution_time_s: f64,
    pub seed: u64,
    #[serde(skip)]
    pub metrics: MetricsReport,
}

impl ExperimentRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.9},{:.9},{}",
            self.experiment,
            self.config,
            self.trial,
            self.adaptations,
            self.tasks_added,
            node_type_str(self.task_type),
            self.adaptation_overhead_s,
            self.task_execution_time_s,
            self.seed
        )
    }
}

fn node_type_str(t: NodeType) -> &'static str {
    match t {
        NodeType::SingleNode => "single_node",
        NodeType::MultiNode => "multi_node",
    }
}

/// Least-squares line through `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
}

pub fn linear_fit(points: &[(f64, f64)]) -> Option<LinearFit> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some(LinearFit {
        slope,
        intercept: my - slope * mx,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{REPORT_HEADER}")?;
        for r in &self.rows {
            writeln!(w, "{}", r.csv_line())?;
        }
        Ok(())
    }

    /// Mean overhead and execution time per config, in row order.
    pub fn means(&self) -> Vec<(String, f64, f64)> {
        let mut out: Vec<(String, f64, f64, u32)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|m| m.0 == r.config) {
                Some(m) => {
                    m.1 += r.adaptation_overhead_s;
                    m.2 += r.task_execution_time_s;
                    m.3 += 1;
                }
                None => out.push((r.config.clone(), r.adaptation_overhead_s, r.task_execution_time_s, 1)),
            }
        }
        out.into_iter()
            .map(|(c, o, e, n)| (c, o / n as f64, e / n as f64))
            .collect()
    }

    /// Overhead against the experiment variable: adaptations for I/IV/V,
    /// tasks added for II. Not defined for III.
    pub fn overhead_trend(&self) -> Option<LinearFit> {
        let x = |r: &ExperimentRow| match self.spec.id {
            ExperimentId::II => Some(r.tasks_added as f64),
            ExperimentId::III => None,
            _ => Some(r.adaptations as f64),
        };
        let pts: Option<Vec<_>> = self.rows.iter().map(|r| Some((x(r)?, r.adaptation_overhead_s))).collect();
        linear_fit(&pts?)
    }

    pub fn summary(&self) -> String {
        let mut s = format!("experiment {} ({})\n", self.spec.id, self.spec.id.adaptation_type());
        for (config, o, e) in self.means() {
            s.push_str(&format!("  {config:<16} overhead {o:>10.6} s   execution {e:>9.3} s\n"));
        }
        if let Some(fit) = self.overhead_trend() {
            let unit = if self.spec.id == ExperimentId::II {
                "task added"
            } else {
                "adaptation"
            };
            s.push_str(&format!("  overhead slope {:.3e} s per {unit}\n", fit.slope));
        }
        s
    }
}

struct Plan {
    workflow: Workflow,
    bindings: PolicyBindings,
    resources: ResourceRequest,
    config: String,
    adaptations: u32,
    tasks_added: u32,
    task_type: NodeType,
}

fn stage(uid: String, tasks: u32, template: &TaskSpec, hook: bool) -> Stage {
    let specs = (0..tasks).map(|j| TaskSpec {
        uid: format!("{uid}.t{j}"),
        ..template.clone()
    });
    let s = Stage::new(uid.clone()).with_tasks(specs);
    if hook {
        s.with_post_exec(HOOK)
    } else {
        s
    }
}

fn pool_for(concurrent_tasks: u32, task_type: NodeType) -> ResourceRequest {
    let nodes = match task_type {
        NodeType::SingleNode => concurrent_tasks.div_ceil(CORES_PER_NODE),
        NodeType::MultiNode => concurrent_tasks * MULTI_NODE_NODES,
    };
    ResourceRequest::new(nodes.max(1), CORES_PER_NODE)
}

fn plan(spec: &ExperimentSpec, value: u32, seed: u64, dir: &std::path::Path) -> Result<Plan, BenchError> {
    let template = TaskSpec::new("", "stress").with_duration(spec.kernel_s);
    let w = |p: Pipeline| Workflow::new().with_shared_data_dir(dir.join("shared")).with_pipeline(p);
    let built = |r: Result<Branch, _>| r.map_err(|e: crate::adapt::BuiltinError| BenchError::InvalidSpec(e.to_string()));
    let policy = |n: u32, branch: Branch| AdaptationPolicy::new(Condition::iterations_below(n as u64), branch, Branch::noop());

    Ok(match spec.id {
        ExperimentId::I | ExperimentId::II => {
            let (n, per) = match spec.id {
                ExperimentId::I => (value, TASKS_PER_STAGE),
                _ => (2, value),
            };
            let add = built(AddStages::new(1, per, template.clone()).inherit().build())?;
            Plan {
                workflow: w(Pipeline::new("p0").with_stage(stage("s0".into(), TASKS_PER_STAGE, &template, true))),
                bindings: PolicyBindings::new().bind(HOOK, policy(n, add)),
                resources: pool_for(per.max(TASKS_PER_STAGE), NodeType::SingleNode),
                config: match spec.id {
                    ExperimentId::I => format!("adaptations={n}"),
                    _ => format!("tasks_added={per}"),
                },
                adaptations: n,
                tasks_added: n * per,
                task_type: NodeType::SingleNode,
            }
        }
        ExperimentId::III => {
            let task_type = if value == 0 {
                NodeType::SingleNode
            } else {
                NodeType::MultiNode
            };
            let tmpl = match task_type {
                NodeType::SingleNode => template.clone(),
                NodeType::MultiNode => template.clone().multi_node(MULTI_NODE_NODES),
            };
            let counts: Vec<u32> = (1..=2).map(|s| spec.exp3_tasks(s)).collect();
            let per_stage = counts.clone();
            let t2 = tmpl.clone();
            let add = Branch::new(
                "add_stage(2^10*2^s)",
                [AdaptationType::TaskCount].into(),
                move |ctx, view| {
                    let n = per_stage[(ctx.iteration as usize).min(per_stage.len() - 1)];
                    let uid = view.fresh_stage_uid();
                    let tasks: Vec<TaskSpec> = (0..n as usize)
                        .map(|j| TaskSpec {
                            uid: view.fresh_task_uid(&uid, j),
                            ..t2.clone()
                        })
                        .collect();
                    let hook = view.trigger_post_exec().map(str::to_string);
                    let mut s = Stage::new(uid).with_tasks(tasks);
                    s.post_exec = hook;
                    view.append_stage(s)?;
                    Ok(())
                },
            );
            Plan {
                workflow: w(Pipeline::new("p0").with_stage(stage("s0".into(), TASKS_PER_STAGE, &tmpl, true))),
                bindings: PolicyBindings::new().bind(HOOK, policy(2, add)),
                resources: pool_for(counts.iter().copied().max().unwrap_or(1), task_type),
                config: format!("type={}", node_type_str(task_type)),
                adaptations: 2,
                tasks_added: counts.iter().sum(),
                task_type,
            }
        }
        ExperimentId::IV | ExperimentId::V => {
            // n adaptive stages followed by one that is not
            let mut p = Pipeline::new("p0");
            for s in 0..=value {
                p.add_stage(stage(format!("s{s}"), TASKS_PER_STAGE, &template, s < value));
            }
            let branch = if spec.id == ExperimentId::IV {
                ShuffleRemaining::new(seed).pinned(|s| s.post_exec.is_none()).build()
            } else {
                built(SetTaskCores::new(seed, CORES_PER_NODE).build())?
            };
            let cond = AdaptationPolicy::when(Condition::always(), branch);
            Plan {
                workflow: w(p),
                bindings: PolicyBindings::new().bind(HOOK, cond),
                // cores may be redrawn up to 15 per task
                resources: ResourceRequest::new(TASKS_PER_STAGE, CORES_PER_NODE),
                config: format!("adaptations={value}"),
                adaptations: value,
                tasks_added: 0,
                task_type: NodeType::SingleNode,
            }
        }
    })
}

/// Runs every (value, trial) of `spec` sequentially.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport, BenchError> {
    spec.validate()?;
    let mut rows = Vec::new();
    for &value in &spec.values {
        for trial in 0..spec.trials {
            let seed = mix_seed(spec.seed, ((value as u64) << 16) | trial as u64);
            let dir = spec.work_dir.join(format!("{}-{value}-{trial}", spec.id));
            let plan = plan(spec, value, seed, &dir)?;
            let config = EngineConfig::default()
                .with_executor(Arc::new(MockExecutor::new()))
                .with_run_dir(dir.join("run"))
                .with_max_adaptations(plan.adaptations as u64 + 2);
            let summary = run_workflow(plan.workflow, plan.resources, plan.bindings, config).map_err(|e| {
                BenchError::Run {
                    config: plan.config.clone(),
                    trial,
                    source: Box::new(e),
                }
            })?;
            let _ = std::fs::remove_dir_all(&dir);
            let metrics = summary.metrics();
            log::info!(
                "{} {} trial {trial}: overhead {:.6} s, execution {:.3} s",
                spec.id,
                plan.config,
                metrics.adaptation_overhead,
                metrics.task_execution_time
            );
            rows.push(ExperimentRow {
                experiment: spec.id,
                config: plan.config,
                trial,
                adaptations: plan.adaptations,
                tasks_added: plan.tasks_added,
                task_type: plan.task_type,
                adaptation_overhead_s: metrics.adaptation_overhead,
                task_execution_time_s: metrics.task_execution_time,
                seed,
                metrics,
            });
        }
    }
    Ok(ExperimentReport {
        spec: spec.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scale_values() {
        assert_eq!(ExperimentSpec::new(ExperimentId::I, DEFAULT_SCALE).values, [4, 8, 16]);
        assert_eq!(ExperimentSpec::new(ExperimentId::IV, DEFAULT_SCALE).values, [4, 8, 16]);
        assert_eq!(ExperimentSpec::new(ExperimentId::II, DEFAULT_SCALE).values, [16, 64, 256]);
        let s3 = ExperimentSpec::new(ExperimentId::III, DEFAULT_SCALE);
        assert_eq!((s3.exp3_tasks(1), s3.exp3_tasks(2)), (128, 256));
    }

    #[test]
    fn ids_parse() {
        assert_eq!("iv".parse::<ExperimentId>().unwrap(), ExperimentId::IV);
        assert!(matches!("VI".parse::<ExperimentId>(), Err(BenchError::UnknownExperiment(_))));
    }

    #[test]
    fn fit_recovers_line() {
        let pts: Vec<_> = (0..5).map(|x| (x as f64, 3.0 * x as f64 + 1.0)).collect();
        let f = linear_fit(&pts).unwrap();
        assert!((f.slope - 3.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!(linear_fit(&[(1.0, 2.0)]).is_none());
    }

    #[test]
    fn invalid_specs_rejected() {
        let s = ExperimentSpec::new(ExperimentId::I, DEFAULT_SCALE);
        assert!(s.clone().with_trials(0).validate().is_err());
        assert!(s.clone().with_values(Vec::new()).validate().is_err());
        assert!(s.with_kernel(-1.0).validate().is_err());
    }

    fn quick(id: ExperimentId, values: &[u32]) -> ExperimentReport {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec::new(id, DEFAULT_SCALE)
            .with_values(values.to_vec())
            .with_kernel(0.01)
            .with_work_dir(dir.path());
        run_experiment(&spec).unwrap()
    }

    #[test]
    fn each_experiment_runs_and_adapts() {
        let r = quick(ExperimentId::I, &[2]);
        assert_eq!(r.rows[0].tasks_added, 32);
        assert_eq!(r.rows[0].metrics.stages, 3);
        let r = quick(ExperimentId::IV, &[3]);
        assert_eq!(r.rows[0].metrics.adaptations, 3);
        let r = quick(ExperimentId::V, &[3]);
        assert_eq!(r.rows[0].metrics.adaptations, 3);
        assert!(r.rows[0].adaptation_overhead_s > 0.0);
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with(REPORT_HEADER));
        assert_eq!(text.lines().count(), 2);
    }
}
