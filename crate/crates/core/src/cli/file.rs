//! The declarative workflow file.
//!
//! A TOML document with a `[resources]` table, either `[[pipelines]]` with
//! nested stages and tasks or one `[driver]` table, named `[policies.*]`
//! hooks, and a run `seed`. Unknown keys are errors everywhere.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{PolicyBindings, PolicySpec};
use crate::drivers::{
    build_ee_workflow, build_msm_workflow, AnalysisMode, ConvergenceCriterion, Drift, DriverWorkflow, EeConfig,
    MsmConfig,
};
use crate::exec::{allocate_pool, RetryPolicy, ResourceRequest};
use crate::model::{validate_workflow, NodeType, Pipeline, Stage, TaskSpec, ValidationReport, Violation, Workflow};

/// Rules the file adds on top of the workflow model's own.
pub mod rule {
    pub const POLICY_UNBOUND: &str = "policy.unbound";
    pub const POLICY_INVALID: &str = "policy.invalid";
    pub const DRIVER_INVALID: &str = "driver.invalid";
    pub const FILE_CONFLICT: &str = "file.conflict";
    pub const RESOURCES: &str = "resources.invalid";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    /// Sleeps `duration_hint` seconds per task.
    #[default]
    Mock,
    /// Spawns each task's executable.
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourcesSection {
    pub nodes: u32,
    pub cores_per_node: u32,
    #[serde(default)]
    pub walltime_s: Option<f64>,
    #[serde(default)]
    pub executor: ExecutorKind,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl ResourcesSection {
    pub fn request(&self) -> ResourceRequest {
        ResourceRequest {
            nodes: self.nodes,
            cores_per_node: self.cores_per_node,
            walltime_s: self.walltime_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    #[serde(default)]
    pub max_adaptations: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub uid: String,
    #[serde(default = "default_executable")]
    pub executable: String,
    #[serde(default)]
    pub arguments: Vec<String>,
    #[serde(default = "one")]
    pub cores: u32,
    #[serde(default)]
    pub node_type: NodeType,
    #[serde(default = "one")]
    pub node_count: u32,
    #[serde(default)]
    pub duration_hint: Option<f64>,
    #[serde(default)]
    pub input_refs: Vec<String>,
    #[serde(default)]
    pub environment: BTreeMap<String, String>,
}

fn default_executable() -> String {
    "sleep".into()
}

fn one() -> u32 {
    1
}

impl From<&TaskEntry> for TaskSpec {
    fn from(t: &TaskEntry) -> Self {
        TaskSpec {
            uid: t.uid.clone(),
            executable: t.executable.clone(),
            arguments: t.arguments.clone(),
            cores: t.cores,
            node_type: t.node_type,
            node_count: t.node_count,
            duration_hint: t.duration_hint,
            input_refs: t.input_refs.clone(),
            environment: t.environment.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEntry {
    pub uid: String,
    #[serde(default)]
    pub post_exec: Option<String>,
    #[serde(default)]
    pub tasks: Vec<TaskEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineEntry {
    pub uid: String,
    #[serde(default)]
    pub post_exec: Option<String>,
    #[serde(default)]
    pub stages: Vec<StageEntry>,
}

/// Parameters of a generated driver workflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverSpec {
    Ee {
        n_members: u32,
        iterations_max: u32,
        mode: AnalysisMode,
        criterion: ConvergenceCriterion,
        #[serde(default)]
        samples_per_iter: Option<u32>,
        #[serde(default)]
        drift: Option<Drift>,
        #[serde(default)]
        sim_seconds: f64,
        #[serde(default)]
        analysis_seconds: f64,
        #[serde(default)]
        member_skew: f64,
        #[serde(default)]
        max_cores: Option<u32>,
    },
    Msm {
        sims_per_iter: u32,
        samples_per_sim: u32,
        threshold: u64,
        #[serde(default)]
        iterations_max: Option<u32>,
        #[serde(default)]
        cores_per_sim: Option<u32>,
        #[serde(default)]
        sim_seconds: f64,
        #[serde(default)]
        analysis_seconds: f64,
    },
}

impl DriverSpec {
    pub fn build(&self, seed: u64, shared: &Path) -> Result<DriverWorkflow, crate::drivers::DriverError> {
        match self {
            Self::Ee {
                n_members,
                iterations_max,
                mode,
                criterion,
                samples_per_iter,
                drift,
                sim_seconds,
                analysis_seconds,
                member_skew,
                max_cores,
            } => {
                let mut c = EeConfig::new(*n_members, *iterations_max, *mode, *criterion, seed)
                    .with_shared_data_dir(shared)
                    .with_timing(*sim_seconds, *analysis_seconds, *member_skew);
                c.samples_per_iter = samples_per_iter.unwrap_or(c.samples_per_iter);
                c.drift = drift.unwrap_or(c.drift);
                c.max_cores = max_cores.unwrap_or(c.max_cores);
                build_ee_workflow(&c)
            }
            Self::Msm {
                sims_per_iter,
                samples_per_sim,
                threshold,
                iterations_max,
                cores_per_sim,
                sim_seconds,
                analysis_seconds,
            } => {
                let mut c = MsmConfig::new(*sims_per_iter, *samples_per_sim, *threshold, seed).with_shared_data_dir(shared);
                c.iterations_max = iterations_max.unwrap_or(c.iterations_max);
                c.cores_per_sim = cores_per_sim.unwrap_or(c.cores_per_sim);
                c.sim_seconds = *sim_seconds;
                c.analysis_seconds = *analysis_seconds;
                build_msm_workflow(&c)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowFile {
    #[serde(default)]
    pub seed: u64,
    pub resources: ResourcesSection,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub pipelines: Vec<PipelineEntry>,
    #[serde(default)]
    pub policies: BTreeMap<String, PolicySpec>,
    #[serde(default)]
    pub driver: Option<DriverSpec>,
}

/// A document that is not well-formed TOML or does not match the schema.
#[derive(Debug, thiserror::Error)]
pub enum FileError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
}

/// Everything needed to start a run.
pub struct LoadedWorkflow {
    pub workflow: Workflow,
    pub bindings: PolicyBindings,
    pub resources: ResourceRequest,
    pub file: WorkflowFile,
}

impl WorkflowFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self, FileError> {
        toml::from_str(text).map_err(|e| {
            let (line, column) = e
                .span()
                .map(|s| line_col(text, s.start))
                .unwrap_or((1, 1));
            FileError::Parse {
                path: path.to_path_buf(),
                line,
                column,
                message: e.message().trim().to_string(),
            }
        })
    }

    pub fn read(path: &Path) -> Result<Self, FileError> {
        let text = std::fs::read_to_string(path).map_err(|source| FileError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    /// Builds the workflow and its hooks. Problems that a well-formed file
    /// can still have come back as a report rather than an error.
    pub fn load(self, shared_data_dir: &Path) -> Result<LoadedWorkflow, ValidationReport> {
        let mut problems = Vec::new();
        let violation = |rule: &str, uid: &str, message: String| Violation {
            rule: rule.into(),
            uid: uid.into(),
            message,
        };
        let mut bindings = PolicyBindings::new();
        for (name, spec) in &self.policies {
            match spec.build(name, self.seed) {
                Ok(p) => bindings.insert(name.clone(), p),
                Err(e) => problems.push(violation(rule::POLICY_INVALID, name, e.to_string())),
            }
        }
        let mut workflow = Workflow::new().with_shared_data_dir(shared_data_dir);
        if let Some(driver) = &self.driver {
            if !self.pipelines.is_empty() {
                problems.push(violation(
                    rule::FILE_CONFLICT,
                    "driver",
                    "a driver generates its own pipelines; remove [[pipelines]]".into(),
                ));
            }
            match driver.build(self.seed, shared_data_dir) {
                Ok(d) => {
                    workflow.pipelines = d.workflow.pipelines;
                    for key in d.bindings.keys().map(String::from).collect::<Vec<_>>() {
                        if self.policies.contains_key(&key) {
                            problems.push(violation(
                                rule::FILE_CONFLICT,
                                &key,
                                "policy name is reserved by the driver".into(),
                            ));
                        }
                    }
                    bindings.extend(d.bindings);
                }
                Err(e) => problems.push(violation(rule::DRIVER_INVALID, "driver", e.to_string())),
            }
        } else {
            workflow.pipelines = self.pipelines.iter().map(to_pipeline).collect();
        }

        for p in &workflow.pipelines {
            let hooks = p.post_exec.iter().map(|k| (p.uid.clone(), k));
            let stage_hooks = p
                .stages
                .iter()
                .filter_map(|s| s.post_exec.as_ref().map(|k| (format!("{}/{}", p.uid, s.uid), k)));
            for (owner, key) in hooks.chain(stage_hooks) {
                if bindings.get(key).is_none() {
                    problems.push(violation(rule::POLICY_UNBOUND, &owner, format!("no policy named {key:?}")));
                }
            }
        }

        let resources = self.resources.request();
        match allocate_pool(&resources) {
            Ok(pool) => {
                for (_, _, t) in workflow.tasks() {
                    if let Some(why) = pool.never_fits(&t.spec) {
                        problems.push(violation(rule::RESOURCES, &t.spec.uid, why));
                    }
                }
            }
            Err(e) => problems.push(violation(rule::RESOURCES, "resources", e.to_string())),
        }

        let mut report = validate_workflow(&workflow);
        report.violations.extend(problems);
        if !report.is_empty() {
            return Err(report);
        }
        Ok(LoadedWorkflow {
            workflow,
            bindings,
            resources,
            file: self,
        })
    }
}

fn to_pipeline(p: &PipelineEntry) -> Pipeline {
    let mut out = Pipeline::new(&p.uid);
    out.post_exec = p.post_exec.clone();
    for s in &p.stages {
        let mut stage = Stage::new(&s.uid).with_tasks(s.tasks.iter().map(TaskSpec::from));
        stage.post_exec = s.post_exec.clone();
        out.add_stage(stage);
    }
    out
}

/// 1-based line and column of byte `offset`.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}
