//! Expanded-ensemble style driver: independent members, each iterating
//! simulate, simulate, analyze until its running estimate converges.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::files::{self, KernelArgs};
use super::{ConvergenceCriterion, DriverError, DriverWorkflow};
use crate::adapt::{compose_policies, AdaptationPolicy, Branch, Condition, PolicyBindings, SetTaskCores, ShuffleRemaining};
use crate::clock::{mix_seed, stable_hash};
use crate::exec::{KernelCall, KernelOutput, KernelRegistry};
use crate::model::{AdaptationType, Pipeline, Stage, TaskSpec, Workflow};
use crate::profiler::{EventKind, ProfileEvent};

pub const EE_POLICY: &str = "ee_iterate";
pub(super) const DATA_DIR: &str = "ee";
const SIMULATE: &str = "ee.simulate";
const ANALYZE: &str = "ee.analyze";
const ANALYSIS_SUFFIX: &str = ".ana";

/// Which data a member's analysis averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisMode {
    /// The member's own samples.
    Local,
    /// Whatever every member has published so far.
    Global,
}

impl fmt::Display for AnalysisMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Local => "local",
            Self::Global => "global",
        })
    }
}

impl FromStr for AnalysisMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(Self::Local),
            "global" => Ok(Self::Global),
            _ => Err(format!("unknown analysis mode {s:?}; expected local or global")),
        }
    }
}

/// Samples of iteration `k` are normal with mean
/// `target + (start - target) * exp(-k / relaxation)` and deviation `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Drift {
    pub start_mean: f64,
    pub target_mean: f64,
    /// Iterations for the mean to cover 1/e of the remaining distance.
    pub relaxation: f64,
    pub sigma: f64,
}

impl Default for Drift {
    fn default() -> Self {
        Self {
            start_mean: 2.0,
            target_mean: 1.0,
            relaxation: 2.0,
            sigma: 0.25,
        }
    }
}

impl Drift {
    pub fn mean_at(&self, iteration: u32) -> f64 {
        self.target_mean + (self.start_mean - self.target_mean) * (-f64::from(iteration) / self.relaxation).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EeConfig {
    pub n_members: u32,
    pub iterations_max: u32,
    pub mode: AnalysisMode,
    pub criterion: ConvergenceCriterion,
    pub seed: u64,
    /// Split over the two simulation segments of an iteration.
    pub samples_per_iter: u32,
    pub drift: Drift,
    /// Mock duration of one simulation segment of member 0.
    pub sim_seconds: f64,
    pub analysis_seconds: f64,
    /// Member `m` simulates `1 + m * member_skew` times as long as member 0,
    /// so members drift out of step.
    pub member_skew: f64,
    /// Core counts drawn for the next segment lie in `[1, max_cores - 1]`.
    pub max_cores: u32,
    pub shared_data_dir: Option<PathBuf>,
}

impl EeConfig {
    pub fn new(
        n_members: u32,
        iterations_max: u32,
        mode: AnalysisMode,
        criterion: ConvergenceCriterion,
        seed: u64,
    ) -> Self {
        Self {
            n_members,
            iterations_max,
            mode,
            criterion,
            seed,
            samples_per_iter: 64,
            drift: Drift::default(),
            sim_seconds: 0.0,
            analysis_seconds: 0.0,
            member_skew: 0.0,
            max_cores: 4,
            shared_data_dir: None,
        }
    }

    pub fn with_shared_data_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.shared_data_dir = Some(dir.into());
        self
    }

    pub fn with_timing(mut self, sim_seconds: f64, analysis_seconds: f64, member_skew: f64) -> Self {
        self.sim_seconds = sim_seconds;
        self.analysis_seconds = analysis_seconds;
        self.member_skew = member_skew;
        self
    }

    fn validate(&self) -> Result<(), DriverError> {
        let bad = |m: String| Err(DriverError::InvalidParameter(m));
        self.criterion.validate()?;
        if self.n_members == 0 || self.iterations_max == 0 {
            return bad("n_members and iterations_max must be >= 1".into());
        }
        if self.samples_per_iter < 2 {
            return bad("samples_per_iter must be >= 2, one per segment".into());
        }
        let d = &self.drift;
        if !(d.relaxation > 0.0 && d.sigma >= 0.0 && d.sigma.is_finite() && d.start_mean.is_finite() && d.target_mean.is_finite()) {
            return bad(format!("drift {d:?} needs relaxation > 0 and a finite sigma >= 0"));
        }
        for (name, v) in [
            ("sim_seconds", self.sim_seconds),
            ("analysis_seconds", self.analysis_seconds),
            ("member_skew", self.member_skew),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and >= 0"));
            }
        }
        if self.max_cores < 2 {
            return bad("max_cores must be >= 2".into());
        }
        Ok(())
    }

    fn segment_samples(&self, seg: u32) -> u32 {
        let half = self.samples_per_iter / 2;
        if seg == 0 {
            self.samples_per_iter - half
        } else {
            half
        }
    }

    fn stages(&self, member: &str, index: u32, k: u32) -> Vec<Stage> {
        let sim_s = self.sim_seconds * (1.0 + f64::from(index) * self.member_skew);
        let mut out: Vec<Stage> = (0..2)
            .map(|seg| {
                let task = TaskSpec::new(format!("{member}.i{k}.sim{seg}"), format!("kernel:{SIMULATE}"))
                    .with_duration(sim_s)
                    .with_args(files::args([
                        ("member", member.to_string()),
                        ("iter", k.to_string()),
                        ("seg", seg.to_string()),
                        ("n", self.segment_samples(seg).to_string()),
                        ("seed", self.seed.to_string()),
                        ("mean", self.drift.mean_at(k).to_string()),
                        ("sigma", self.drift.sigma.to_string()),
                    ]));
                Stage::new(format!("i{k}.sim{seg}")).with_tasks([task])
            })
            .collect();
        let analyze = TaskSpec::new(format!("{member}.i{k}{ANALYSIS_SUFFIX}"), format!("kernel:{ANALYZE}"))
            .with_duration(self.analysis_seconds)
            .with_args(files::args([
                ("member", member.to_string()),
                ("iter", k.to_string()),
                ("mode", self.mode.to_string()),
            ]));
        out.push(Stage::new(format!("i{k}{ANALYSIS_SUFFIX}")).with_tasks([analyze]));
        out
    }
}

fn member_dir(shared: &Path, member: &str) -> PathBuf {
    shared.join(DATA_DIR).join(member)
}

fn manifest_path(shared: &Path, member: &str) -> PathBuf {
    member_dir(shared, member).join("manifest")
}

fn estimates_path(shared: &Path, member: &str) -> PathBuf {
    member_dir(shared, member).join("estimates")
}

/// Builds `n_members` pipelines `m0, m1, ...`, each starting with iteration
/// 0. After an iteration the pipeline hook appends the next one, with a
/// seeded segment order and fresh core counts for the first segment, until
/// the member converges or `iterations_max` iterations ran.
pub fn build_ee_workflow(cfg: &EeConfig) -> Result<DriverWorkflow, DriverError> {
    cfg.validate()?;
    let mut w = Workflow::new();
    if let Some(dir) = &cfg.shared_data_dir {
        w = w.with_shared_data_dir(dir);
    }
    for m in 0..cfg.n_members {
        let uid = format!("m{m}");
        let mut p = Pipeline::new(&uid).with_post_exec(EE_POLICY);
        for s in cfg.stages(&uid, m, 0) {
            p.add_stage(s);
        }
        w.pipelines.push(p);
    }

    let c = Arc::new(cfg.clone());
    let next = {
        let c = c.clone();
        Branch::new("ee_next_iteration", [AdaptationType::TaskCount].into(), move |ctx, view| {
            let member = ctx.pipeline_uid().to_string();
            let index = member_index(&member)?;
            let k = u32::try_from(ctx.iteration + 1).context("iteration overflow")?;
            for s in c.stages(&member, index, k) {
                view.append_stage(s)?;
            }
            Ok(())
        })
    };
    let order = ShuffleRemaining::new(mix_seed(cfg.seed, stable_hash("ee/order")))
        .pinned(|s| s.uid.ends_with(ANALYSIS_SUFFIX))
        .build();
    let cores = SetTaskCores::new(mix_seed(cfg.seed, stable_hash("ee/cores")), cfg.max_cores)
        .require_change()
        .build()
        .map_err(|e| DriverError::InvalidParameter(e.to_string()))?;
    let branch = compose_policies(vec![cores, order, next]).map_err(|e| DriverError::InvalidParameter(e.to_string()))?;

    let cond = Condition::new("ee_not_converged", move |ctx| {
        let estimates = files::read_series(&estimates_path(&ctx.shared_data_dir, ctx.pipeline_uid()))?;
        let samples = (ctx.iteration + 1) * u64::from(c.samples_per_iter);
        Ok(!c.criterion.is_met(&estimates, samples) && ctx.iteration + 1 < u64::from(c.iterations_max))
    });
    Ok(DriverWorkflow {
        workflow: w,
        bindings: PolicyBindings::new().bind(EE_POLICY, AdaptationPolicy::when(cond, branch)),
    })
}

fn member_index(uid: &str) -> anyhow::Result<u32> {
    uid.strip_prefix('m')
        .and_then(|i| i.parse().ok())
        .ok_or_else(|| anyhow!("{uid:?} is not an ensemble member pipeline"))
}

pub(super) fn register(r: &mut KernelRegistry) {
    r.register(SIMULATE, simulate);
    r.register(ANALYZE, analyze);
}

fn simulate(call: &KernelCall<'_>) -> anyhow::Result<KernelOutput> {
    let a = KernelArgs::parse(call.spec)?;
    let member = a.str("member")?;
    let iter: u32 = a.get("iter")?;
    let seg: u32 = a.get("seg")?;
    let n: u32 = a.get("n")?;
    let seed: u64 = a.get("seed")?;
    let normal = Normal::new(a.get::<f64>("mean")?, a.get::<f64>("sigma")?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, stable_hash(&format!("ee/{member}/{iter}/{seg}"))));
    let samples: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();

    // data first, then the manifest entry: a listed file is always complete
    let dir = member_dir(call.shared_data_dir, member);
    let data = dir.join(format!("i{iter:05}.s{seg}.dat"));
    files::write_atomic(&data, &files::format_values(&samples))?;
    files::add_to_manifest(&manifest_path(call.shared_data_dir, member), &files::rel(&data, call.shared_data_dir))?;
    Ok(KernelOutput {
        exit_code: 0,
        files: vec![data],
    })
}

fn analyze(call: &KernelCall<'_>) -> anyhow::Result<KernelOutput> {
    let a = KernelArgs::parse(call.spec)?;
    let member = a.str("member")?;
    let iter: usize = a.get("iter")?;
    let mode: AnalysisMode = a.get("mode")?;
    let shared = call.shared_data_dir;
    let members = match mode {
        AnalysisMode::Local => vec![member.to_string()],
        AnalysisMode::Global => published_members(shared)?,
    };
    let (mut sum, mut n) = (0.0, 0);
    for m in &members {
        let entries = match files::read_manifest(&manifest_path(shared, m)) {
            Ok(e) => e,
            Err(e) => {
                log::warn!("{}: skipping manifest of {m}: {e}", call.spec.uid);
                continue;
            }
        };
        let (s, c) = files::sum_entries(shared, &entries);
        sum += s;
        n += c;
    }
    if n == 0 {
        return Err(anyhow!("{}: no samples visible", call.spec.uid));
    }
    let path = estimates_path(shared, member);
    files::set_series_entry(&path, iter, sum / n as f64)?;
    Ok(KernelOutput {
        exit_code: 0,
        files: vec![path],
    })
}

/// Members with a data directory, in name order.
fn published_members(shared: &Path) -> anyhow::Result<Vec<String>> {
    let root = shared.join(DATA_DIR);
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&root).with_context(|| format!("listing {}", root.display()))? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

/// What one member has published so far.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMemberState {
    pub member: String,
    /// Completed iterations.
    pub iteration: usize,
    /// `estimates[k]` was computed at the end of iteration `k`.
    pub estimates: Vec<f64>,
    /// Data files, relative to the shared data directory.
    pub manifest: Vec<String>,
}

impl EnsembleMemberState {
    pub fn load(shared: &Path, member: &str) -> anyhow::Result<Self> {
        let estimates = files::read_series(&estimates_path(shared, member))?;
        Ok(Self {
            member: member.to_string(),
            iteration: estimates.len(),
            estimates,
            manifest: files::read_manifest(&manifest_path(shared, member))?,
        })
    }

    pub fn load_all(shared: &Path) -> anyhow::Result<Vec<Self>> {
        published_members(shared)?.iter().map(|m| Self::load(shared, m)).collect()
    }
}

/// An analysis task of one member that finished while a simulation task of
/// another member was running.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsynchronyWitness {
    pub analysis: String,
    pub running_neighbor: String,
    pub t: u64,
}

/// Looks for proof in a run's trace that analysis did not wait for the
/// other members.
pub fn asynchrony_witness(profile: &[ProfileEvent]) -> Option<AsynchronyWitness> {
    let mut open: BTreeMap<&str, u64> = BTreeMap::new();
    let mut spans: Vec<(&str, u64, u64)> = Vec::new();
    let mut analysis_ends: Vec<(&str, u64)> = Vec::new();
    for ev in profile {
        match ev.event {
            EventKind::TaskStart => {
                open.insert(&ev.entity_uid, ev.t);
            }
            EventKind::TaskEnd => {
                if let Some(start) = open.remove(ev.entity_uid.as_str()) {
                    spans.push((&ev.entity_uid, start, ev.t));
                }
                if ev.entity_uid.ends_with(ANALYSIS_SUFFIX) {
                    analysis_ends.push((&ev.entity_uid, ev.t));
                }
            }
            _ => {}
        }
    }
    let pipeline = |path: &str| path.split('/').next().unwrap_or_default().to_string();
    analysis_ends.iter().find_map(|&(ana, t)| {
        spans
            .iter()
            .find(|&&(task, start, end)| {
                !task.ends_with(ANALYSIS_SUFFIX) && pipeline(task) != pipeline(ana) && start < t && t < end
            })
            .map(|&(task, _, _)| AsynchronyWitness {
                analysis: ana.to_string(),
                running_neighbor: task.to_string(),
                t,
            })
    })
}
