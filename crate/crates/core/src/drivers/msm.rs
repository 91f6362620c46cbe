//! Markov-state-model style driver: one pipeline that adds batches of
//! simulations until the pooled trajectory data reaches a sample threshold.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::files::{self, KernelArgs};
use super::{ConvergenceCriterion, DriverError, DriverWorkflow};
use crate::adapt::{compose_policies, AdaptationPolicy, Branch, Condition, PolicyBindings};
use crate::clock::{mix_seed, stable_hash};
use crate::exec::{KernelCall, KernelOutput, KernelRegistry};
use crate::model::{AdaptationType, Pipeline, Stage, TaskSpec, Workflow};

pub const MSM_POLICY: &str = "msm_iterate";
pub(super) const DATA_DIR: &str = "msm";
const PIPELINE: &str = "msm";
const SIMULATE: &str = "msm.simulate";
const ANALYZE: &str = "msm.analyze";
/// Number of discrete states a simulated frame can land in.
const STATES: u32 = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct MsmConfig {
    pub sims_per_iter: u32,
    pub samples_per_sim: u32,
    /// Pooled samples needed; at least one iteration runs regardless.
    pub threshold: u64,
    pub seed: u64,
    /// Upper bound on iterations; a threshold that needs more is refused.
    pub iterations_max: u32,
    pub cores_per_sim: u32,
    pub sim_seconds: f64,
    pub analysis_seconds: f64,
    pub shared_data_dir: Option<PathBuf>,
}

impl MsmConfig {
    pub fn new(sims_per_iter: u32, samples_per_sim: u32, threshold: u64, seed: u64) -> Self {
        Self {
            sims_per_iter,
            samples_per_sim,
            threshold,
            seed,
            iterations_max: 1000,
            cores_per_sim: 1,
            sim_seconds: 0.0,
            analysis_seconds: 0.0,
            shared_data_dir: None,
        }
    }

    pub fn with_shared_data_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.shared_data_dir = Some(dir.into());
        self
    }

    pub fn per_iteration(&self) -> u64 {
        u64::from(self.sims_per_iter) * u64::from(self.samples_per_sim)
    }

    /// A threshold of 0 behaves like 1: the analysis has to run once.
    pub fn criterion(&self) -> ConvergenceCriterion {
        ConvergenceCriterion::CumulativeSampleCount {
            threshold: self.threshold.max(1),
        }
    }

    fn sim_stage(&self, k: u32) -> Stage {
        Stage::new(format!("i{k}.sim")).with_tasks((0..self.sims_per_iter).map(|j| {
            TaskSpec::new(format!("msm.i{k}.s{j}"), format!("kernel:{SIMULATE}"))
                .with_cores(self.cores_per_sim)
                .with_duration(self.sim_seconds)
                .with_args(files::args([
                    ("iter", k.to_string()),
                    ("sim", j.to_string()),
                    ("n", self.samples_per_sim.to_string()),
                    ("seed", self.seed.to_string()),
                ]))
        }))
    }

    fn analysis_stage(&self, k: u32) -> Stage {
        Stage::new(format!("i{k}.ana")).with_tasks([TaskSpec::new(format!("msm.i{k}.ana"), format!("kernel:{ANALYZE}"))
            .with_duration(self.analysis_seconds)
            .with_args(files::args([("iter", k.to_string())]))])
    }
}

/// Iterations a run needs: `ceil(threshold / (sims * samples))`, at least 1.
pub fn msm_expected_iterations(sims_per_iter: u32, samples_per_sim: u32, threshold: u64) -> u64 {
    let per = u64::from(sims_per_iter) * u64::from(samples_per_sim);
    threshold.div_ceil(per).max(1)
}

fn traj_dir(shared: &Path) -> PathBuf {
    shared.join(DATA_DIR).join("traj")
}

fn totals_path(shared: &Path) -> PathBuf {
    shared.join(DATA_DIR).join("totals")
}

/// Pooled sample count after each iteration so far.
pub fn msm_totals(shared: &Path) -> anyhow::Result<Vec<u64>> {
    Ok(files::read_series(&totals_path(shared))?.into_iter().map(|v| v as u64).collect())
}

/// Builds the single `msm` pipeline with iteration 0. After each iteration
/// the hook creates the next iteration's analysis and simulation stages,
/// then moves the simulation stage in front of the analysis that consumes
/// it, until the pooled count reaches the threshold.
pub fn build_msm_workflow(cfg: &MsmConfig) -> Result<DriverWorkflow, DriverError> {
    if cfg.sims_per_iter == 0 || cfg.samples_per_sim == 0 || cfg.iterations_max == 0 || cfg.cores_per_sim == 0 {
        return Err(DriverError::InvalidParameter(
            "sims_per_iter, samples_per_sim, cores_per_sim and iterations_max must be >= 1".into(),
        ));
    }
    for (name, v) in [("sim_seconds", cfg.sim_seconds), ("analysis_seconds", cfg.analysis_seconds)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(DriverError::InvalidParameter(format!("{name} = {v} must be finite and >= 0")));
        }
    }
    let needed = msm_expected_iterations(cfg.sims_per_iter, cfg.samples_per_sim, cfg.threshold);
    if needed > u64::from(cfg.iterations_max) {
        return Err(DriverError::Unreachable {
            threshold: cfg.threshold,
            per_iteration: cfg.per_iteration(),
            needed,
            iterations_max: cfg.iterations_max,
        });
    }

    let mut w = Workflow::new();
    if let Some(dir) = &cfg.shared_data_dir {
        w = w.with_shared_data_dir(dir);
    }
    w.pipelines.push(
        Pipeline::new(PIPELINE)
            .with_stage(cfg.sim_stage(0))
            .with_stage(cfg.analysis_stage(0))
            .with_post_exec(MSM_POLICY),
    );

    let c = Arc::new(cfg.clone());
    let add = {
        let c = c.clone();
        Branch::new("msm_next_iteration", [AdaptationType::TaskCount].into(), move |ctx, view| {
            let k = u32::try_from(ctx.iteration + 1).context("iteration overflow")?;
            view.append_stage(c.analysis_stage(k))?;
            view.append_stage(c.sim_stage(k))?;
            Ok(())
        })
    };
    let place = Branch::new("msm_simulate_first", [AdaptationType::TaskOrder].into(), |_, view| {
        let future = view.future_stages();
        let n = future.len();
        if n >= 2 && future[n - 2].uid.ends_with(".ana") && future[n - 1].uid.ends_with(".sim") {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.swap(n - 2, n - 1);
            view.reorder_future(&perm)?;
        }
        Ok(())
    });
    let branch = compose_policies(vec![place, add]).map_err(|e| DriverError::InvalidParameter(e.to_string()))?;
    let cond = Condition::new("msm_below_threshold", move |ctx| {
        let totals = msm_totals(&ctx.shared_data_dir)?;
        let pooled = totals.last().copied().unwrap_or(0);
        Ok(!c.criterion().is_met(&[], pooled) && ctx.iteration + 1 < u64::from(c.iterations_max))
    });
    Ok(DriverWorkflow {
        workflow: w,
        bindings: PolicyBindings::new().bind(MSM_POLICY, AdaptationPolicy::when(cond, branch)),
    })
}

pub(super) fn register(r: &mut KernelRegistry) {
    r.register(SIMULATE, simulate);
    r.register(ANALYZE, analyze);
}

fn simulate(call: &KernelCall<'_>) -> anyhow::Result<KernelOutput> {
    let a = KernelArgs::parse(call.spec)?;
    let iter: u32 = a.get("iter")?;
    let sim: u32 = a.get("sim")?;
    let n: u32 = a.get("n")?;
    let seed: u64 = a.get("seed")?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, stable_hash(&format!("msm/{iter}/{sim}"))));
    let frames: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..STATES))).collect();
    let path = traj_dir(call.shared_data_dir).join(format!("i{iter:05}.s{sim:05}.dat"));
    files::write_atomic(&path, &files::format_values(&frames))?;
    Ok(KernelOutput {
        exit_code: 0,
        files: vec![path],
    })
}

/// Pools every trajectory file of iterations up to its own and records the
/// total; the list of pooled files becomes the manifest.
fn analyze(call: &KernelCall<'_>) -> anyhow::Result<KernelOutput> {
    let a = KernelArgs::parse(call.spec)?;
    let iter: u32 = a.get("iter")?;
    let shared = call.shared_data_dir;
    let dir = traj_dir(shared);
    let mut entries = Vec::new();
    if dir.exists() {
        for e in std::fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = e?.path();
            let name = path.file_name().unwrap_or_default().to_string_lossy();
            let of_iter = name
                .strip_prefix('i')
                .and_then(|r| r.split('.').next())
                .and_then(|i| i.parse::<u32>().ok());
            if name.ends_with(".dat") && of_iter.is_some_and(|i| i <= iter) {
                entries.push(files::rel(&path, shared));
            }
        }
    }
    entries.sort();
    let mut pooled = 0u64;
    let mut listed = String::new();
    for e in &entries {
        match files::read_values(&shared.join(e)) {
            Ok(v) => {
                pooled += v.len() as u64;
                listed.push_str(e);
                listed.push('\n');
            }
            Err(err) => log::warn!("{}: skipping unreadable trajectory: {err:#}", call.spec.uid),
        }
    }
    files::write_atomic(&shared.join(DATA_DIR).join("manifest"), &listed)?;
    let totals = totals_path(shared);
    files::set_series_entry(&totals, iter as usize, pooled as f64)?;
    Ok(KernelOutput {
        exit_code: 0,
        files: vec![totals],
    })
}
