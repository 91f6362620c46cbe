use std::path::Path;
use std::sync::Arc;

use adaptive_ensemble::adapt::BranchTaken;
use adaptive_ensemble::clock::{mix_seed, stable_hash};
use adaptive_ensemble::drivers::{
    asynchrony_witness, build_ee_workflow, build_msm_workflow, kernels, msm_expected_iterations, msm_totals,
    AnalysisMode, ConvergenceCriterion, DriverWorkflow, EeConfig, EnsembleMemberState, MsmConfig,
};
use adaptive_ensemble::exec::{MockExecutor, ResourceRequest};
use adaptive_ensemble::model::{AdaptationType, EntityState};
use adaptive_ensemble::orchestrator::{run_workflow, EngineConfig, ExecutionSummary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn run(d: DriverWorkflow, dir: &Path) -> ExecutionSummary {
    let config = EngineConfig::default()
        .with_executor(Arc::new(MockExecutor::with_kernels(kernels())))
        .with_run_dir(dir.join("run"));
    let s = run_workflow(d.workflow, ResourceRequest::new(2, 4), d.bindings, config).unwrap();
    assert!(s.all_done(), "{:?}", s.failed_pipelines());
    s
}

fn delta(tolerance: f64, window: u32) -> ConvergenceCriterion {
    ConvergenceCriterion::RunningMeanDelta { tolerance, window }
}

fn ee(n: u32, max: u32, mode: AnalysisMode, seed: u64, dir: &Path) -> EeConfig {
    EeConfig::new(n, max, mode, delta(0.01, 3), seed).with_shared_data_dir(dir.join("shared"))
}

/// Replays the member-0 sample stream on its own: mean
/// 1 + exp(-k/2), deviation 0.25, 32 + 32 samples per iteration, and
/// returns the running mean after every iteration.
fn replay_member0(seed: u64, iterations: u32) -> Vec<f64> {
    let mut all = Vec::new();
    let mut out = Vec::new();
    for k in 0..iterations {
        let mean = 1.0 + (-(k as f64) / 2.0).exp();
        for seg in 0..2 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, stable_hash(&format!("ee/m0/{k}/{seg}"))));
            let normal = Normal::new(mean, 0.25).unwrap();
            all.extend((0..32).map(|_| normal.sample(&mut rng)));
        }
        out.push(all.iter().sum::<f64>() / all.len() as f64);
    }
    out
}

fn first_converged(estimates: &[f64], tolerance: f64, window: usize) -> Option<usize> {
    (window..estimates.len()).find(|&k| (k + 1 - window..=k).all(|j| (estimates[j] - estimates[j - 1]).abs() < tolerance))
}

#[test]
fn ee_member_stops_where_the_replayed_generator_converges() {
    let dir = tempfile::tempdir().unwrap();
    let oracle = replay_member0(7, 60);
    let k0 = first_converged(&oracle, 0.01, 3).expect("replay never converges");
    run(build_ee_workflow(&ee(1, 60, AnalysisMode::Local, 7, dir.path())).unwrap(), dir.path());
    let state = EnsembleMemberState::load(&dir.path().join("shared"), "m0").unwrap();
    assert_eq!(state.iteration, k0 + 1, "oracle converges at iteration {k0}");
    for (got, want) in state.estimates.iter().zip(&oracle) {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
    assert_eq!(state.manifest.len(), 2 * (k0 + 1));
}

#[test]
fn single_member_local_and_global_agree() {
    let estimates = |mode| {
        let dir = tempfile::tempdir().unwrap();
        run(build_ee_workflow(&ee(1, 40, mode, 11, dir.path())).unwrap(), dir.path());
        EnsembleMemberState::load(&dir.path().join("shared"), "m0").unwrap().estimates
    };
    let local = estimates(AnalysisMode::Local);
    assert!(!local.is_empty());
    assert_eq!(local, estimates(AnalysisMode::Global));
}

#[test]
fn local_runs_are_reproducible() {
    let states = || {
        let dir = tempfile::tempdir().unwrap();
        run(build_ee_workflow(&ee(3, 40, AnalysisMode::Local, 5, dir.path())).unwrap(), dir.path());
        EnsembleMemberState::load_all(&dir.path().join("shared")).unwrap()
    };
    let a = states();
    assert_eq!(a.len(), 3);
    assert_eq!(a, states());
}

#[test]
fn each_ee_hook_adds_reorders_and_resizes() {
    let dir = tempfile::tempdir().unwrap();
    let s = run(build_ee_workflow(&ee(2, 4, AnalysisMode::Local, 3, dir.path())).unwrap(), dir.path());
    let taken: Vec<_> = s.adaptations.iter().filter(|r| r.branch_taken == BranchTaken::True).collect();
    assert!(!taken.is_empty());
    for r in &taken {
        assert!(r.classified_types.contains(&AdaptationType::TaskCount), "{r:?}");
        assert!(r.classified_types.contains(&AdaptationType::TaskProperty), "{r:?}");
    }
    assert!(taken
        .iter()
        .any(|r| r.classified_types.contains(&AdaptationType::TaskOrder)));
    for p in &s.workflow.pipelines {
        assert_eq!(p.stages.len(), 3 * 4);
    }
}

#[test]
fn sixteen_members_iterate_independently() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ee(16, 30, AnalysisMode::Local, 21, dir.path());
    cfg.samples_per_iter = 8;
    let s = run(build_ee_workflow(&cfg).unwrap(), dir.path());
    assert_eq!(s.workflow.pipelines.len(), 16);
    assert_eq!(EnsembleMemberState::load_all(&dir.path().join("shared")).unwrap().len(), 16);
    let mut counts = std::collections::BTreeSet::new();
    for p in &s.workflow.pipelines {
        let st = EnsembleMemberState::load(&dir.path().join("shared"), &p.uid).unwrap();
        assert_eq!(p.state, EntityState::Done);
        assert_eq!(p.stages.len(), 3 * st.iteration);
        counts.insert(st.iteration);
    }
    assert!(counts.len() > 1, "every member ran {counts:?} iterations");
}

#[test]
fn global_analysis_finishes_while_a_neighbor_simulates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ee(3, 3, AnalysisMode::Global, 9, dir.path()).with_timing(0.05, 0.005, 1.0);
    let s = run(build_ee_workflow(&cfg).unwrap(), dir.path());
    let w = asynchrony_witness(&s.profile).expect("no analysis overlapped a neighbor's simulation");
    assert_ne!(w.analysis.split('/').next(), w.running_neighbor.split('/').next());
}

#[test]
fn msm_iteration_count_is_the_ceiling_over_a_grid() {
    let threshold = 50;
    for sims in [1, 3, 10] {
        for samples in [1, 4, 10] {
            let dir = tempfile::tempdir().unwrap();
            let cfg = MsmConfig::new(sims, samples, threshold, 4).with_shared_data_dir(dir.path().join("shared"));
            let s = run(build_msm_workflow(&cfg).unwrap(), dir.path());
            let totals = msm_totals(&dir.path().join("shared")).unwrap();
            let expected = threshold.div_ceil(u64::from(sims * samples));
            assert_eq!(msm_expected_iterations(sims, samples, threshold), expected);
            assert_eq!(totals.len() as u64, expected, "sims={sims} samples={samples}");
            assert!(*totals.last().unwrap() >= threshold);
            assert_eq!(s.workflow.pipelines[0].stages.len() as u64, 2 * expected);
        }
    }
}

#[test]
fn msm_simulation_always_precedes_its_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = MsmConfig::new(3, 2, 20, 4).with_shared_data_dir(dir.path().join("shared"));
    let s = run(build_msm_workflow(&cfg).unwrap(), dir.path());
    let uids: Vec<_> = s.workflow.pipelines[0].stages.iter().map(|s| s.uid.as_str()).collect();
    assert_eq!(uids, ["i0.sim", "i0.ana", "i1.sim", "i1.ana", "i2.sim", "i2.ana", "i3.sim", "i3.ana"]);
    assert_eq!(msm_totals(&dir.path().join("shared")).unwrap(), [6, 12, 18, 24]);
    let taken = s.adaptations.iter().filter(|r| r.branch_taken == BranchTaken::True);
    for r in taken {
        assert!(r.classified_types.contains(&AdaptationType::TaskOrder), "{r:?}");
    }
}

#[test]
fn msm_zero_threshold_runs_one_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = MsmConfig::new(2, 2, 0, 1).with_shared_data_dir(dir.path().join("shared"));
    run(build_msm_workflow(&cfg).unwrap(), dir.path());
    assert_eq!(msm_totals(&dir.path().join("shared")).unwrap(), [4]);
}
