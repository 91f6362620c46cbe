//! Expanded-ensemble driver: each member simulates, analyzes and decides on
//! its own whether to iterate again. Compare `local` (own samples only) with
//! `global` (every member's samples so far).
//!
//! cargo run --example ee_ensemble [members] [local|global]

use std::sync::Arc;

use adaptive_ensemble::drivers::{
    build_ee_workflow, kernels, AnalysisMode, ConvergenceCriterion, EeConfig, EnsembleMemberState,
};
use adaptive_ensemble::exec::{MockExecutor, ResourceRequest};
use adaptive_ensemble::orchestrator::{run_workflow, EngineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let members: u32 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(4);
    let mode: AnalysisMode = args.next().map(|s| s.parse()).transpose()?.unwrap_or(AnalysisMode::Local);

    let dir = tempfile::tempdir()?;
    let shared = dir.path().join("shared");
    let criterion = ConvergenceCriterion::RunningMeanDelta { tolerance: 0.01, window: 3 };
    let cfg = EeConfig::new(members, 40, mode, criterion, 7)
        .with_shared_data_dir(&shared)
        .with_timing(0.01, 0.0, 0.25);
    let d = build_ee_workflow(&cfg)?;
    let engine = EngineConfig::default()
        .with_executor(Arc::new(MockExecutor::with_kernels(kernels())))
        .with_run_dir(dir.path().join("run"));
    let summary = run_workflow(d.workflow, ResourceRequest::new(1, 8), d.bindings, engine)?;

    println!("{members} members, {mode} analysis, makespan {:.2} s", summary.makespan_s);
    for p in &summary.workflow.pipelines {
        let st = EnsembleMemberState::load(&shared, &p.uid)?;
        let last = st.estimates.last().copied().unwrap_or(f64::NAN);
        println!("  {:<4} {:>2} iterations, estimate {last:.4}", p.uid, st.iteration);
    }
    Ok(())
}
