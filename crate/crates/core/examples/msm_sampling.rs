//! Markov-state-model driver: batches of simulations are added until the
//! pooled sample count reaches a threshold.
//!
//! cargo run --example msm_sampling [sims_per_iter] [samples_per_sim] [threshold]

use std::sync::Arc;

use adaptive_ensemble::drivers::{build_msm_workflow, kernels, msm_expected_iterations, msm_totals, MsmConfig};
use adaptive_ensemble::exec::{MockExecutor, ResourceRequest};
use adaptive_ensemble::orchestrator::{run_workflow, EngineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let sims: u32 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10);
    let samples: u32 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(25);
    let threshold: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1000);

    let dir = tempfile::tempdir()?;
    let shared = dir.path().join("shared");
    let cfg = MsmConfig::new(sims, samples, threshold, 3).with_shared_data_dir(&shared);
    let d = build_msm_workflow(&cfg)?;
    let engine = EngineConfig::default()
        .with_executor(Arc::new(MockExecutor::with_kernels(kernels())))
        .with_run_dir(dir.path().join("run"));
    let summary = run_workflow(d.workflow, ResourceRequest::new(sims, 1), d.bindings, engine)?;

    let totals = msm_totals(&shared)?;
    println!(
        "{} iterations (expected {}), pooled samples per iteration {totals:?}",
        totals.len(),
        msm_expected_iterations(sims, samples, threshold)
    );
    let order: Vec<&str> = summary.workflow.pipelines[0].stages.iter().map(|s| s.uid.as_str()).collect();
    println!("stage order: {}", order.join(" "));
    Ok(())
}
