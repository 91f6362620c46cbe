//! Runs the adaptation-overhead experiments I, IV and V side by side with a
//! short kernel and prints mean overhead per adaptation count.
//!
//! cargo run --release --example overhead_experiments [kernel_seconds] [trials]

use adaptive_ensemble::profiler::{run_experiment, ExperimentId, ExperimentSpec, DEFAULT_SCALE};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let kernel: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.05);
    let trials: u32 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    for id in [ExperimentId::I, ExperimentId::IV, ExperimentId::V] {
        let spec = ExperimentSpec::new(id, DEFAULT_SCALE).with_kernel(kernel).with_trials(trials);
        let report = run_experiment(&spec)?;
        print!("{}", report.summary());
    }
    Ok(())
}
