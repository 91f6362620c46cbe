//! First-fit placement on a simulated pilot: ten 2-second tasks on four
//! cores finish in three waves.
//!
//! cargo run --example scheduler [tasks] [cores]

use adaptive_ensemble::adapt::PolicyBindings;
use adaptive_ensemble::exec::{allocate_pool, schedule_ready_tasks, ResourceRequest};
use adaptive_ensemble::model::{Pipeline, Stage, TaskSpec, Workflow};
use adaptive_ensemble::orchestrator::{run_workflow, EngineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let tasks: u32 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10);
    let cores: u32 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(4);
    let specs: Vec<TaskSpec> = (0..tasks).map(|i| TaskSpec::new(format!("t{i}"), "sleep").with_duration(2.0)).collect();

    let req = ResourceRequest::new(1, cores);
    let mut pool = allocate_pool(&req)?;
    let first = schedule_ready_tasks(&specs, &mut pool)?;
    println!("first wave places {} of {tasks} tasks", first.assignments.len());

    let dir = tempfile::tempdir()?;
    let w = Workflow::new()
        .with_shared_data_dir(dir.path().join("shared"))
        .with_pipeline(Pipeline::new("p").with_stage(Stage::new("s").with_tasks(specs)));
    let s = run_workflow(w, req, PolicyBindings::new(), EngineConfig::default().with_run_dir(dir.path().join("run")))?;
    println!("makespan {:.2} s on {cores} cores", s.makespan_s);
    for l in &s.launches {
        println!("  {:<4} {:>6.2} .. {:>6.2} s", l.task_uid, l.t_start as f64 / 1e9, l.t_end as f64 / 1e9);
    }
    Ok(())
}
