//! Three failure paths on one small ensemble: failed task attempts are
//! retried, a killed workflow processor is re-instantiated, and a crashed run
//! resumes from its checkpoint without relaunching finished stages.
//!
//! cargo run --example fault_recovery

use std::path::Path;
use std::sync::Arc;

use adaptive_ensemble::adapt::PolicyBindings;
use adaptive_ensemble::exec::{FaultInjectingExecutor, FaultPlan, MockExecutor, ResourceRequest};
use adaptive_ensemble::orchestrator::{resume_from_checkpoint, run_workflow, EngineConfig, EngineError, FaultInjection};
use adaptive_ensemble::model::{Pipeline, Stage, TaskSpec, Workflow};

fn ensemble(dir: &Path) -> Workflow {
    let mut w = Workflow::new().with_shared_data_dir(dir.join("shared"));
    for p in 0..2 {
        let mut pipe = Pipeline::new(format!("p{p}"));
        for s in 0..4 {
            pipe.add_stage(Stage::new(format!("s{s}")).with_tasks(
                (0..2).map(|t| TaskSpec::new(format!("p{p}.s{s}.t{t}"), "sleep").with_duration(0.01)),
            ));
        }
        w.pipelines.push(pipe);
    }
    w
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let pool = ResourceRequest::new(1, 4);
    let base = EngineConfig::default().with_run_dir(dir.path().join("run"));

    let flaky = FaultInjectingExecutor::new(Arc::new(MockExecutor::new()), FaultPlan::fail_first(1));
    let s = run_workflow(ensemble(dir.path()), pool, PolicyBindings::new(), base.clone().with_executor(Arc::new(flaky)))?;
    let attempts: Vec<u32> = s.workflow.tasks().map(|(_, _, t)| t.attempts).collect();
    println!("retry: all done = {}, attempts {attempts:?}", s.all_done());

    let kill = FaultInjection {
        kill_processor_after: Some(5),
        ..FaultInjection::default()
    };
    let s = run_workflow(ensemble(dir.path()), pool, PolicyBindings::new(), base.clone().with_faults(kill))?;
    println!("processor kill: recovered {:?}, all done = {}", s.recoveries, s.all_done());

    let ckpt = dir.path().join("checkpoint");
    let crash = FaultInjection {
        crash_after_stage: Some(4),
        ..FaultInjection::default()
    };
    let cfg = base.clone().with_checkpoint(&ckpt).with_faults(crash);
    match run_workflow(ensemble(dir.path()), pool, PolicyBindings::new(), cfg) {
        Err(EngineError::InjectedCrash { stages_done }) => println!("crash: stopped after {stages_done} stages"),
        other => return Err(format!("expected an injected crash, got {other:?}").into()),
    }
    let s = resume_from_checkpoint(&ckpt, pool, PolicyBindings::new(), base.with_checkpoint(&ckpt))?;
    let relaunched: Vec<&str> = s.launches.iter().map(|l| l.task_uid.as_str()).collect();
    println!("resume: all done = {}, launched {relaunched:?}", s.all_done());
    Ok(())
}
