//! Applies each builtin operator to the unexecuted tail of a pipeline and
//! classifies the change, without running anything. `whole` compares the
//! graphs before and after; `steps` is what the engine records, which also
//! counts each step of a composed operator.
//!
//! cargo run --example adaptation_operators

use adaptive_ensemble::adapt::{
    apply_mutation, compose_policies, evaluate_post_exec, AdaptableView, AdaptationPolicy, AddStages, Branch,
    Condition, SetTaskCores, ShuffleRemaining, SignalContext, TriggerId, UidRegistry,
};
use adaptive_ensemble::clock::MonotonicClock;
use adaptive_ensemble::model::{classify_adaptation, EntityState, Pipeline, Stage, TaskGraph, TaskSpec, TaskState, Workflow};

fn pipeline() -> Pipeline {
    let mut p = Pipeline::new("p");
    for s in 0..4 {
        p.add_stage(Stage::new(format!("s{s}")).with_tasks((0..3).map(|t| TaskSpec::new(format!("s{s}.t{t}"), "sleep"))));
    }
    // s0 has run; s1..s3 can still change
    p.stages[0].state = EntityState::Done;
    for t in &mut p.stages[0].tasks {
        t.state = TaskState::Done;
    }
    p
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let p = pipeline();
    let ctx = SignalContext::new(TriggerId::stage("p", "s0"), 0, std::env::temp_dir());
    let ops: Vec<Branch> = vec![
        AddStages::new(1, 2, TaskSpec::new("x", "sleep")).build()?,
        ShuffleRemaining::new(3).avoid_identity().build(),
        SetTaskCores::new(3, 8).require_change().build()?,
        compose_policies(vec![
            SetTaskCores::new(4, 8).build()?,
            AddStages::new(1, 2, TaskSpec::new("x", "sleep")).build()?,
        ])?,
        Branch::noop(),
    ];
    let clock = MonotonicClock::new();
    for op in ops {
        let name = op.name.clone();
        let registry = UidRegistry::from_workflow(&Workflow::new().with_pipeline(p.clone()));
        let view = AdaptableView::for_pipeline(&p, registry);
        let ev = evaluate_post_exec(&AdaptationPolicy::when(Condition::always(), op), &ctx, view, &clock)?;
        let mut after = p.clone();
        for m in &ev.mutations {
            apply_mutation(&mut after, m)?;
        }
        let whole = classify_adaptation(&TaskGraph::from_pipeline(&p), &TaskGraph::from_pipeline(&after));
        let order: Vec<&str> = after.stages.iter().map(|s| s.uid.as_str()).collect();
        println!("{name}\n  whole {whole:?}, steps {:?}, stages {}", ev.record.classified_types, order.join(","));
    }
    Ok(())
}
