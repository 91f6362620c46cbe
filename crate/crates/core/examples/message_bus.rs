//! At-least-once delivery: a consumer that crashes before acking gets its
//! messages again, and applying state updates twice changes nothing.
//!
//! cargo run --example message_bus

use adaptive_ensemble::bus::MessageBus;
use adaptive_ensemble::model::{Pipeline, Stage, TaskSpec, TaskState};
use adaptive_ensemble::orchestrator::{apply_update, StateUpdate};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bus = MessageBus::new();
    bus.declare("updates");
    let path = [TaskState::Pending, TaskState::Ready, TaskState::Submitted, TaskState::Running, TaskState::Done];
    for step in path.windows(2) {
        bus.publish("updates", &StateUpdate::task("p", "s", "t", 1, step[0], step[1]))?;
    }

    let mut p = Pipeline::new("p").with_stage(Stage::new("s").with_tasks([TaskSpec::new("t", "sleep")]));
    let first = bus.consumer("updates")?;
    let env = first.try_recv()?.expect("published above");
    let applied = apply_update(&mut p, &env.decode()?)?;
    println!("applied {} step(s), then crashed before the ack", applied.steps.len());
    first.crash();

    let second = bus.consumer("updates")?;
    while let Some(env) = second.try_recv()? {
        let applied = apply_update(&mut p, &env.decode()?)?;
        println!("delivery {} of message {}: {} step(s) applied", env.delivery_count, env.id, applied.steps.len());
        second.ack(env.id)?;
    }
    println!("final state {}, queue depth {}", p.stages[0].tasks[0].state, bus.depth("updates"));
    Ok(())
}
