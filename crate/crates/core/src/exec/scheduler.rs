use serde::{Deserialize, Serialize};

use super::pool::{Placement, PoolState, ResourcePool};
use crate::model::TaskSpec;

/// Where and when one attempt of a task ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAssignment {
    pub task_uid: String,
    pub attempt: u32,
    pub placements: Vec<Placement>,
    pub t_submit: u64,
    pub t_start: u64,
    pub t_end: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Schedule {
    pub assignments: Vec<(String, Vec<Placement>)>,
    pub deferred: Vec<String>,
    /// Tasks that cannot fit this pool even when it is empty.
    pub unschedulable: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("pool is {0:?}, not ACTIVE")]
pub struct PoolNotActive(pub PoolState);

/// Greedy first-fit over `ready` in the given order. A task that does not
/// fit now is deferred; later, smaller tasks may still be placed.
pub fn schedule_ready_tasks(ready: &[TaskSpec], pool: &mut ResourcePool) -> Result<Schedule, PoolNotActive> {
    if pool.state != PoolState::Active {
        return Err(PoolNotActive(pool.state));
    }
    let mut out = Schedule::default();
    for spec in ready {
        if let Some(reason) = pool.never_fits(spec) {
            out.unschedulable.push((spec.uid.clone(), reason));
        } else if let Some(p) = pool.try_place(spec) {
            out.assignments.push((spec.uid.clone(), p));
        } else {
            out.deferred.push(spec.uid.clone());
        }
    }
    Ok(out)
}

/// Largest per-node core usage seen at any instant across `assignments`
/// given `nodes` nodes; used to audit traces for oversubscription.
pub fn peak_node_usage(assignments: &[TaskAssignment], nodes: usize) -> Vec<u32> {
    // (time, +1 start / -1 end) sweep; ends sort before starts at equal times
    let mut edges: Vec<(u64, i8, &TaskAssignment)> = Vec::with_capacity(assignments.len() * 2);
    for a in assignments {
        edges.push((a.t_start, 1, a));
        edges.push((a.t_end, -1, a));
    }
    edges.sort_by_key(|(t, d, _)| (*t, *d));
    let mut used = vec![0i64; nodes];
    let mut peak = vec![0u32; nodes];
    for (_, d, a) in edges {
        for p in &a.placements {
            if p.node < nodes {
                used[p.node] += i64::from(d) * i64::from(p.cores);
                peak[p.node] = peak[p.node].max(used[p.node].max(0) as u32);
            }
        }
    }
    peak
}
