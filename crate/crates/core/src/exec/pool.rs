//! Simulated pilot: a fixed block of nodes × cores acquired once and then
//! handed out to tasks without going back to a batch queue.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::model::{NodeType, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceRequest {
    pub nodes: u32,
    pub cores_per_node: u32,
    #[serde(default)]
    pub walltime_s: Option<f64>,
}

impl ResourceRequest {
    pub fn new(nodes: u32, cores_per_node: u32) -> Self {
        Self {
            nodes,
            cores_per_node,
            walltime_s: None,
        }
    }

    pub fn with_walltime(mut self, seconds: f64) -> Self {
        self.walltime_s = Some(seconds);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PoolState {
    Pending,
    Active,
    Released,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub node: usize,
    pub cores: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AllocationError {
    #[error("cannot allocate {nodes} nodes x {cores_per_node} cores")]
    Unsatisfiable { nodes: u32, cores_per_node: u32 },
    #[error("walltime must be positive and finite, got {0}")]
    Walltime(f64),
}

#[derive(Debug, Clone)]
pub struct ResourcePool {
    pub nodes: u32,
    pub cores_per_node: u32,
    pub walltime_limit: Option<Duration>,
    pub state: PoolState,
    free: Vec<u32>,
    allocated_at: Instant,
}

pub fn allocate_pool(req: &ResourceRequest) -> Result<ResourcePool, AllocationError> {
    if req.nodes == 0 || req.cores_per_node == 0 {
        return Err(AllocationError::Unsatisfiable {
            nodes: req.nodes,
            cores_per_node: req.cores_per_node,
        });
    }
    let walltime_limit = match req.walltime_s {
        Some(w) if !(w.is_finite() && w > 0.0) => return Err(AllocationError::Walltime(w)),
        w => w.map(Duration::from_secs_f64),
    };
    Ok(ResourcePool {
        nodes: req.nodes,
        cores_per_node: req.cores_per_node,
        walltime_limit,
        state: PoolState::Active,
        free: vec![req.cores_per_node; req.nodes as usize],
        allocated_at: Instant::now(),
    })
}

impl ResourcePool {
    pub fn capacity(&self) -> u32 {
        self.nodes * self.cores_per_node
    }

    pub fn free_cores(&self, node: usize) -> u32 {
        self.free[node]
    }

    pub fn total_free(&self) -> u32 {
        self.free.iter().sum()
    }

    /// Why `spec` can never be placed on this pool, if it cannot.
    pub fn never_fits(&self, spec: &TaskSpec) -> Option<String> {
        match spec.node_type {
            NodeType::SingleNode if spec.cores > self.cores_per_node => Some(format!(
                "single-node task needs {} cores, nodes have {}",
                spec.cores, self.cores_per_node
            )),
            NodeType::MultiNode if spec.node_count > self.nodes => Some(format!(
                "task needs {} nodes, pool has {}",
                spec.node_count, self.nodes
            )),
            _ => None,
        }
    }

    /// First-fit placement. Single-node tasks go on the lowest-numbered node
    /// with enough free cores; multi-node tasks take the lowest-numbered
    /// completely free nodes.
    pub fn try_place(&mut self, spec: &TaskSpec) -> Option<Vec<Placement>> {
        let placements = match spec.node_type {
            NodeType::SingleNode => {
                let node = self.free.iter().position(|&f| f >= spec.cores)?;
                vec![Placement {
                    node,
                    cores: spec.cores,
                }]
            }
            NodeType::MultiNode => {
                let nodes: Vec<usize> = self
                    .free
                    .iter()
                    .enumerate()
                    .filter(|(_, &f)| f == self.cores_per_node)
                    .map(|(i, _)| i)
                    .take(spec.node_count as usize)
                    .collect();
                if nodes.len() < spec.node_count as usize {
                    return None;
                }
                nodes
                    .into_iter()
                    .map(|node| Placement {
                        node,
                        cores: self.cores_per_node,
                    })
                    .collect()
            }
        };
        for p in &placements {
            self.free[p.node] -= p.cores;
        }
        Some(placements)
    }

    pub fn release(&mut self, placements: &[Placement]) {
        for p in placements {
            self.free[p.node] = (self.free[p.node] + p.cores).min(self.cores_per_node);
        }
    }

    /// Marks the pool failed once its walltime has run out.
    pub fn check_walltime(&mut self) -> bool {
        if let Some(limit) = self.walltime_limit {
            if self.state == PoolState::Active && self.allocated_at.elapsed() >= limit {
                self.state = PoolState::Failed;
            }
        }
        self.state == PoolState::Failed
    }

    pub fn release_all(&mut self) {
        self.free.iter_mut().for_each(|f| *f = self.cores_per_node);
        self.state = PoolState::Released;
    }
}
