//! Task graph `[V, E]` derived from a workflow.
//!
//! Vertices are tasks keyed by uid. An edge `(u, v)` means `v` depends on
//! `u`; edges connect every task of a stage to every task of the next stage
//! in the same pipeline and nothing else.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::validate::{validate_workflow, ValidationReport};
use super::workflow::{NodeType, Pipeline, Stage, TaskSpec, Workflow};

/// Task properties that take part in graph identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VertexProps {
    pub cores: u32,
    pub node_type: NodeType,
    pub node_count: u32,
    pub executable: String,
    pub arguments: Vec<String>,
}

impl From<&TaskSpec> for VertexProps {
    fn from(t: &TaskSpec) -> Self {
        Self {
            cores: t.cores,
            node_type: t.node_type,
            node_count: t.node_count,
            executable: t.executable.clone(),
            arguments: t.arguments.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskGraph {
    pub vertices: BTreeMap<String, VertexProps>,
    pub edges: BTreeSet<(String, String)>,
}

#[derive(Debug, thiserror::Error)]
#[error("workflow is invalid:\n{0}")]
pub struct InvalidWorkflow(pub ValidationReport);

impl TaskGraph {
    /// Graph of a single chain of stages.
    pub fn from_stages<'a, I>(stages: I) -> Self
    where
        I: IntoIterator<Item = &'a Stage>,
    {
        let mut g = TaskGraph::default();
        g.extend_chain(stages);
        g
    }

    pub fn from_pipeline(p: &Pipeline) -> Self {
        Self::from_stages(&p.stages)
    }

    fn extend_chain<'a, I>(&mut self, stages: I)
    where
        I: IntoIterator<Item = &'a Stage>,
    {
        let mut prev: Option<&Stage> = None;
        for stage in stages {
            for t in &stage.tasks {
                self.vertices.insert(t.spec.uid.clone(), VertexProps::from(&t.spec));
            }
            if let Some(p) = prev {
                for u in &p.tasks {
                    for v in &stage.tasks {
                        self.edges.insert((u.spec.uid.clone(), v.spec.uid.clone()));
                    }
                }
            }
            prev = Some(stage);
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Kahn's algorithm; also false if an edge references a missing vertex.
    pub fn is_acyclic(&self) -> bool {
        let mut indegree: HashMap<&str, usize> =
            self.vertices.keys().map(|k| (k.as_str(), 0)).collect();
        let mut out: HashMap<&str, Vec<&str>> = HashMap::new();
        for (u, v) in &self.edges {
            if !self.vertices.contains_key(u) || !self.vertices.contains_key(v) {
                return false;
            }
            *indegree.get_mut(v.as_str()).expect("checked") += 1;
            out.entry(u.as_str()).or_default().push(v.as_str());
        }
        let mut queue: VecDeque<&str> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(k, _)| *k)
            .collect();
        let mut seen = 0;
        while let Some(u) = queue.pop_front() {
            seen += 1;
            for v in out.get(u).into_iter().flatten() {
                let d = indegree.get_mut(v).expect("vertex");
                *d -= 1;
                if *d == 0 {
                    queue.push_back(v);
                }
            }
        }
        seen == self.vertices.len()
    }
}

/// Derives the task graph of a valid workflow.
pub fn to_task_graph(w: &Workflow) -> Result<TaskGraph, InvalidWorkflow> {
    let report = validate_workflow(w);
    if !report.is_empty() {
        return Err(InvalidWorkflow(report));
    }
    Ok(graph_unchecked(w))
}

/// Same derivation without the validation pass; used where the workflow is
/// already known to be valid (the store, the processor's local copy).
pub fn graph_unchecked(w: &Workflow) -> TaskGraph {
    let mut g = TaskGraph::default();
    for p in &w.pipelines {
        g.extend_chain(&p.stages);
    }
    g
}
