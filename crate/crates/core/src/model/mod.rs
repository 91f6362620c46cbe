//! Workflow description types, their state machines, task-graph derivation
//! and the adaptation classifier.

mod classify;
mod graph;
mod state;
mod validate;
mod workflow;

pub use classify::{
    classify_adaptation, classify_with_notes, AdaptationType, AdaptationTypes, Classification,
    NOTE_UNCLASSIFIED, NOTE_VERTEX_ONLY,
};
pub use graph::{graph_unchecked, to_task_graph, InvalidWorkflow, TaskGraph, VertexProps};
pub use state::{
    check_transition_log, AnyState, EntityKind, EntityState, TaskState, TransitionEvent,
    TransitionViolation,
};
pub use validate::{rule, uid_is_well_formed, validate_workflow, ValidationReport, Violation};
pub use workflow::{entity_path, NodeType, Pipeline, Stage, Task, TaskSpec, Workflow};
