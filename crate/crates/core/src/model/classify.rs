//! Classifies the difference between two task graphs into the three
//! adaptation kinds. Each predicate is evaluated on its own, so a change can
//! fall into none, one, or (for composed operators applied step by step)
//! several kinds.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::graph::TaskGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AdaptationType {
    TaskCount,
    TaskOrder,
    TaskProperty,
}

impl fmt::Display for AdaptationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TaskCount => "TASK_COUNT",
            Self::TaskOrder => "TASK_ORDER",
            Self::TaskProperty => "TASK_PROPERTY",
        })
    }
}

pub type AdaptationTypes = BTreeSet<AdaptationType>;

pub const NOTE_VERTEX_ONLY: &str = "vertex-only change";
pub const NOTE_UNCLASSIFIED: &str = "unclassified change";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub types: AdaptationTypes,
    pub notes: Vec<String>,
}

/// Returns the adaptation kinds whose defining predicate holds for `before -> after`.
pub fn classify_adaptation(before: &TaskGraph, after: &TaskGraph) -> AdaptationTypes {
    classify_with_notes(before, after).types
}

pub fn classify_with_notes(before: &TaskGraph, after: &TaskGraph) -> Classification {
    let mut out = Classification::default();
    let v_size_eq = before.vertices.len() == after.vertices.len();
    let e_size_eq = before.edges.len() == after.edges.len();

    if !v_size_eq && !e_size_eq {
        out.types.insert(AdaptationType::TaskCount);
    }

    // Equal vertex maps imply equal uid sets; edge equality is evaluated at
    // most once and only when the vertex counts agree.
    let vertices_eq = v_size_eq && before.vertices == after.vertices;
    let mut edges_eq_cache: Option<bool> = None;
    let mut edges_eq = || *edges_eq_cache.get_or_insert_with(|| before.edges == after.edges);

    if vertices_eq && !edges_eq() {
        out.types.insert(AdaptationType::TaskOrder);
    }
    if !vertices_eq && v_size_eq {
        let uids_eq = before.vertices.keys().eq(after.vertices.keys());
        if uids_eq && edges_eq() {
            out.types.insert(AdaptationType::TaskProperty);
        }
    }

    if out.types.is_empty() {
        if !v_size_eq && e_size_eq {
            out.notes.push(NOTE_VERTEX_ONLY.to_string());
        } else if !(vertices_eq && edges_eq()) {
            out.notes.push(NOTE_UNCLASSIFIED.to_string());
        }
    }
    out
}
