use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::workflow::{NodeType, Workflow};

pub mod rule {
    pub const WORKFLOW_EMPTY: &str = "workflow.empty";
    pub const UID_EMPTY: &str = "uid.empty";
    pub const UID_INVALID: &str = "uid.invalid_char";
    pub const UID_DUPLICATE: &str = "uid.duplicate";
    pub const STAGE_EMPTY: &str = "stage.empty";
    pub const TASK_CORES: &str = "task.cores";
    pub const TASK_NODE_SHAPE: &str = "task.node_shape";
    pub const TASK_DURATION: &str = "task.duration";
    pub const PIPELINE_CURSOR: &str = "pipeline.cursor";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: String,
    pub uid: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.rule, self.uid, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_rule(&self, rule: &str) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }

    fn push(&mut self, rule: &str, uid: &str, message: impl Into<String>) {
        self.violations.push(Violation {
            rule: rule.to_string(),
            uid: uid.to_string(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Uids end up in paths (`p/s/t`), CSV cells and trigger ids.
pub fn uid_is_well_formed(uid: &str) -> bool {
    !uid.is_empty()
        && !uid
            .chars()
            .any(|c| c == '/' || c == ',' || c == '#' || c == '"' || c.is_whitespace())
}

fn check_uid(report: &mut ValidationReport, uid: &str, what: &str) {
    if uid.is_empty() {
        report.push(rule::UID_EMPTY, uid, format!("{what} uid is empty"));
    } else if !uid_is_well_formed(uid) {
        report.push(
            rule::UID_INVALID,
            uid,
            format!("{what} uid must not contain '/', ',', '#', quotes or whitespace"),
        );
    }
}

/// Checks every structural invariant of a workflow. Never fails; problems are
/// reported as violations.
pub fn validate_workflow(w: &Workflow) -> ValidationReport {
    let mut report = ValidationReport::default();
    if w.pipelines.is_empty() {
        report.push(rule::WORKFLOW_EMPTY, "", "workflow has no pipelines");
        return report;
    }

    let mut pipeline_uids = HashSet::new();
    let mut task_owners: BTreeMap<&str, Vec<&str>> = BTreeMap::new();

    for p in &w.pipelines {
        check_uid(&mut report, &p.uid, "pipeline");
        if !pipeline_uids.insert(p.uid.as_str()) {
            report.push(rule::UID_DUPLICATE, &p.uid, "pipeline uid appears more than once");
        }

        if p.cursor > p.stages.len() {
            report.push(
                rule::PIPELINE_CURSOR,
                &p.uid,
                format!("cursor {} beyond {} stages", p.cursor, p.stages.len()),
            );
        } else {
            if p.stages[..p.cursor].iter().any(|s| !s.state.is_terminal()) {
                report.push(rule::PIPELINE_CURSOR, &p.uid, "stage before cursor is not terminal");
            }
            if p.stages.iter().skip(p.cursor + 1).any(|s| !s.is_future()) {
                report.push(rule::PIPELINE_CURSOR, &p.uid, "stage after cursor is not pending");
            }
        }

        let mut stage_uids = HashSet::new();
        for s in &p.stages {
            check_uid(&mut report, &s.uid, "stage");
            if !stage_uids.insert(s.uid.as_str()) {
                report.push(
                    rule::UID_DUPLICATE,
                    &s.uid,
                    format!("stage uid repeated in pipeline {}", p.uid),
                );
            }
            if s.tasks.is_empty() {
                report.push(rule::STAGE_EMPTY, &s.uid, "stage has no tasks");
            }
            for t in &s.tasks {
                let spec = &t.spec;
                check_uid(&mut report, &spec.uid, "task");
                task_owners.entry(spec.uid.as_str()).or_default().push(p.uid.as_str());
                if spec.cores < 1 {
                    report.push(rule::TASK_CORES, &spec.uid, "cores must be at least 1");
                }
                let shape_ok = match spec.node_type {
                    NodeType::SingleNode => spec.node_count == 1,
                    NodeType::MultiNode => spec.node_count > 1,
                };
                if !shape_ok {
                    report.push(
                        rule::TASK_NODE_SHAPE,
                        &spec.uid,
                        format!(
                            "node_type {:?} is inconsistent with node_count {}",
                            spec.node_type, spec.node_count
                        ),
                    );
                }
                if let Some(d) = spec.duration_hint {
                    if !d.is_finite() || d < 0.0 {
                        report.push(rule::TASK_DURATION, &spec.uid, "duration_hint must be finite and >= 0");
                    }
                }
            }
        }
    }

    for (uid, owners) in task_owners {
        if owners.len() > 1 {
            report.push(
                rule::UID_DUPLICATE,
                uid,
                format!("task uid {uid} appears {} times (pipelines: {})", owners.len(), owners.join(", ")),
            );
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Pipeline, Stage, TaskSpec};

    fn single_stage(n: usize) -> Workflow {
        let stage = Stage::new("s0").with_tasks((0..n).map(|i| TaskSpec::new(format!("t{i}"), "sleep")));
        Workflow::new().with_pipeline(Pipeline::new("p0").with_stage(stage))
    }

    #[test]
    fn sixteen_single_core_tasks_are_valid() {
        assert!(validate_workflow(&single_stage(16)).is_empty());
    }

    #[test]
    fn empty_workflow_is_reported() {
        let r = validate_workflow(&Workflow::new());
        assert!(r.has_rule(rule::WORKFLOW_EMPTY));
    }

    #[test]
    fn duplicate_task_uid_across_pipelines() {
        let w = Workflow::new()
            .with_pipeline(Pipeline::new("a").with_stage(Stage::new("s").with_tasks([TaskSpec::new("t1", "x")])))
            .with_pipeline(Pipeline::new("b").with_stage(Stage::new("s").with_tasks([TaskSpec::new("t1", "x")])));
        let r = validate_workflow(&w);
        let dup: Vec<_> = r.violations.iter().filter(|v| v.rule == rule::UID_DUPLICATE).collect();
        assert_eq!(dup.len(), 1);
        assert_eq!(dup[0].uid, "t1");
    }

    #[test]
    fn node_shape_and_cores() {
        let mut bad = TaskSpec::new("t0", "x").with_cores(0);
        bad.node_count = 2;
        let w = Workflow::new().with_pipeline(Pipeline::new("p").with_stage(Stage::new("s").with_tasks([bad])));
        let r = validate_workflow(&w);
        assert!(r.has_rule(rule::TASK_CORES));
        assert!(r.has_rule(rule::TASK_NODE_SHAPE));

        let ok = TaskSpec::new("t1", "x").multi_node(2);
        let w = Workflow::new().with_pipeline(Pipeline::new("p").with_stage(Stage::new("s").with_tasks([ok])));
        assert!(validate_workflow(&w).is_empty());
    }

    #[test]
    fn bad_uid_characters() {
        let w = Workflow::new().with_pipeline(
            Pipeline::new("p/1").with_stage(Stage::new("s").with_tasks([TaskSpec::new("a b", "x")])),
        );
        let r = validate_workflow(&w);
        assert_eq!(r.violations.iter().filter(|v| v.rule == rule::UID_INVALID).count(), 2);
    }

    #[test]
    fn empty_stage() {
        let w = Workflow::new().with_pipeline(Pipeline::new("p").with_stage(Stage::new("s")));
        assert!(validate_workflow(&w).has_rule(rule::STAGE_EMPTY));
    }
}
