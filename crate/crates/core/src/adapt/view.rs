//! The handle a branch function uses to change a pipeline.
//!
//! Only stages after the triggering one are reachable, and every change is
//! staged as a [`Mutation`] against a private working copy. Nothing touches
//! the live workflow until the orchestrator commits the mutation list.

use std::collections::HashSet;
use std::sync::Arc;

use parking_lot::RwLock;

use super::mutation::{apply_mutation, future_start, Mutation, MutationError, TaskUpdate};
use crate::model::{classify_with_notes, AdaptationTypes, Pipeline, Stage, TaskGraph, TaskSpec};

/// Workflow-wide set of task uids and `pipeline/stage` keys, used to mint
/// fresh uids without scanning the whole workflow.
#[derive(Debug, Clone, Default)]
pub struct UidRegistry {
    inner: Arc<RwLock<HashSet<String>>>,
}

impl UidRegistry {
    pub fn from_workflow(w: &crate::model::Workflow) -> Self {
        let reg = Self::default();
        {
            let mut set = reg.inner.write();
            for p in &w.pipelines {
                for s in &p.stages {
                    set.insert(stage_key(&p.uid, &s.uid));
                    for t in &s.tasks {
                        set.insert(t.spec.uid.clone());
                    }
                }
            }
        }
        reg
    }

    pub fn contains(&self, key: &str) -> bool {
        self.inner.read().contains(key)
    }

    pub fn insert(&self, key: String) {
        self.inner.write().insert(key);
    }

    /// Records the uids introduced by committed mutations.
    pub fn register(&self, pipeline: &str, mutations: &[Mutation]) {
        let mut set = self.inner.write();
        for m in mutations {
            if let Mutation::AppendStage { stage } = m {
                set.insert(stage_key(pipeline, &stage.uid));
            }
            for uid in m.new_task_uids() {
                set.insert(uid.to_string());
            }
        }
    }
}

pub fn stage_key(pipeline: &str, stage: &str) -> String {
    format!("{pipeline}/{stage}")
}

pub struct AdaptableView {
    pipeline_uid: String,
    /// Triggering stage (read-only) followed by the future stages.
    work: Pipeline,
    trigger_post_exec: Option<String>,
    mutations: Vec<Mutation>,
    step_types: AdaptationTypes,
    step_notes: Vec<String>,
    reserved: HashSet<String>,
    registry: UidRegistry,
    guard_violation: Option<MutationError>,
}

impl AdaptableView {
    /// `anchor` is the stage whose completion fired the trigger (the last
    /// executed stage for pipeline-level triggers); `future` the stages after it.
    pub fn new(
        pipeline: &Pipeline,
        anchor: Option<&Stage>,
        future: &[Stage],
        trigger_post_exec: Option<String>,
        registry: UidRegistry,
    ) -> Self {
        let mut work = Pipeline::new(pipeline.uid.clone());
        work.next_stage_seq = pipeline.next_stage_seq;
        work.stages.extend(anchor.cloned());
        work.stages.extend(future.iter().cloned());
        Self {
            pipeline_uid: pipeline.uid.clone(),
            work,
            trigger_post_exec,
            mutations: Vec::new(),
            step_types: AdaptationTypes::new(),
            step_notes: Vec::new(),
            reserved: HashSet::new(),
            registry,
            guard_violation: None,
        }
    }

    /// Builds a view directly from a pipeline, anchoring at the last
    /// non-future stage.
    pub fn for_pipeline(pipeline: &Pipeline, registry: UidRegistry) -> Self {
        let start = future_start(pipeline);
        let anchor = start.checked_sub(1).map(|i| &pipeline.stages[i]);
        let post_exec = anchor.and_then(|s| s.post_exec.clone());
        Self::new(pipeline, anchor, &pipeline.stages[start..], post_exec, registry)
    }

    pub fn pipeline_uid(&self) -> &str {
        &self.pipeline_uid
    }

    pub fn future_stages(&self) -> &[Stage] {
        let start = future_start(&self.work);
        &self.work.stages[start..]
    }

    pub fn next_stage(&self) -> Option<&Stage> {
        self.future_stages().first()
    }

    /// Policy key attached to the triggering stage, for operators that
    /// propagate it to the stages they create.
    pub fn trigger_post_exec(&self) -> Option<&str> {
        self.trigger_post_exec.as_deref()
    }

    /// Graph of the triggering stage plus the future stages. Everything before
    /// is frozen, so comparing regions classifies the same as comparing the
    /// whole workflow graph.
    pub fn region_graph(&self) -> TaskGraph {
        TaskGraph::from_pipeline(&self.work)
    }

    pub fn mutations(&self) -> &[Mutation] {
        &self.mutations
    }

    fn uid_taken(&self, key: &str) -> bool {
        self.reserved.contains(key) || self.registry.contains(key)
    }

    pub fn fresh_stage_uid(&mut self) -> String {
        let mut seq = self.work.next_stage_seq;
        loop {
            let candidate = format!("{}.s{seq}", self.pipeline_uid);
            let key = stage_key(&self.pipeline_uid, &candidate);
            if !self.uid_taken(&key) && self.work.stage(&candidate).is_none() {
                self.reserved.insert(key);
                return candidate;
            }
            seq += 1;
        }
    }

    pub fn fresh_task_uid(&mut self, stage_uid: &str, index: usize) -> String {
        let base = format!("{stage_uid}.t{index}");
        let mut candidate = base.clone();
        let mut n = 1;
        while self.uid_taken(&candidate) {
            candidate = format!("{base}~{n}");
            n += 1;
        }
        self.reserved.insert(candidate.clone());
        candidate
    }

    fn stage(&mut self, m: Mutation) -> Result<(), MutationError> {
        match apply_mutation(&mut self.work, &m) {
            Ok(()) => {
                self.mutations.push(m);
                Ok(())
            }
            Err(e) => {
                if matches!(e, MutationError::Guard { .. }) && self.guard_violation.is_none() {
                    self.guard_violation = Some(e.clone());
                }
                Err(e)
            }
        }
    }

    fn check_fresh_tasks<'a>(&self, uids: impl IntoIterator<Item = &'a str>) -> Result<(), MutationError> {
        let mut seen = HashSet::new();
        for uid in uids {
            if !seen.insert(uid) {
                return Err(MutationError::Conflict(uid.to_string()));
            }
            if self.registry.contains(uid) {
                return Err(MutationError::Conflict(uid.to_string()));
            }
            if self.work.stages.iter().any(|s| s.task(uid).is_some()) {
                return Err(MutationError::Conflict(uid.to_string()));
            }
        }
        Ok(())
    }

    /// Rejects any uid that names an executed entity of this pipeline.
    fn guard_known(&mut self, uid: &str) -> MutationError {
        let e = if self.registry.contains(&stage_key(&self.pipeline_uid, uid)) || self.registry.contains(uid) {
            MutationError::Guard {
                uid: uid.to_string(),
                state: "not future".into(),
            }
        } else {
            MutationError::Unknown(uid.to_string())
        };
        if matches!(e, MutationError::Guard { .. }) && self.guard_violation.is_none() {
            self.guard_violation = Some(e.clone());
        }
        e
    }

    fn ensure_visible_stage(&mut self, stage_uid: &str) -> Result<(), MutationError> {
        if self.work.stage(stage_uid).is_none() {
            return Err(self.guard_known(stage_uid));
        }
        Ok(())
    }

    pub fn append_stage(&mut self, stage: Stage) -> Result<(), MutationError> {
        let key = stage_key(&self.pipeline_uid, &stage.uid);
        if self.registry.contains(&key) && !self.reserved.contains(&key) {
            return Err(MutationError::Conflict(stage.uid.clone()));
        }
        self.check_fresh_tasks(
            stage
                .tasks
                .iter()
                .map(|t| t.uid())
                .collect::<Vec<_>>()
                .into_iter()
                .filter(|u| !self.reserved.contains(*u)),
        )?;
        for t in &stage.tasks {
            self.reserved.insert(t.uid().to_string());
        }
        self.reserved.insert(key);
        self.stage(Mutation::AppendStage { stage })
    }

    pub fn remove_stage(&mut self, stage_uid: &str) -> Result<(), MutationError> {
        self.ensure_visible_stage(stage_uid)?;
        self.stage(Mutation::RemoveStage {
            stage: stage_uid.to_string(),
        })
    }

    pub fn add_task(&mut self, stage_uid: &str, task: TaskSpec) -> Result<(), MutationError> {
        self.ensure_visible_stage(stage_uid)?;
        if !self.reserved.contains(&task.uid) {
            self.check_fresh_tasks([task.uid.as_str()])?;
        }
        self.reserved.insert(task.uid.clone());
        self.stage(Mutation::AddTask {
            stage: stage_uid.to_string(),
            task,
        })
    }

    pub fn remove_task(&mut self, stage_uid: &str, task_uid: &str) -> Result<(), MutationError> {
        self.ensure_visible_stage(stage_uid)?;
        self.stage(Mutation::RemoveTask {
            stage: stage_uid.to_string(),
            task: task_uid.to_string(),
        })
    }

    /// Permutes the future stages; `perm[i]` is the old index of the stage
    /// that ends up at position `i`. The identity stages nothing.
    pub fn reorder_future(&mut self, perm: &[usize]) -> Result<(), MutationError> {
        let future = self.future_stages();
        let mut seen = vec![false; future.len()];
        if perm.len() != future.len() {
            return Err(MutationError::InvalidOrder(format!(
                "permutation of length {} for {} future stages",
                perm.len(),
                future.len()
            )));
        }
        for &i in perm {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(MutationError::InvalidOrder(format!("{perm:?} is not a permutation")));
            }
        }
        if perm.iter().enumerate().all(|(i, &j)| i == j) {
            return Ok(());
        }
        let order = perm.iter().map(|&i| future[i].uid.clone()).collect();
        self.stage(Mutation::ReorderStages { order })
    }

    /// Changes task properties; an update that changes nothing is not staged.
    pub fn update_task(&mut self, stage_uid: &str, task_uid: &str, update: TaskUpdate) -> Result<(), MutationError> {
        self.ensure_visible_stage(stage_uid)?;
        let current = self
            .work
            .stage(stage_uid)
            .and_then(|s| s.task(task_uid))
            .map(|t| t.spec.clone());
        let Some(mut spec) = current else {
            return Err(self.guard_known(task_uid));
        };
        if !update.apply(&mut spec) {
            // still run the guard so touching executed tasks is reported
            if !self.work.stage(stage_uid).map(Stage::is_future).unwrap_or(false) {
                return self.stage(Mutation::UpdateTask {
                    stage: stage_uid.to_string(),
                    task: task_uid.to_string(),
                    update,
                });
            }
            return Ok(());
        }
        self.stage(Mutation::UpdateTask {
            stage: stage_uid.to_string(),
            task: task_uid.to_string(),
            update,
        })
    }

    /// Records the classification of one step of a composed operator.
    pub fn record_step(&mut self, before: &TaskGraph) {
        let c = classify_with_notes(before, &self.region_graph());
        self.step_types.extend(c.types);
        self.step_notes.extend(c.notes);
    }

    pub(crate) fn take_guard_violation(&mut self) -> Option<MutationError> {
        self.guard_violation.take()
    }

    pub(crate) fn into_parts(self) -> (Vec<Mutation>, AdaptationTypes, Vec<String>) {
        (self.mutations, self.step_types, self.step_notes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EntityState, TaskState, Workflow};

    fn setup() -> (Pipeline, UidRegistry) {
        let mut p = Pipeline::new("p");
        for i in 0..3 {
            p.add_stage(Stage::new(format!("p.s{i}")).with_tasks([TaskSpec::new(format!("p.s{i}.t0"), "x")]));
        }
        p.stages[0].state = EntityState::Done;
        p.stages[0].tasks[0].state = TaskState::Done;
        let reg = UidRegistry::from_workflow(&Workflow::new().with_pipeline(p.clone()));
        (p, reg)
    }

    #[test]
    fn view_exposes_only_future() {
        let (p, reg) = setup();
        let v = AdaptableView::for_pipeline(&p, reg);
        let uids: Vec<_> = v.future_stages().iter().map(|s| s.uid.as_str()).collect();
        assert_eq!(uids, ["p.s1", "p.s2"]);
    }

    #[test]
    fn touching_executed_stage_is_a_guard_violation() {
        let (p, reg) = setup();
        let mut v = AdaptableView::for_pipeline(&p, reg);
        let err = v.update_task("p.s0", "p.s0.t0", TaskUpdate::cores(4)).unwrap_err();
        assert!(matches!(err, MutationError::Guard { .. }));
        assert!(v.take_guard_violation().is_some());
        assert!(v.mutations().is_empty());
    }

    #[test]
    fn fresh_uids_skip_existing() {
        let (p, reg) = setup();
        let mut v = AdaptableView::for_pipeline(&p, reg);
        let s = v.fresh_stage_uid();
        assert_eq!(s, "p.s3");
        let t = v.fresh_task_uid("p.s0", 0);
        assert_eq!(t, "p.s0.t0~1");
    }

    #[test]
    fn identity_reorder_stages_nothing() {
        let (p, reg) = setup();
        let mut v = AdaptableView::for_pipeline(&p, reg);
        v.reorder_future(&[0, 1]).unwrap();
        assert!(v.mutations().is_empty());
        v.reorder_future(&[1, 0]).unwrap();
        assert_eq!(v.mutations().len(), 1);
        assert!(v.reorder_future(&[0, 0]).is_err());
    }

    #[test]
    fn duplicate_task_uid_rejected_on_append() {
        let (p, reg) = setup();
        let mut v = AdaptableView::for_pipeline(&p, reg);
        let stage = Stage::new("new").with_tasks([TaskSpec::new("p.s1.t0", "x")]);
        assert_eq!(v.append_stage(stage), Err(MutationError::Conflict("p.s1.t0".into())));
    }
}
