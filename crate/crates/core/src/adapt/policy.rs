use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use super::mutation::{Mutation, MutationError};
use super::view::AdaptableView;
use crate::clock::MonotonicClock;
use crate::model::{classify_with_notes, AdaptationTypes, Workflow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerLevel {
    Stage,
    Pipeline,
}

/// Identifies one firing of a hook. Stage-level triggers are `p/s`; the
/// pipeline-level trigger fired by final stage `s` is `p@s`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TriggerId {
    pub pipeline: String,
    pub stage: String,
    pub level: TriggerLevel,
}

impl TriggerId {
    pub fn stage(pipeline: impl Into<String>, stage: impl Into<String>) -> Self {
        Self {
            pipeline: pipeline.into(),
            stage: stage.into(),
            level: TriggerLevel::Stage,
        }
    }

    pub fn pipeline(pipeline: impl Into<String>, final_stage: impl Into<String>) -> Self {
        Self {
            pipeline: pipeline.into(),
            stage: final_stage.into(),
            level: TriggerLevel::Pipeline,
        }
    }

    /// Uid of the entity whose completion fired the hook.
    pub fn source_uid(&self) -> &str {
        match self.level {
            TriggerLevel::Stage => &self.stage,
            TriggerLevel::Pipeline => &self.pipeline,
        }
    }
}

impl fmt::Display for TriggerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.level {
            TriggerLevel::Stage => write!(f, "{}/{}", self.pipeline, self.stage),
            TriggerLevel::Pipeline => write!(f, "{}@{}", self.pipeline, self.stage),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskOutput {
    pub exit_code: i32,
    pub files: Vec<PathBuf>,
}

type SnapshotFn = Arc<dyn Fn() -> Workflow + Send + Sync>;

/// The signal passed to a hook. The workflow snapshot is taken on first
/// access only, so hooks that never look at it cost nothing.
#[derive(Clone)]
pub struct SignalContext {
    pub trigger: TriggerId,
    /// Hooks evaluated on this pipeline before this one.
    pub iteration: u64,
    pub completed_task_outputs: BTreeMap<String, TaskOutput>,
    pub shared_data_dir: PathBuf,
    snapshot: Arc<OnceLock<Arc<Workflow>>>,
    load: Option<SnapshotFn>,
}

impl SignalContext {
    pub fn new(trigger: TriggerId, iteration: u64, shared_data_dir: impl Into<PathBuf>) -> Self {
        Self {
            trigger,
            iteration,
            completed_task_outputs: BTreeMap::new(),
            shared_data_dir: shared_data_dir.into(),
            snapshot: Arc::new(OnceLock::new()),
            load: None,
        }
    }

    pub fn with_outputs(mut self, outputs: BTreeMap<String, TaskOutput>) -> Self {
        self.completed_task_outputs = outputs;
        self
    }

    pub fn with_snapshot(self, w: Workflow) -> Self {
        let _ = self.snapshot.set(Arc::new(w));
        self
    }

    pub fn with_snapshot_fn(mut self, f: impl Fn() -> Workflow + Send + Sync + 'static) -> Self {
        self.load = Some(Arc::new(f));
        self
    }

    pub fn source_uid(&self) -> &str {
        self.trigger.source_uid()
    }

    pub fn pipeline_uid(&self) -> &str {
        &self.trigger.pipeline
    }

    /// Read-only snapshot of the workflow as of the trigger.
    pub fn workflow(&self) -> Arc<Workflow> {
        self.snapshot
            .get_or_init(|| Arc::new(self.load.as_ref().map(|f| f()).unwrap_or_default()))
            .clone()
    }
}

impl fmt::Debug for SignalContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SignalContext")
            .field("trigger", &self.trigger)
            .field("iteration", &self.iteration)
            .field("outputs", &self.completed_task_outputs.len())
            .finish_non_exhaustive()
    }
}

pub type ConditionFn = dyn Fn(&SignalContext) -> anyhow::Result<bool> + Send + Sync;
pub type BranchFn = dyn Fn(&SignalContext, &mut AdaptableView) -> anyhow::Result<()> + Send + Sync;

#[derive(Clone)]
pub struct Condition {
    pub name: String,
    f: Arc<ConditionFn>,
}

impl Condition {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(&SignalContext) -> anyhow::Result<bool> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    pub fn always() -> Self {
        Self::new("always", |_| Ok(true))
    }

    pub fn never() -> Self {
        Self::new("never", |_| Ok(false))
    }

    /// True while fewer than `n` hooks have been evaluated on the pipeline.
    pub fn iterations_below(n: u64) -> Self {
        Self::new(format!("iterations_below({n})"), move |ctx| Ok(ctx.iteration < n))
    }

    pub fn eval(&self, ctx: &SignalContext) -> anyhow::Result<bool> {
        (self.f)(ctx)
    }
}

impl fmt::Debug for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Condition({})", self.name)
    }
}

/// A branch function plus the adaptation kind it is declared to perform.
#[derive(Clone)]
pub struct Branch {
    pub name: String,
    pub declared: AdaptationTypes,
    f: Arc<BranchFn>,
}

impl Branch {
    pub fn new(
        name: impl Into<String>,
        declared: AdaptationTypes,
        f: impl Fn(&SignalContext, &mut AdaptableView) -> anyhow::Result<()> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            declared,
            f: Arc::new(f),
        }
    }

    pub fn noop() -> Self {
        Self::new("noop", AdaptationTypes::new(), |_, _| Ok(()))
    }

    pub fn apply(&self, ctx: &SignalContext, view: &mut AdaptableView) -> anyhow::Result<()> {
        (self.f)(ctx, view)
    }
}

impl fmt::Debug for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Branch({})", self.name)
    }
}

#[derive(Debug, Clone)]
pub struct AdaptationPolicy {
    pub condition: Condition,
    pub on_true: Branch,
    pub on_false: Branch,
}

impl AdaptationPolicy {
    pub fn new(condition: Condition, on_true: Branch, on_false: Branch) -> Self {
        Self {
            condition,
            on_true,
            on_false,
        }
    }

    pub fn when(condition: Condition, on_true: Branch) -> Self {
        Self::new(condition, on_true, Branch::noop())
    }
}

/// Policies by the key stages and pipelines name in `post_exec`.
#[derive(Debug, Clone, Default)]
pub struct PolicyBindings {
    policies: BTreeMap<String, AdaptationPolicy>,
}

impl PolicyBindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, key: impl Into<String>, policy: AdaptationPolicy) -> Self {
        self.policies.insert(key.into(), policy);
        self
    }

    pub fn insert(&mut self, key: impl Into<String>, policy: AdaptationPolicy) {
        self.policies.insert(key.into(), policy);
    }

    pub fn get(&self, key: &str) -> Option<&AdaptationPolicy> {
        self.policies.get(key)
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.policies.keys().map(String::as_str)
    }

    pub fn extend(&mut self, other: PolicyBindings) {
        self.policies.extend(other.policies);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BranchTaken {
    True,
    False,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRecord {
    pub trigger_uid: String,
    pub pipeline_uid: String,
    pub branch_taken: BranchTaken,
    pub classified_types: AdaptationTypes,
    #[serde(default)]
    pub notes: Vec<String>,
    pub t_start: u64,
    pub t_end: u64,
    pub sync_duration: u64,
    pub mutation_count: usize,
    pub condition_calls: u32,
    pub branch_calls: u32,
    /// Store version the mutations were committed at; `None` when nothing
    /// needed committing.
    #[serde(default)]
    pub committed_version: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum AdaptationError {
    #[error("adaptation {trigger} touched a non-future entity: {source}")]
    MutationGuardViolation { trigger: String, source: MutationError },
    #[error("adaptation {trigger} failed: {message}")]
    AdaptationFailed { trigger: String, message: String },
}

impl AdaptationError {
    pub fn trigger(&self) -> &str {
        match self {
            Self::MutationGuardViolation { trigger, .. } | Self::AdaptationFailed { trigger, .. } => trigger,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub mutations: Vec<Mutation>,
    pub record: AdaptationRecord,
}

/// Runs the condition and exactly one branch against `view`.
///
/// The returned mutations have not been applied anywhere; the classification
/// is the union of every recorded step plus the overall before/after change.
pub fn evaluate_post_exec(
    policy: &AdaptationPolicy,
    ctx: &SignalContext,
    mut view: AdaptableView,
    clock: &MonotonicClock,
) -> Result<Evaluation, AdaptationError> {
    let trigger = ctx.trigger.to_string();
    let t_start = clock.now_ns();
    let before = view.region_graph();

    let fail = |message: String| AdaptationError::AdaptationFailed {
        trigger: trigger.clone(),
        message,
    };

    let taken = policy
        .condition
        .eval(ctx)
        .map_err(|e| fail(format!("condition {}: {e:#}", policy.condition.name)))?;
    let (branch, branch_taken) = if taken {
        (&policy.on_true, BranchTaken::True)
    } else {
        (&policy.on_false, BranchTaken::False)
    };
    let outcome = branch.apply(ctx, &mut view);

    if let Some(source) = view.take_guard_violation() {
        return Err(AdaptationError::MutationGuardViolation { trigger, source });
    }
    if let Err(e) = outcome {
        if let Some(source) = e.downcast_ref::<MutationError>() {
            if matches!(source, MutationError::Guard { .. }) {
                return Err(AdaptationError::MutationGuardViolation {
                    trigger,
                    source: source.clone(),
                });
            }
        }
        return Err(fail(format!("branch {}: {e:#}", branch.name)));
    }

    let total = if view.mutations().is_empty() {
        Default::default()
    } else {
        classify_with_notes(&before, &view.region_graph())
    };
    let pipeline_uid = view.pipeline_uid().to_string();
    let (mutations, mut types, mut notes) = view.into_parts();
    types.extend(total.types);
    if types.is_empty() {
        notes.extend(total.notes);
    } else {
        notes.clear();
    }
    notes.dedup();
    let t_end = clock.now_ns();

    Ok(Evaluation {
        record: AdaptationRecord {
            trigger_uid: trigger,
            pipeline_uid,
            branch_taken,
            classified_types: types,
            notes,
            t_start,
            t_end,
            sync_duration: 0,
            mutation_count: mutations.len(),
            condition_calls: 1,
            branch_calls: 1,
            committed_version: None,
        },
        mutations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::view::UidRegistry;
    use crate::adapt::TaskUpdate;
    use crate::model::{AdaptationType, EntityState, Pipeline, Stage, TaskSpec, TaskState};
    use std::sync::atomic::{AtomicU32, Ordering};

    fn one_done_stage() -> Pipeline {
        let mut p = Pipeline::new("p");
        p.add_stage(Stage::new("p.s0").with_tasks((0..16).map(|i| TaskSpec::new(format!("p.s0.t{i}"), "x"))));
        p.stages[0].state = EntityState::Done;
        for t in &mut p.stages[0].tasks {
            t.state = TaskState::Done;
        }
        p
    }

    fn ctx() -> SignalContext {
        SignalContext::new(TriggerId::stage("p", "p.s0"), 0, std::env::temp_dir())
    }

    fn view(p: &Pipeline) -> AdaptableView {
        let reg = UidRegistry::from_workflow(&Workflow::new().with_pipeline(p.clone()));
        AdaptableView::for_pipeline(p, reg)
    }

    fn append16() -> Branch {
        Branch::new("append16", [AdaptationType::TaskCount].into(), |_, v| {
            let uid = v.fresh_stage_uid();
            let tasks: Vec<_> = (0..16).map(|j| TaskSpec::new(v.fresh_task_uid(&uid, j), "x")).collect();
            v.append_stage(Stage::new(uid).with_tasks(tasks))?;
            Ok(())
        })
    }

    #[test]
    fn true_branch_appends_stage() {
        let p = one_done_stage();
        let policy = AdaptationPolicy::when(Condition::always(), append16());
        let ev = evaluate_post_exec(&policy, &ctx(), view(&p), &MonotonicClock::new()).unwrap();
        assert_eq!(ev.mutations.len(), 1);
        assert!(matches!(ev.mutations[0], Mutation::AppendStage { .. }));
        assert_eq!(ev.record.branch_taken, BranchTaken::True);
        assert_eq!(ev.record.classified_types, [AdaptationType::TaskCount].into());
        assert!(ev.record.t_end >= ev.record.t_start);
    }

    #[test]
    fn false_noop_is_empty() {
        let p = one_done_stage();
        let policy = AdaptationPolicy::when(Condition::never(), append16());
        let ev = evaluate_post_exec(&policy, &ctx(), view(&p), &MonotonicClock::new()).unwrap();
        assert!(ev.mutations.is_empty());
        assert_eq!(ev.record.branch_taken, BranchTaken::False);
        assert!(ev.record.classified_types.is_empty());
    }

    #[test]
    fn exactly_one_branch_runs() {
        let calls = Arc::new(AtomicU32::new(0));
        let (c1, c2, c3) = (calls.clone(), calls.clone(), calls.clone());
        let policy = AdaptationPolicy::new(
            Condition::new("count", move |_| {
                c1.fetch_add(1, Ordering::SeqCst);
                Ok(true)
            }),
            Branch::new("t", Default::default(), move |_, _| {
                c2.fetch_add(10, Ordering::SeqCst);
                Ok(())
            }),
            Branch::new("f", Default::default(), move |_, _| {
                c3.fetch_add(100, Ordering::SeqCst);
                Ok(())
            }),
        );
        let p = one_done_stage();
        evaluate_post_exec(&policy, &ctx(), view(&p), &MonotonicClock::new()).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 11);
    }

    #[test]
    fn swallowed_guard_violation_still_raises() {
        let p = one_done_stage();
        let policy = AdaptationPolicy::when(
            Condition::always(),
            Branch::new("sneaky", Default::default(), |_, v| {
                let _ = v.update_task("p.s0", "p.s0.t0", TaskUpdate::cores(2));
                Ok(())
            }),
        );
        let err = evaluate_post_exec(&policy, &ctx(), view(&p), &MonotonicClock::new()).unwrap_err();
        assert!(matches!(err, AdaptationError::MutationGuardViolation { .. }));
    }

    #[test]
    fn user_error_carries_trigger() {
        let p = one_done_stage();
        let policy = AdaptationPolicy::when(
            Condition::always(),
            Branch::new("boom", Default::default(), |_, _| anyhow::bail!("kernel exploded")),
        );
        let err = evaluate_post_exec(&policy, &ctx(), view(&p), &MonotonicClock::new()).unwrap_err();
        assert_eq!(err.trigger(), "p/p.s0");
        assert!(err.to_string().contains("kernel exploded"));
    }

    #[test]
    fn snapshot_loaded_lazily_once() {
        let loads = Arc::new(AtomicU32::new(0));
        let l = loads.clone();
        let ctx = ctx().with_snapshot_fn(move || {
            l.fetch_add(1, Ordering::SeqCst);
            Workflow::new()
        });
        assert_eq!(loads.load(Ordering::SeqCst), 0);
        ctx.workflow();
        ctx.clone().workflow();
        assert_eq!(loads.load(Ordering::SeqCst), 1);
    }
}
