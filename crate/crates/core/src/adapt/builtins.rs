//! The three stock operators (task count, order, property) and composition.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mutation::TaskUpdate;
use super::policy::{Branch, SignalContext};
use crate::clock::{mix_seed, stable_hash};
use crate::model::{
    rule, validate_workflow, AdaptationType, AdaptationTypes, Pipeline, Stage, TaskSpec, ValidationReport, Workflow,
};

#[derive(Debug, thiserror::Error)]
pub enum BuiltinError {
    #[error("{0} must be at least {1}")]
    TooSmall(&'static str, u32),
    #[error("invalid task template:\n{0}")]
    Template(ValidationReport),
}

/// Generator seeded per trigger, so repeated firings differ while the whole
/// run stays reproducible.
pub fn trigger_rng(seed: u64, ctx: &SignalContext) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stable_hash(&ctx.trigger.to_string())))
}

#[derive(Debug, Clone)]
pub struct AddStages {
    pub n_stages: u32,
    pub tasks_per_stage: u32,
    pub template: TaskSpec,
    /// Explicit hook for the new stages; takes precedence over `inherit`.
    pub post_exec: Option<String>,
    /// Copy the triggering stage's hook onto the new stages.
    pub inherit_post_exec: bool,
}

impl AddStages {
    pub fn new(n_stages: u32, tasks_per_stage: u32, template: TaskSpec) -> Self {
        Self {
            n_stages,
            tasks_per_stage,
            template,
            post_exec: None,
            inherit_post_exec: false,
        }
    }

    pub fn with_post_exec(mut self, key: impl Into<String>) -> Self {
        self.post_exec = Some(key.into());
        self
    }

    pub fn inherit(mut self) -> Self {
        self.inherit_post_exec = true;
        self
    }

    pub fn build(self) -> Result<Branch, BuiltinError> {
        if self.n_stages < 1 {
            return Err(BuiltinError::TooSmall("n_stages", 1));
        }
        if self.tasks_per_stage < 1 {
            return Err(BuiltinError::TooSmall("tasks_per_stage", 1));
        }
        check_template(&self.template)?;
        let name = format!("add_stages({}x{})", self.n_stages, self.tasks_per_stage);
        Ok(Branch::new(name, [AdaptationType::TaskCount].into(), move |_, view| {
            let hook = self
                .post_exec
                .clone()
                .or_else(|| self.inherit_post_exec.then(|| view.trigger_post_exec().map(str::to_string)).flatten());
            for _ in 0..self.n_stages {
                let uid = view.fresh_stage_uid();
                let tasks: Vec<TaskSpec> = (0..self.tasks_per_stage as usize)
                    .map(|j| TaskSpec {
                        uid: view.fresh_task_uid(&uid, j),
                        ..self.template.clone()
                    })
                    .collect();
                let mut stage = Stage::new(uid).with_tasks(tasks);
                stage.post_exec = hook.clone();
                view.append_stage(stage)?;
            }
            Ok(())
        }))
    }
}

fn check_template(t: &TaskSpec) -> Result<(), BuiltinError> {
    let probe = TaskSpec {
        uid: "template".into(),
        ..t.clone()
    };
    let w = Workflow::new().with_pipeline(Pipeline::new("p").with_stage(Stage::new("s").with_tasks([probe])));
    let report = validate_workflow(&w);
    let relevant = ValidationReport {
        violations: report
            .violations
            .into_iter()
            .filter(|v| v.rule != rule::UID_DUPLICATE)
            .collect(),
    };
    if relevant.is_empty() {
        Ok(())
    } else {
        Err(BuiltinError::Template(relevant))
    }
}

/// Appends `n_stages` stages of `tasks_per_stage` copies of `template`.
/// Appends `n_stages` stages of `tasks_per_stage` copies of `template`.
pub fn builtin_add_stages(n_stages: u32, tasks_per_stage: u32, template: TaskSpec) -> Result<Branch, BuiltinError> {
    AddStages::new(n_stages, tasks_per_stage, template).build()
}

type Pin = std::sync::Arc<dyn Fn(&Stage) -> bool + Send + Sync>;

#[derive(Clone)]
pub struct ShuffleRemaining {
    pub seed: u64,
    /// Stages matching this stay where they are; the rest are permuted among
    /// the remaining slots.
    pin: Option<Pin>,
    /// Draw uniformly among non-identity permutations instead of all of them.
    pub avoid_identity: bool,
}

impl ShuffleRemaining {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            pin: None,
            avoid_identity: false,
        }
    }

    pub fn pinned(mut self, pin: impl Fn(&Stage) -> bool + Send + Sync + 'static) -> Self {
        self.pin = Some(std::sync::Arc::new(pin));
        self
    }

    pub fn avoid_identity(mut self) -> Self {
        self.avoid_identity = true;
        self
    }

    pub fn build(self) -> Branch {
        Branch::new(
            format!("shuffle_remaining({})", self.seed),
            [AdaptationType::TaskOrder].into(),
            move |ctx, view| {
                let future = view.future_stages();
                let slots: Vec<usize> = (0..future.len())
                    .filter(|&i| !self.pin.as_ref().is_some_and(|pin| pin(&future[i])))
                    .collect();
                if slots.len() < 2 {
                    return Ok(());
                }
                let mut rng = trigger_rng(self.seed, ctx);
                let mut drawn = slots.clone();
                drawn.shuffle(&mut rng);
                while self.avoid_identity && drawn == slots {
                    drawn.shuffle(&mut rng);
                }
                let mut perm: Vec<usize> = (0..future.len()).collect();
                for (slot, from) in slots.iter().zip(&drawn) {
                    perm[*slot] = *from;
                }
                view.reorder_future(&perm)?;
                Ok(())
            },
        )
    }
}

/// Uniformly shuffles every future stage.
pub fn builtin_shuffle_remaining_stages(seed: u64) -> Branch {
    ShuffleRemaining::new(seed).build()
}

#[derive(Debug, Clone)]
pub struct SetTaskCores {
    pub seed: u64,
    pub max_cores: u32,
    /// Redraw values equal to the current one, so every task changes.
    pub require_change: bool,
}

impl SetTaskCores {
    pub fn new(seed: u64, max_cores: u32) -> Self {
        Self {
            seed,
            max_cores,
            require_change: false,
        }
    }

    pub fn require_change(mut self) -> Self {
        self.require_change = true;
        self
    }

    pub fn build(self) -> Result<Branch, BuiltinError> {
        if self.max_cores < 2 {
            return Err(BuiltinError::TooSmall("max_cores", 2));
        }
        Ok(Branch::new(
            format!("set_task_cores({}, {})", self.seed, self.max_cores),
            [AdaptationType::TaskProperty].into(),
            move |ctx, view| {
                let Some(next) = view.next_stage() else {
                    return Ok(());
                };
                let stage_uid = next.uid.clone();
                let current: Vec<(String, u32)> =
                    next.tasks.iter().map(|t| (t.spec.uid.clone(), t.spec.cores)).collect();
                let mut rng = trigger_rng(self.seed, ctx);
                for (uid, cores) in current {
                    let mut drawn = rng.gen_range(1..self.max_cores);
                    // with max_cores == 2 the only value is 1; nothing else to draw
                    while self.require_change && drawn == cores && self.max_cores > 2 {
                        drawn = rng.gen_range(1..self.max_cores);
                    }
                    view.update_task(&stage_uid, &uid, TaskUpdate::cores(drawn))?;
                }
                Ok(())
            },
        ))
    }
}

/// Sets every task of the next stage to a core count drawn from `[1, max_cores - 1]`.
pub fn builtin_set_task_cores(seed: u64, max_cores: u32) -> Result<Branch, BuiltinError> {
    SetTaskCores::new(seed, max_cores).build()
}

/// `compose([f, g, h])` applies `h`, then `g`, then `f`. Each step is
/// classified on its own; any failing step discards everything staged.
pub fn compose_policies(ops: Vec<Branch>) -> Result<Branch, BuiltinError> {
    if ops.is_empty() {
        return Err(BuiltinError::TooSmall("composition length", 1));
    }
    let declared: AdaptationTypes = ops.iter().flat_map(|b| b.declared.iter().copied()).collect();
    let name = format!(
        "compose({})",
        ops.iter().map(|b| b.name.as_str()).collect::<Vec<_>>().join(", ")
    );
    Ok(Branch::new(name, declared, move |ctx, view| {
        for op in ops.iter().rev() {
            let before = view.region_graph();
            op.apply(ctx, view)?;
            view.record_step(&before);
        }
        Ok(())
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::policy::{evaluate_post_exec, AdaptationPolicy, Condition, TriggerId};
    use crate::adapt::view::{AdaptableView, UidRegistry};
    use crate::adapt::{apply_mutation, Mutation};
    use crate::clock::MonotonicClock;
    use crate::model::{to_task_graph, EntityState, NodeType, TaskState};
    use proptest::prelude::*;

    fn pipeline(sizes: &[usize], done: usize) -> Pipeline {
        let mut p = Pipeline::new("p");
        for (i, n) in sizes.iter().enumerate() {
            let uid = format!("p.s{i}");
            p.add_stage(Stage::new(&uid).with_tasks((0..*n).map(|j| TaskSpec::new(format!("{uid}.t{j}"), "x"))));
        }
        for s in &mut p.stages[..done] {
            s.state = EntityState::Done;
            for t in &mut s.tasks {
                t.state = TaskState::Done;
            }
        }
        p.cursor = done;
        p
    }

    fn run(p: &Pipeline, branch: Branch) -> (Pipeline, AdaptationTypes, Vec<Mutation>) {
        let reg = UidRegistry::from_workflow(&Workflow::new().with_pipeline(p.clone()));
        let anchor = p.stages[p.cursor - 1].uid.clone();
        let ctx = SignalContext::new(TriggerId::stage("p", anchor), 0, std::env::temp_dir());
        let ev = evaluate_post_exec(
            &AdaptationPolicy::when(Condition::always(), branch),
            &ctx,
            AdaptableView::for_pipeline(p, reg),
            &MonotonicClock::new(),
        )
        .unwrap();
        let mut after = p.clone();
        for m in &ev.mutations {
            apply_mutation(&mut after, m).unwrap();
        }
        (after, ev.record.classified_types, ev.mutations)
    }

    fn graph(p: &Pipeline) -> crate::model::TaskGraph {
        to_task_graph(&Workflow::new().with_pipeline(p.clone())).unwrap()
    }

    #[test]
    fn add_one_stage_of_16() {
        let p = pipeline(&[16], 1);
        let (after, types, _) = run(&p, builtin_add_stages(1, 16, TaskSpec::new("", "x")).unwrap());
        assert_eq!(after.stages.len(), 2);
        let (g0, g1) = (graph(&p), graph(&after));
        assert_eq!(g1.vertex_count() - g0.vertex_count(), 16);
        assert_eq!(g1.edge_count() - g0.edge_count(), 256);
        assert_eq!(types, [AdaptationType::TaskCount].into());
    }

    #[test]
    fn add_large_and_multi_node() {
        let p = pipeline(&[1], 1);
        let (after, ..) = run(&p, builtin_add_stages(1, 2048, TaskSpec::new("", "x")).unwrap());
        assert_eq!(after.stages[1].tasks.len(), 2048);
        let (after, ..) = run(&p, builtin_add_stages(1, 1, TaskSpec::new("", "x").multi_node(2)).unwrap());
        assert_eq!(after.stages[1].tasks[0].spec.node_count, 2);
        assert_eq!(after.stages[1].tasks[0].spec.node_type, NodeType::MultiNode);
    }

    #[test]
    fn add_three_stages_recount() {
        let p = pipeline(&[2, 2], 1);
        let (after, ..) = run(&p, builtin_add_stages(3, 4, TaskSpec::new("", "x")).unwrap());
        assert_eq!(graph(&after).vertex_count(), graph(&p).vertex_count() + 12);
    }

    #[test]
    fn bad_template_rejected() {
        assert!(builtin_add_stages(1, 1, TaskSpec::new("", "x").with_cores(0)).is_err());
        assert!(builtin_add_stages(0, 1, TaskSpec::new("", "x")).is_err());
        assert!(builtin_set_task_cores(1, 1).is_err());
        assert!(compose_policies(vec![]).is_err());
    }

    #[test]
    fn shuffle_single_future_is_noop() {
        let p = pipeline(&[1, 1], 1);
        let (after, types, muts) = run(&p, builtin_shuffle_remaining_stages(3));
        assert_eq!(after, p);
        assert!(types.is_empty() && muts.is_empty());
    }

    #[test]
    fn shuffle_is_deterministic() {
        let p = pipeline(&[1, 1, 2, 3, 4], 1);
        let (a, ..) = run(&p, builtin_shuffle_remaining_stages(11));
        let (b, ..) = run(&p, builtin_shuffle_remaining_stages(11));
        assert_eq!(a, b);
    }

    #[test]
    fn shuffle_four_future_classifies_order() {
        let p = pipeline(&[1, 1, 2, 3, 4], 1);
        let (after, types, _) = run(&p, ShuffleRemaining::new(5).avoid_identity().build());
        assert_ne!(after, p);
        assert_eq!(types, [AdaptationType::TaskOrder].into());
    }

    #[test]
    fn cores_below_max() {
        let p = pipeline(&[16, 16], 1);
        let (after, types, _) = run(&p, builtin_set_task_cores(42, 16).unwrap());
        assert!(after.stages[1].tasks.iter().all(|t| (1..=15).contains(&t.spec.cores)));
        assert!(after.stages[1].tasks.iter().all(|t| t.spec.node_type == NodeType::SingleNode));
        assert_eq!(types, [AdaptationType::TaskProperty].into());
    }

    #[test]
    fn cores_deterministic_for_seed() {
        let p = pipeline(&[1, 4], 1);
        let cores = |p: &Pipeline| p.stages[1].tasks.iter().map(|t| t.spec.cores).collect::<Vec<_>>();
        let (a, ..) = run(&p, builtin_set_task_cores(42, 16).unwrap());
        let (b, ..) = run(&p, builtin_set_task_cores(42, 16).unwrap());
        assert_eq!(cores(&a), cores(&b));
    }

    #[test]
    fn cores_already_equal_is_empty() {
        // only value in [1, 1] is 1, which every task already has
        let p = pipeline(&[1, 4], 1);
        let (after, types, muts) = run(&p, builtin_set_task_cores(0, 2).unwrap());
        assert_eq!(after, p);
        assert!(types.is_empty() && muts.is_empty());
    }

    #[test]
    fn composition_unions_step_types() {
        let p = pipeline(&[1], 1);
        let ee = compose_policies(vec![
            SetTaskCores::new(1, 16).require_change().build().unwrap(),
            ShuffleRemaining::new(2).avoid_identity().build(),
            builtin_add_stages(2, 1, TaskSpec::new("", "x")).unwrap(),
        ])
        .unwrap();
        let (_, types, _) = run(&p, ee);
        let all: AdaptationTypes = [AdaptationType::TaskCount, AdaptationType::TaskOrder, AdaptationType::TaskProperty].into();
        assert!(types.is_superset(&all), "{types:?}");

        let msm = compose_policies(vec![
            builtin_shuffle_remaining_stages(3),
            builtin_add_stages(1, 10, TaskSpec::new("", "x")).unwrap(),
        ])
        .unwrap();
        let (_, types, _) = run(&p, msm);
        assert!(types.contains(&AdaptationType::TaskCount));

        let (_, types, _) = run(&p, compose_policies(vec![Branch::noop()]).unwrap());
        assert!(types.is_empty());
    }

    #[test]
    fn failing_step_aborts_composition() {
        let p = pipeline(&[1, 1], 1);
        let reg = UidRegistry::from_workflow(&Workflow::new().with_pipeline(p.clone()));
        let ctx = SignalContext::new(TriggerId::stage("p", "p.s0"), 0, std::env::temp_dir());
        let failing = Branch::new("fail", Default::default(), |_, _| anyhow::bail!("nope"));
        let composed =
            compose_policies(vec![failing, builtin_add_stages(1, 1, TaskSpec::new("", "x")).unwrap()]).unwrap();
        let r = evaluate_post_exec(
            &AdaptationPolicy::when(Condition::always(), composed),
            &ctx,
            AdaptableView::for_pipeline(&p, reg),
            &MonotonicClock::new(),
        );
        assert!(r.is_err());
    }

    fn arb_pipeline() -> impl Strategy<Value = (Vec<usize>, usize)> {
        prop::collection::vec(1usize..=16, 3..=8).prop_flat_map(|sizes| {
            let n = sizes.len();
            (Just(sizes), 1..=n - 2)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn region_classification_matches_full_graph((sizes, done) in arb_pipeline(), seed in any::<u64>(), op in 0u8..3) {
            let p = pipeline(&sizes, done);
            let branch = match op {
                0 => builtin_add_stages(1, 1 + (seed % 16) as u32, TaskSpec::new("", "x")).unwrap(),
                1 => ShuffleRemaining::new(seed).avoid_identity().build(),
                _ => SetTaskCores::new(seed, 16).require_change().build().unwrap(),
            };
            let (after, types, _) = run(&p, branch.clone());
            let full = crate::model::classify_adaptation(&graph(&p), &graph(&after));
            prop_assert_eq!(&types, &full);
            prop_assert_eq!(&types, &branch.declared);
            prop_assert!(graph(&after).is_acyclic());
        }
    }
}
