//! Post-execution hooks and the operators they apply.
//!
//! A hook is evaluated when a stage or pipeline completes. Its branch edits
//! an [`AdaptableView`], which stages [`Mutation`]s against the not-yet
//! executed tail of the pipeline and rejects anything else.

mod builtins;
mod mutation;
mod policy;
mod registry;
mod view;

pub use builtins::{
    builtin_add_stages, builtin_set_task_cores, builtin_shuffle_remaining_stages, compose_policies, trigger_rng,
    AddStages, BuiltinError, SetTaskCores, ShuffleRemaining,
};
pub use mutation::{apply_mutation, future_start, Mutation, MutationError, TaskUpdate};
pub use policy::{
    evaluate_post_exec, AdaptationError, AdaptationPolicy, AdaptationRecord, Branch, BranchTaken, Condition,
    Evaluation, PolicyBindings, SignalContext, TaskOutput, TriggerId, TriggerLevel,
};
pub use registry::{BranchSpec, ConditionSpec, PolicySpec, TaskTemplate};
pub use view::{stage_key, AdaptableView, UidRegistry};
