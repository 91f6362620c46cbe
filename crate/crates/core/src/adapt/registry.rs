//! Serializable descriptions of the builtin conditions and branches, so
//! workflow files can bind hooks by name.

use serde::{Deserialize, Serialize};

use super::builtins::{compose_policies, AddStages, BuiltinError, SetTaskCores, ShuffleRemaining};
use super::policy::{AdaptationPolicy, Branch, Condition};
use crate::clock::{mix_seed, stable_hash};
use crate::model::{NodeType, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConditionSpec {
    Always {},
    Never {},
    IterationsBelow { n: u64 },
}

impl ConditionSpec {
    pub fn build(&self) -> Condition {
        match self {
            Self::Always {} => Condition::always(),
            Self::Never {} => Condition::never(),
            Self::IterationsBelow { n } => Condition::iterations_below(*n),
        }
    }
}

/// Task fields an operator copies into every task it creates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskTemplate {
    #[serde(default = "default_executable")]
    pub executable: String,
    #[serde(default)]
    pub arguments: Vec<String>,
    #[serde(default = "one")]
    pub cores: u32,
    #[serde(default)]
    pub node_type: NodeType,
    #[serde(default = "one")]
    pub node_count: u32,
    #[serde(default)]
    pub duration: Option<f64>,
}

fn default_executable() -> String {
    "sleep".into()
}

fn one() -> u32 {
    1
}

impl Default for TaskTemplate {
    fn default() -> Self {
        Self {
            executable: default_executable(),
            arguments: Vec::new(),
            cores: 1,
            node_type: NodeType::SingleNode,
            node_count: 1,
            duration: None,
        }
    }
}

impl TaskTemplate {
    pub fn to_spec(&self) -> TaskSpec {
        TaskSpec {
            arguments: self.arguments.clone(),
            cores: self.cores,
            node_type: self.node_type,
            node_count: self.node_count,
            duration_hint: self.duration,
            ..TaskSpec::new("", self.executable.clone())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BranchSpec {
    Noop {},
    AddStages {
        #[serde(default = "one")]
        stages: u32,
        tasks: u32,
        #[serde(default)]
        template: TaskTemplate,
        /// Copy the triggering stage's hook onto the new stages.
        #[serde(default)]
        inherit_post_exec: bool,
        #[serde(default)]
        post_exec: Option<String>,
    },
    ShuffleRemaining {
        #[serde(default)]
        seed: Option<u64>,
    },
    SetTaskCores {
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default = "sixteen")]
        max_cores: u32,
    },
    /// Steps run last-to-first.
    Compose { steps: Vec<BranchSpec> },
}

fn sixteen() -> u32 {
    16
}

impl BranchSpec {
    /// `seed` is used by seeded operators that do not carry their own.
    pub fn build(&self, seed: u64) -> Result<Branch, BuiltinError> {
        Ok(match self {
            Self::Noop {} => Branch::noop(),
            Self::AddStages {
                stages,
                tasks,
                template,
                inherit_post_exec,
                post_exec,
            } => {
                let mut op = AddStages::new(*stages, *tasks, template.to_spec());
                op.inherit_post_exec = *inherit_post_exec;
                op.post_exec = post_exec.clone();
                op.build()?
            }
            Self::ShuffleRemaining { seed: s } => ShuffleRemaining::new(s.unwrap_or(seed)).build(),
            Self::SetTaskCores { seed: s, max_cores } => SetTaskCores::new(s.unwrap_or(seed), *max_cores).build()?,
            Self::Compose { steps } => compose_policies(
                steps
                    .iter()
                    .enumerate()
                    .map(|(i, s)| s.build(mix_seed(seed, i as u64)))
                    .collect::<Result<_, _>>()?,
            )?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub condition: ConditionSpec,
    pub on_true: BranchSpec,
    #[serde(default = "noop")]
    pub on_false: BranchSpec,
}

fn noop() -> BranchSpec {
    BranchSpec::Noop {}
}

impl PolicySpec {
    /// Builds the policy registered under `name`; seeded operators without an
    /// explicit seed derive one from the run seed and the name.
    pub fn build(&self, name: &str, run_seed: u64) -> Result<AdaptationPolicy, BuiltinError> {
        let seed = mix_seed(run_seed, stable_hash(name));
        Ok(AdaptationPolicy::new(
            self.condition.build(),
            self.on_true.build(seed)?,
            self.on_false.build(mix_seed(seed, 1))?,
        ))
    }
}
