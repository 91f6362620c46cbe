use serde::{Deserialize, Serialize};

use crate::model::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnExhausted {
    #[default]
    Ignore,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    /// Resubmissions allowed after the first failed attempt.
    #[serde(default = "one")]
    pub max_retries: u32,
    #[serde(default)]
    pub on_exhausted: OnExhausted,
}

fn one() -> u32 {
    1
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 1,
            on_exhausted: OnExhausted::Ignore,
        }
    }
}

impl RetryPolicy {
    /// Fail the stage on the first failure.
    pub fn abort() -> Self {
        Self {
            max_retries: 0,
            on_exhausted: OnExhausted::Abort,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureAction {
    Resubmit,
    Ignore,
    AbortStage,
}

/// Decides what to do with a task whose latest attempt failed. Attempts lost
/// to a runtime failure do not use up the budget.
pub fn handle_task_failure(task: &Task, policy: &RetryPolicy) -> FailureAction {
    let failed = task.attempts.saturating_sub(task.lost);
    if failed <= policy.max_retries {
        FailureAction::Resubmit
    } else {
        match policy.on_exhausted {
            OnExhausted::Ignore => FailureAction::Ignore,
            OnExhausted::Abort => FailureAction::AbortStage,
        }
    }
}
