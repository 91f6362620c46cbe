//! Entity state machines and the transition log used to audit them.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Lifecycle of a single task attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    Pending,
    Ready,
    Submitted,
    Running,
    Done,
    Failed,
    Canceled,
}

impl TaskState {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Done | Self::Failed | Self::Canceled)
    }

    pub fn can_transition(self, to: TaskState) -> bool {
        use TaskState::*;
        match (self, to) {
            (Pending, Ready) | (Ready, Submitted) | (Submitted, Running) | (Running, Done) => true,
            (Submitted, Failed) | (Running, Failed) => true,
            (from, Canceled) => !from.is_terminal(),
            _ => false,
        }
    }

    /// True while the entity has been handed to the runtime and must not be adapted.
    pub fn is_in_flight(self) -> bool {
        matches!(self, Self::Submitted | Self::Running)
    }
}

/// Lifecycle shared by stages and pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EntityState {
    Pending,
    Scheduled,
    Done,
    Failed,
}

impl EntityState {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Done | Self::Failed)
    }

    pub fn can_transition(self, to: EntityState) -> bool {
        use EntityState::*;
        matches!(
            (self, to),
            (Pending, Scheduled) | (Scheduled, Done) | (Scheduled, Failed) | (Pending, Failed)
        )
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        write!(f, "{}", s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

impl fmt::Display for EntityState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        write!(f, "{}", s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Task,
    Stage,
    Pipeline,
}

/// Either flavor of state, so one log can hold every entity kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnyState {
    Task(TaskState),
    Entity(EntityState),
}

/// One recorded state change. Task transitions are scoped by attempt: a
/// resubmitted task starts a fresh `Pending -> ...` machine under the next
/// attempt number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTransition")]
pub struct TransitionEvent {
    pub kind: EntityKind,
    pub uid: String,
    pub attempt: u32,
    pub from: AnyState,
    pub to: AnyState,
}

/// State names are shared between the two flavors, so `kind` decides how
/// `from` and `to` are read back.
#[derive(Deserialize)]
struct RawTransition {
    kind: EntityKind,
    uid: String,
    attempt: u32,
    from: String,
    to: String,
}

impl TryFrom<RawTransition> for TransitionEvent {
    type Error = serde::de::value::Error;

    fn try_from(r: RawTransition) -> Result<Self, Self::Error> {
        use serde::de::IntoDeserializer;
        let parse = |name: &str| -> Result<AnyState, Self::Error> {
            Ok(match r.kind {
                EntityKind::Task => AnyState::Task(TaskState::deserialize(name.into_deserializer())?),
                _ => AnyState::Entity(EntityState::deserialize(name.into_deserializer())?),
            })
        };
        Ok(Self {
            from: parse(&r.from)?,
            to: parse(&r.to)?,
            kind: r.kind,
            uid: r.uid,
            attempt: r.attempt,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionViolation {
    pub uid: String,
    pub attempt: u32,
    pub reason: String,
}

/// Checks that no entity skipped, reversed, or left a terminal state.
pub fn check_transition_log(events: &[TransitionEvent]) -> Vec<TransitionViolation> {
    let mut last: BTreeMap<(EntityKind, &str, u32), AnyState> = BTreeMap::new();
    let mut violations = Vec::new();
    for ev in events {
        let key = (ev.kind, ev.uid.as_str(), ev.attempt);
        let expected_from = last.get(&key).copied().unwrap_or(match ev.kind {
            EntityKind::Task => AnyState::Task(TaskState::Pending),
            _ => AnyState::Entity(EntityState::Pending),
        });
        if expected_from != ev.from {
            violations.push(TransitionViolation {
                uid: ev.uid.clone(),
                attempt: ev.attempt,
                reason: format!("recorded from {:?} but entity was {:?}", ev.from, expected_from),
            });
        }
        let legal = match (ev.from, ev.to) {
            (AnyState::Task(a), AnyState::Task(b)) => a.can_transition(b),
            (AnyState::Entity(a), AnyState::Entity(b)) => a.can_transition(b),
            _ => false,
        };
        if !legal {
            violations.push(TransitionViolation {
                uid: ev.uid.clone(),
                attempt: ev.attempt,
                reason: format!("illegal transition {:?} -> {:?}", ev.from, ev.to),
            });
        }
        last.insert(key, ev.to);
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task_ev(uid: &str, attempt: u32, from: TaskState, to: TaskState) -> TransitionEvent {
        TransitionEvent {
            kind: EntityKind::Task,
            uid: uid.into(),
            attempt,
            from: AnyState::Task(from),
            to: AnyState::Task(to),
        }
    }

    #[test]
    fn shared_state_names_roundtrip_by_kind() {
        let ev = TransitionEvent {
            kind: EntityKind::Stage,
            uid: "s0".into(),
            attempt: 0,
            from: AnyState::Entity(EntityState::Scheduled),
            to: AnyState::Entity(EntityState::Done),
        };
        let back: TransitionEvent = serde_json::from_str(&serde_json::to_string(&ev).unwrap()).unwrap();
        assert_eq!(back, ev);
        let t = task_ev("t", 1, TaskState::Pending, TaskState::Ready);
        assert_eq!(serde_json::from_str::<TransitionEvent>(&serde_json::to_string(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn declared_task_order() {
        use TaskState::*;
        assert!(Pending.can_transition(Ready));
        assert!(Running.can_transition(Failed));
        assert!(Submitted.can_transition(Failed));
        assert!(!Pending.can_transition(Running));
        assert!(!Done.can_transition(Running));
        assert!(!Done.can_transition(Canceled));
        assert!(Ready.can_transition(Canceled));
    }

    #[test]
    fn entity_order() {
        use EntityState::*;
        assert!(Pending.can_transition(Scheduled));
        assert!(!Done.can_transition(Scheduled));
        assert!(!Scheduled.can_transition(Pending));
    }

    #[test]
    fn log_checker_accepts_retry_as_new_attempt() {
        use TaskState::*;
        let log = vec![
            task_ev("t", 1, Pending, Ready),
            task_ev("t", 1, Ready, Submitted),
            task_ev("t", 1, Submitted, Running),
            task_ev("t", 1, Running, Failed),
            task_ev("t", 2, Pending, Ready),
            task_ev("t", 2, Ready, Submitted),
            task_ev("t", 2, Submitted, Running),
            task_ev("t", 2, Running, Done),
        ];
        assert!(check_transition_log(&log).is_empty());
    }

    #[test]
    fn log_checker_flags_skips_and_reversals() {
        use TaskState::*;
        let skip = vec![task_ev("t", 1, Pending, Running)];
        assert_eq!(check_transition_log(&skip).len(), 1);
        let reverse = vec![
            task_ev("t", 1, Pending, Ready),
            task_ev("t", 1, Ready, Pending),
        ];
        assert_eq!(check_transition_log(&reverse).len(), 1);
        let terminal = vec![
            task_ev("t", 1, Pending, Ready),
            task_ev("t", 1, Ready, Submitted),
            task_ev("t", 1, Submitted, Failed),
            task_ev("t", 1, Failed, Running),
        ];
        assert_eq!(check_transition_log(&terminal).len(), 1);
    }
}
