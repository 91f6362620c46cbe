use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::events::{EventKind, ProfileEvent};

pub const FLAG_ORDER: &str = "order_violation";
pub const FLAG_DUPLICATE: &str = "duplicate";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flag {
    pub entity_uid: String,
    pub event: EventKind,
    pub kind: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptationBreakdown {
    pub trigger_uid: String,
    pub adapt_ns: u64,
    pub sync_ns: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Hook evaluation plus synchronization, in seconds.
    pub adaptation_overhead: f64,
    pub task_execution_time: f64,
    pub adapt_time: f64,
    pub sync_time: f64,
    pub per_adaptation: Vec<AdaptationBreakdown>,
    pub tasks: usize,
    pub stages: usize,
    pub adaptations: usize,
    pub flags: Vec<Flag>,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn has_flag(&self, kind: &str) -> bool {
        self.flags.iter().any(|f| f.kind == kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Task,
    Stage,
    Adapt,
    Sync,
}

fn family(e: EventKind) -> (Family, bool) {
    use EventKind::*;
    match e {
        TaskSubmit => (Family::Task, true),
        TaskStart | TaskEnd => (Family::Task, false),
        StageStart => (Family::Stage, true),
        StageEnd => (Family::Stage, false),
        AdaptStart => (Family::Adapt, true),
        AdaptEnd => (Family::Adapt, false),
        SyncStart => (Family::Sync, true),
        SyncAck => (Family::Sync, false),
    }
}

#[derive(Default)]
struct Span {
    open: Option<u64>,
    total: u64,
}

const NS: f64 = 1e9;

/// Derives both headline metrics from an event list. Pure: the same events
/// always give the same report.
pub fn compute_metrics(events: &[ProfileEvent]) -> MetricsReport {
    let mut report = MetricsReport::default();
    // last event per (entity, family), used for lifecycle checks
    let mut last: BTreeMap<(&str, u8), (EventKind, u64)> = BTreeMap::new();
    let mut adapt: BTreeMap<&str, (Span, Span)> = BTreeMap::new();
    let mut adapt_order: Vec<&str> = Vec::new();
    let mut stage_spans: BTreeMap<&str, (Option<u64>, Option<u64>)> = BTreeMap::new();
    let mut tasks: BTreeMap<&str, ()> = BTreeMap::new();
    let mut stages: BTreeMap<&str, ()> = BTreeMap::new();

    for e in events {
        let (fam, _) = family(e.event);
        let key = (e.entity_uid.as_str(), fam as u8);
        let prev = last.get(&key).copied();
        let flag = |kind: &str| Flag {
            entity_uid: e.entity_uid.clone(),
            event: e.event,
            kind: kind.to_string(),
        };
        if let Some((_, t)) = prev {
            if e.t < t {
                report.flags.push(flag(FLAG_ORDER));
            }
        }
        let prev_kind = prev.map(|(k, _)| k);
        use EventKind::*;
        let problem = match e.event {
            TaskSubmit => matches!(prev_kind, Some(TaskSubmit | TaskStart)).then_some(FLAG_ORDER),
            TaskStart => (prev_kind != Some(TaskSubmit)).then_some(FLAG_ORDER),
            TaskEnd => match prev_kind {
                Some(TaskStart) => None,
                Some(TaskEnd) => Some(FLAG_DUPLICATE),
                _ => Some(FLAG_ORDER),
            },
            StageStart | AdaptStart | SyncStart => (prev_kind == Some(e.event)).then_some(FLAG_ORDER),
            StageEnd | AdaptEnd | SyncAck => match prev_kind {
                Some(k) if k == e.event => Some(FLAG_DUPLICATE),
                Some(_) => None,
                None => Some(FLAG_ORDER),
            },
        };
        if let Some(kind) = problem {
            report.flags.push(flag(kind));
        }
        last.insert(key, (e.event, e.t));

        match e.event {
            TaskSubmit | TaskStart | TaskEnd => {
                tasks.insert(&e.entity_uid, ());
                if problem.is_some() {
                    continue;
                }
                let Some((stage, _)) = e.entity_uid.rsplit_once('/') else {
                    continue;
                };
                let span = stage_spans.entry(stage).or_default();
                match e.event {
                    TaskStart => span.0 = Some(span.0.map_or(e.t, |t| t.min(e.t))),
                    TaskEnd => span.1 = Some(span.1.map_or(e.t, |t| t.max(e.t))),
                    _ => {}
                }
            }
            StageStart | StageEnd => {
                stages.insert(&e.entity_uid, ());
            }
            AdaptStart | AdaptEnd | SyncStart | SyncAck => {
                let entry = adapt.entry(&e.entity_uid).or_insert_with(|| {
                    adapt_order.push(&e.entity_uid);
                    Default::default()
                });
                let span = if matches!(e.event, AdaptStart | AdaptEnd) {
                    &mut entry.0
                } else {
                    &mut entry.1
                };
                match e.event {
                    AdaptStart | SyncStart => span.open = Some(e.t),
                    _ => {
                        if let Some(t0) = span.open.take() {
                            span.total += e.t.saturating_sub(t0);
                        }
                    }
                }
                if e.event == AdaptStart {
                    report.adaptations += 1;
                }
            }
        }
    }

    let mut exec_ns = 0u64;
    for (stage, (start, end)) in &stage_spans {
        match (start, end) {
            (Some(s), Some(e)) => exec_ns += e.saturating_sub(*s),
            _ => report.warnings.push(format!("stage {stage} has no complete task span")),
        }
    }
    let (mut adapt_ns, mut sync_ns) = (0u64, 0u64);
    for uid in adapt_order {
        let (a, s) = &adapt[uid];
        if a.open.is_some() || s.open.is_some() {
            report.warnings.push(format!("adaptation {uid} has an unmatched start event"));
        }
        adapt_ns += a.total;
        sync_ns += s.total;
        report.per_adaptation.push(AdaptationBreakdown {
            trigger_uid: uid.to_string(),
            adapt_ns: a.total,
            sync_ns: s.total,
        });
    }
    for ((uid, fam), (kind, _)) in &last {
        if *fam == Family::Task as u8 && *kind != EventKind::TaskEnd {
            report.warnings.push(format!("task {uid} has no TASK_END"));
        }
    }

    report.tasks = tasks.len();
    report.stages = stages.len().max(stage_spans.len());
    report.adapt_time = adapt_ns as f64 / NS;
    report.sync_time = sync_ns as f64 / NS;
    report.adaptation_overhead = (adapt_ns + sync_ns) as f64 / NS;
    report.task_execution_time = exec_ns as f64 / NS;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use EventKind::*;

    fn ev(uid: &str, event: EventKind, t: u64) -> ProfileEvent {
        ProfileEvent {
            entity_uid: uid.into(),
            event,
            t,
        }
    }

    #[test]
    fn start_before_submit_is_flagged() {
        let r = compute_metrics(&[ev("p/s/t", TaskStart, 5)]);
        assert!(r.has_flag(FLAG_ORDER));
    }

    #[test]
    fn duplicate_end_is_flagged() {
        let r = compute_metrics(&[
            ev("p/s/t", TaskSubmit, 1),
            ev("p/s/t", TaskStart, 2),
            ev("p/s/t", TaskEnd, 3),
            ev("p/s/t", TaskEnd, 4),
        ]);
        assert_eq!(r.flags.len(), 1);
        assert_eq!(r.flags[0].kind, FLAG_DUPLICATE);
    }

    #[test]
    fn retries_are_not_flagged() {
        let r = compute_metrics(&[
            ev("p/s/t", TaskSubmit, 1),
            ev("p/s/t", TaskStart, 2),
            ev("p/s/t", TaskEnd, 3),
            ev("p/s/t", TaskSubmit, 4),
            ev("p/s/t", TaskStart, 5),
            ev("p/s/t", TaskEnd, 9),
        ]);
        assert!(r.flags.is_empty());
        assert_eq!(r.task_execution_time, 7e-9);
    }

    #[test]
    fn hand_computed_sums() {
        // stage a: tasks span [100, 400] and [150, 350] -> 300
        // stage b: [1000, 1600] -> 600
        // adaptation x: adapt 50, sync 20 + 10 (one retry); y: adapt 5
        let events = vec![
            ev("p/a/t0", TaskSubmit, 90),
            ev("p/a/t0", TaskStart, 100),
            ev("p/a/t1", TaskSubmit, 95),
            ev("p/a/t1", TaskStart, 150),
            ev("p/a/t1", TaskEnd, 350),
            ev("p/a/t0", TaskEnd, 400),
            ev("p/a", AdaptStart, 410),
            ev("p/a", AdaptEnd, 460),
            ev("p/a", SyncStart, 470),
            ev("p/a", SyncAck, 490),
            ev("p/a", SyncStart, 500),
            ev("p/a", SyncAck, 510),
            ev("p/b/t0", TaskSubmit, 999),
            ev("p/b/t0", TaskStart, 1000),
            ev("p/b/t0", TaskEnd, 1600),
            ev("p@b", AdaptStart, 1610),
            ev("p@b", AdaptEnd, 1615),
        ];
        let r = compute_metrics(&events);
        assert!(r.flags.is_empty(), "{:?}", r.flags);
        assert_eq!(r.task_execution_time, 900e-9);
        assert_eq!(r.adaptation_overhead, 85e-9);
        assert_eq!(r.sync_time, 30e-9);
        assert_eq!(r.adaptations, 2);
        assert_eq!(r.tasks, 3);
        assert_eq!(r.per_adaptation[0].sync_ns, 30);
    }

    #[test]
    fn missing_end_gives_partial_report() {
        let r = compute_metrics(&[ev("p/s/t", TaskSubmit, 1), ev("p/s/t", TaskStart, 2)]);
        assert!(!r.warnings.is_empty());
        assert_eq!(r.task_execution_time, 0.0);
    }

    #[test]
    fn no_adaptation_means_zero_overhead() {
        let mut events = Vec::new();
        for i in 0..16 {
            let uid = format!("p/s0/t{i}");
            events.push(ev(&uid, TaskSubmit, 0));
            events.push(ev(&uid, TaskStart, 10));
            events.push(ev(&uid, TaskEnd, 2_000_000_010));
        }
        let r = compute_metrics(&events);
        assert_eq!(r.adaptation_overhead, 0.0);
        assert!((r.task_execution_time - 2.0).abs() < 1e-9);
    }
}
