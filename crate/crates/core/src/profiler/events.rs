use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::clock::MonotonicClock;

pub const CSV_HEADER: &str = "entity_uid,event,timestamp_ns";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    TaskSubmit,
    TaskStart,
    TaskEnd,
    StageStart,
    StageEnd,
    AdaptStart,
    AdaptEnd,
    SyncStart,
    SyncAck,
}

impl EventKind {
    pub const ALL: [EventKind; 9] = [
        Self::TaskSubmit,
        Self::TaskStart,
        Self::TaskEnd,
        Self::StageStart,
        Self::StageEnd,
        Self::AdaptStart,
        Self::AdaptEnd,
        Self::SyncStart,
        Self::SyncAck,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TaskSubmit => "TASK_SUBMIT",
            Self::TaskStart => "TASK_START",
            Self::TaskEnd => "TASK_END",
            Self::StageStart => "STAGE_START",
            Self::StageEnd => "STAGE_END",
            Self::AdaptStart => "ADAPT_START",
            Self::AdaptEnd => "ADAPT_END",
            Self::SyncStart => "SYNC_START",
            Self::SyncAck => "SYNC_ACK",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown event {s:?}"))
    }
}

/// `entity_uid` is a slash path: `p/s/t` for tasks, `p/s` for stages, and
/// the trigger id (`p/s` or `p@s`) for adaptation and sync events.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileEvent {
    pub entity_uid: String,
    pub event: EventKind,
    pub t: u64,
}

/// Thread-safe event sink shared by every component of a run.
#[derive(Debug, Clone)]
pub struct Recorder {
    clock: MonotonicClock,
    events: Arc<Mutex<Vec<ProfileEvent>>>,
}

impl Recorder {
    pub fn new(clock: MonotonicClock) -> Self {
        Self {
            clock,
            events: Arc::new(Mutex::new(Vec::with_capacity(1024))),
        }
    }

    pub fn clock(&self) -> &MonotonicClock {
        &self.clock
    }

    /// Stamps the event with the current time and returns the timestamp.
    pub fn record(&self, entity_uid: impl Into<String>, event: EventKind) -> u64 {
        let t = self.clock.now_ns();
        self.record_at(entity_uid, event, t);
        t
    }

    pub fn record_at(&self, entity_uid: impl Into<String>, event: EventKind, t: u64) {
        let e = ProfileEvent {
            entity_uid: entity_uid.into(),
            event,
            t,
        };
        self.events.lock().push(e);
    }

    pub fn len(&self) -> usize {
        self.events.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<ProfileEvent> {
        self.events.lock().clone()
    }
}

pub fn write_csv<W: Write>(mut w: W, events: &[ProfileEvent]) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for e in events {
        writeln!(w, "{},{},{}", e.entity_uid, e.event, e.t)?;
    }
    w.flush()
}

pub fn write_csv_file(path: &Path, events: &[ProfileEvent]) -> io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_csv(io::BufWriter::new(std::fs::File::create(path)?), events)
}

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub fn read_csv<R: BufRead>(r: R) -> Result<Vec<ProfileEvent>, CsvError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if n == 1 {
            if line.trim_end() != CSV_HEADER {
                return Err(CsvError::Parse {
                    line: n,
                    message: format!("expected header {CSV_HEADER:?}"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let err = |message: String| CsvError::Parse { line: n, message };
        let mut parts = line.rsplitn(3, ',');
        let (Some(t), Some(ev), Some(uid)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err("expected 3 fields".into()));
        };
        out.push(ProfileEvent {
            entity_uid: uid.to_string(),
            event: ev.parse().map_err(err)?,
            t: t.parse().map_err(|e| err(format!("timestamp: {e}")))?,
        });
    }
    Ok(out)
}

pub fn read_csv_file(path: &Path) -> Result<Vec<ProfileEvent>, CsvError> {
    read_csv(io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_preserves_rows() {
        let rec = Recorder::new(MonotonicClock::new());
        for i in 0..10_000 {
            rec.record(format!("p/s/t{i}"), EventKind::ALL[i % 9]);
        }
        let events = rec.snapshot();
        let mut buf = Vec::new();
        write_csv(&mut buf, &events).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 10_001);
        assert!(!text.contains('\r'));
        assert_eq!(read_csv(&buf[..]).unwrap(), events);
    }

    #[test]
    fn bad_header_rejected() {
        assert!(read_csv(&b"uid,event,t\n"[..]).is_err());
        assert!(read_csv(&b"entity_uid,event,timestamp_ns\np,NOPE,1\n"[..]).is_err());
    }

    #[test]
    fn concurrent_recording() {
        let rec = Recorder::new(MonotonicClock::new());
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let rec = rec.clone();
                std::thread::spawn(move || {
                    for j in 0..1000 {
                        rec.record(format!("p/s{i}/t{j}"), EventKind::TaskStart);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(rec.len(), 8000);
    }
}
