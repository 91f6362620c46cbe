//! In-process message broker with named queues, acknowledgements and
//! redelivery.
//!
//! A message stays in the bus until it is acked. Messages handed to a
//! consumer that goes away without acking them (dropped, or crashed) are put
//! back at the front of their queue and delivered again with a higher
//! `delivery_count`.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const DEFAULT_HIGH_WATER_MARK: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub id: u64,
    pub queue: String,
    pub payload: String,
    pub delivery_count: u32,
}

impl Envelope {
    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, BusError> {
        serde_json::from_str(&self.payload).map_err(|e| BusError::Codec(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BusError {
    #[error("queue {0} is not declared")]
    UndeclaredQueue(String),
    #[error("queue {queue} is at its high-water mark ({limit} messages)")]
    Backpressure { queue: String, limit: usize },
    #[error("message {id} is unknown on queue {queue}")]
    UnknownMessage { queue: String, id: u64 },
    #[error("payload codec: {0}")]
    Codec(String),
}

#[derive(Debug)]
struct Stored {
    id: u64,
    payload: String,
    deliveries: u32,
}

#[derive(Debug, Default)]
struct Queue {
    next_id: u64,
    ready: VecDeque<Stored>,
    /// Delivered, not yet acked; keyed by id with the holding consumer.
    unacked: BTreeMap<u64, (u64, Stored)>,
}

impl Queue {
    fn len(&self) -> usize {
        self.ready.len() + self.unacked.len()
    }
}

#[derive(Debug)]
struct Inner {
    queues: Mutex<HashMap<String, Queue>>,
    available: Condvar,
    high_water: usize,
    next_consumer: AtomicU64,
}

/// Cheap to clone; all clones share the same queues.
#[derive(Debug, Clone)]
pub struct MessageBus {
    inner: Arc<Inner>,
}

impl Default for MessageBus {
    fn default() -> Self {
        Self::new()
    }
}

impl MessageBus {
    pub fn new() -> Self {
        Self::with_high_water_mark(DEFAULT_HIGH_WATER_MARK)
    }

    pub fn with_high_water_mark(limit: usize) -> Self {
        Self {
            inner: Arc::new(Inner {
                queues: Mutex::new(HashMap::new()),
                available: Condvar::new(),
                high_water: limit,
                next_consumer: AtomicU64::new(1),
            }),
        }
    }

    /// Idempotent.
    pub fn declare(&self, queue: &str) {
        self.inner.queues.lock().entry(queue.to_string()).or_insert_with(|| Queue {
            next_id: 1,
            ..Queue::default()
        });
    }

    pub fn is_declared(&self, queue: &str) -> bool {
        self.inner.queues.lock().contains_key(queue)
    }

    pub fn publish<T: Serialize + ?Sized>(&self, queue: &str, msg: &T) -> Result<u64, BusError> {
        let payload = serde_json::to_string(msg).map_err(|e| BusError::Codec(e.to_string()))?;
        self.publish_raw(queue, payload)
    }

    pub fn publish_raw(&self, queue: &str, payload: String) -> Result<u64, BusError> {
        let mut queues = self.inner.queues.lock();
        let q = queues
            .get_mut(queue)
            .ok_or_else(|| BusError::UndeclaredQueue(queue.to_string()))?;
        if q.len() >= self.inner.high_water {
            return Err(BusError::Backpressure {
                queue: queue.to_string(),
                limit: self.inner.high_water,
            });
        }
        let id = q.next_id;
        q.next_id += 1;
        q.ready.push_back(Stored {
            id,
            payload,
            deliveries: 0,
        });
        drop(queues);
        self.inner.available.notify_all();
        Ok(id)
    }

    pub fn consumer(&self, queue: &str) -> Result<Consumer, BusError> {
        if !self.is_declared(queue) {
            return Err(BusError::UndeclaredQueue(queue.to_string()));
        }
        Ok(Consumer {
            bus: self.clone(),
            queue: queue.to_string(),
            id: self.inner.next_consumer.fetch_add(1, Ordering::Relaxed),
        })
    }

    /// Messages not yet acked (waiting or delivered).
    pub fn depth(&self, queue: &str) -> usize {
        self.inner.queues.lock().get(queue).map_or(0, Queue::len)
    }

    pub fn unacked(&self, queue: &str) -> usize {
        self.inner.queues.lock().get(queue).map_or(0, |q| q.unacked.len())
    }

    fn requeue(&self, queue: &str, consumer: u64) {
        let mut queues = self.inner.queues.lock();
        let Some(q) = queues.get_mut(queue) else { return };
        let held: Vec<u64> = q
            .unacked
            .iter()
            .filter(|(_, (c, _))| *c == consumer)
            .map(|(id, _)| *id)
            .collect();
        if held.is_empty() {
            return;
        }
        // push in descending id order so the front ends up ascending
        for id in held.into_iter().rev() {
            let (_, stored) = q.unacked.remove(&id).expect("listed above");
            q.ready.push_front(stored);
        }
        drop(queues);
        self.inner.available.notify_all();
    }

    fn take(&self, queue: &str, consumer: u64, timeout: Option<Duration>) -> Result<Option<Envelope>, BusError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut queues = self.inner.queues.lock();
        loop {
            let q = queues
                .get_mut(queue)
                .ok_or_else(|| BusError::UndeclaredQueue(queue.to_string()))?;
            if let Some(mut stored) = q.ready.pop_front() {
                stored.deliveries += 1;
                let env = Envelope {
                    id: stored.id,
                    queue: queue.to_string(),
                    payload: stored.payload.clone(),
                    delivery_count: stored.deliveries,
                };
                q.unacked.insert(stored.id, (consumer, stored));
                return Ok(Some(env));
            }
            match deadline {
                None => return Ok(None),
                Some(d) => {
                    if self.inner.available.wait_until(&mut queues, d).timed_out() {
                        return Ok(None);
                    }
                }
            }
        }
    }

    fn ack(&self, queue: &str, id: u64) -> Result<(), BusError> {
        let mut queues = self.inner.queues.lock();
        let q = queues
            .get_mut(queue)
            .ok_or_else(|| BusError::UndeclaredQueue(queue.to_string()))?;
        if id == 0 || id >= q.next_id {
            return Err(BusError::UnknownMessage {
                queue: queue.to_string(),
                id,
            });
        }
        if q.unacked.remove(&id).is_none() {
            // already acked, or redelivered and waiting: acking settles it either way
            q.ready.retain(|s| s.id != id);
        }
        Ok(())
    }
}

/// A receiving endpoint on one queue. Dropping it returns every message it
/// holds unacked to the queue.
#[derive(Debug)]
pub struct Consumer {
    bus: MessageBus,
    queue: String,
    id: u64,
}

impl Consumer {
    pub fn queue(&self) -> &str {
        &self.queue
    }

    pub fn try_recv(&self) -> Result<Option<Envelope>, BusError> {
        self.bus.take(&self.queue, self.id, None)
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Envelope>, BusError> {
        self.bus.take(&self.queue, self.id, Some(timeout))
    }

    /// Acking twice is a no-op; acking an id never published is an error.
    pub fn ack(&self, id: u64) -> Result<(), BusError> {
        self.bus.ack(&self.queue, id)
    }

    /// Simulates a consumer crash: everything delivered but unacked becomes
    /// deliverable again.
    pub fn crash(self) {}
}

impl Drop for Consumer {
    fn drop(&mut self) {
        self.bus.requeue(&self.queue, self.id);
    }
}
