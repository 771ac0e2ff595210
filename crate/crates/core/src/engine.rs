//! Deterministic discrete-event kernel.
//!
//! Events are ordered by `(fire_time, seq)` where `seq` is assigned at push
//! time, so simultaneous events fire in push order. The loop is strictly
//! sequential and never sleeps.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{InstanceId, RequestId, Seconds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Arrival(RequestId),
    /// A dispatched request reaches its instance after the scheduling delay.
    Deliver(RequestId, InstanceId),
    BatchComplete(InstanceId),
    ProvisionComplete(InstanceId),
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventKind::Arrival(r) => write!(f, "Arrival\trequest={r}"),
            EventKind::Deliver(r, i) => write!(f, "Deliver\trequest={r}\tinstance={i}"),
            EventKind::BatchComplete(i) => write!(f, "BatchComplete\tinstance={i}"),
            EventKind::ProvisionComplete(i) => write!(f, "ProvisionComplete\tinstance={i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub fire_time: Seconds,
    pub seq: u64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy)]
struct Queued(Event);

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .fire_time
            .total_cmp(&self.0.fire_time)
            .then(other.0.seq.cmp(&self.0.seq))
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("event at t={fire_time} scheduled before current time t={now}")]
    TimeTravel { fire_time: Seconds, now: Seconds },
    #[error("handler failed on {event:?}: {source}")]
    HandlerFailure {
        event: Event,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

/// Reacts to events popped by [`EventQueue::run_until`]. The queue is passed
/// back in so handlers can schedule follow-up events.
pub trait EventHandler {
    type Error: std::error::Error + Send + Sync + 'static;

    fn handle(&mut self, event: &Event, queue: &mut EventQueue) -> Result<(), Self::Error>;
}

#[derive(Debug, Clone, Default)]
pub struct EventQueue {
    now: Seconds,
    next_seq: u64,
    heap: BinaryHeap<Queued>,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Seconds {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn push(&mut self, fire_time: Seconds, kind: EventKind) -> Result<Event, EngineError> {
        if fire_time < self.now || fire_time.is_nan() {
            return Err(EngineError::TimeTravel {
                fire_time,
                now: self.now,
            });
        }
        let event = Event {
            fire_time,
            seq: self.next_seq,
            kind,
        };
        self.next_seq += 1;
        self.heap.push(Queued(event));
        Ok(event)
    }

    pub fn peek(&self) -> Option<&Event> {
        self.heap.peek().map(|q| &q.0)
    }

    /// Pops the next event and advances the clock to its fire time.
    pub fn pop(&mut self) -> Option<Event> {
        let Queued(event) = self.heap.pop()?;
        self.now = event.fire_time;
        Some(event)
    }

    /// Moves the clock forward to `t` without firing anything. Fails if `t`
    /// is in the past or an event is due before it.
    pub fn advance_to(&mut self, t: Seconds) -> Result<(), EngineError> {
        let due = self.peek().map(|e| e.fire_time).filter(|&f| f < t);
        if t < self.now || t.is_nan() || due.is_some() {
            return Err(EngineError::TimeTravel {
                fire_time: due.unwrap_or(t),
                now: self.now,
            });
        }
        self.now = t;
        Ok(())
    }

    /// Processes events in order until the queue is exhausted or the next
    /// event lies strictly beyond `deadline`. Returns the processed events.
    pub fn run_until<H: EventHandler>(
        &mut self,
        deadline: Option<Seconds>,
        handler: &mut H,
    ) -> Result<Vec<Event>, EngineError> {
        let mut log = Vec::new();
        self.run_with(deadline, handler, |e| log.push(*e))?;
        Ok(log)
    }

    /// Like [`run_until`](Self::run_until) but streams each processed event
    /// to `sink` instead of collecting them.
    pub fn run_with<H: EventHandler>(
        &mut self,
        deadline: Option<Seconds>,
        handler: &mut H,
        mut sink: impl FnMut(&Event),
    ) -> Result<(), EngineError> {
        while let Some(next) = self.peek() {
            if deadline.is_some_and(|d| next.fire_time > d) {
                break;
            }
            let event = self.pop().expect("peeked");
            handler
                .handle(&event, self)
                .map_err(|e| EngineError::HandlerFailure {
                    event,
                    source: Box::new(e),
                })?;
            sink(&event);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Error)]
    #[error("boom")]
    struct Boom;

    struct Recorder {
        chain: bool,
        fail_on: Option<u64>,
    }

    impl EventHandler for Recorder {
        type Error = Boom;

        fn handle(&mut self, event: &Event, queue: &mut EventQueue) -> Result<(), Boom> {
            if let EventKind::Arrival(RequestId(r)) = event.kind {
                if Some(r) == self.fail_on {
                    return Err(Boom);
                }
                if self.chain && r < 50 {
                    let next = event.fire_time + 0.25 * ((r % 3) as f64);
                    queue.push(next, EventKind::Arrival(RequestId(r + 10))).unwrap();
                }
            }
            Ok(())
        }
    }

    fn arrivals(times: &[f64]) -> EventQueue {
        let mut q = EventQueue::new();
        for (i, &t) in times.iter().enumerate() {
            q.push(t, EventKind::Arrival(RequestId(i as u64))).unwrap();
        }
        q
    }

    #[test]
    fn push_in_future_is_queued() {
        let mut q = arrivals(&[3.0]);
        q.pop();
        assert_eq!(q.now(), 3.0);
        q.push(5.0, EventKind::Arrival(RequestId(1))).unwrap();
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn push_in_past_is_rejected() {
        let mut q = arrivals(&[3.0]);
        q.pop();
        assert!(matches!(
            q.push(2.0, EventKind::Arrival(RequestId(1))),
            Err(EngineError::TimeTravel { .. })
        ));
    }

    #[test]
    fn advance_to_skips_only_idle_time() {
        let mut q = arrivals(&[3.0]);
        q.advance_to(2.0).unwrap();
        assert_eq!(q.now(), 2.0);
        assert!(q.advance_to(1.0).is_err());
        assert!(q.advance_to(4.0).is_err());
        q.advance_to(3.0).unwrap();
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn simultaneous_events_follow_push_order() {
        let mut q = EventQueue::new();
        q.push(5.0, EventKind::BatchComplete(InstanceId(9))).unwrap();
        q.push(5.0, EventKind::BatchComplete(InstanceId(1))).unwrap();
        assert_eq!(q.pop().unwrap().kind, EventKind::BatchComplete(InstanceId(9)));
        assert_eq!(q.pop().unwrap().kind, EventKind::BatchComplete(InstanceId(1)));
    }

    #[test]
    fn empty_queue_runs_to_empty_log() {
        let mut q = EventQueue::new();
        let mut h = Recorder { chain: false, fail_on: None };
        assert!(q.run_until(None, &mut h).unwrap().is_empty());
        assert_eq!(q.now(), 0.0);
    }

    #[test]
    fn deadline_stops_processing() {
        let mut q = arrivals(&[1.0, 2.0, 3.0]);
        let mut h = Recorder { chain: false, fail_on: None };
        let log = q.run_until(Some(2.5), &mut h).unwrap();
        let times: Vec<_> = log.iter().map(|e| e.fire_time).collect();
        assert_eq!(times, vec![1.0, 2.0]);
        assert_eq!(q.now(), 2.0);
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn handler_failure_carries_event() {
        let mut q = arrivals(&[1.0, 2.0]);
        let mut h = Recorder { chain: false, fail_on: Some(1) };
        match q.run_until(None, &mut h) {
            Err(EngineError::HandlerFailure { event, .. }) => {
                assert_eq!(event.kind, EventKind::Arrival(RequestId(1)))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn replays_are_identical_and_monotone() {
        let run = || {
            let mut q = arrivals(&[0.5, 0.5, 1.0, 0.0, 2.0]);
            let mut h = Recorder { chain: true, fail_on: None };
            q.run_until(None, &mut h).unwrap()
        };
        let a = run();
        let b = run();
        assert!(a.len() > 5);
        let render = |log: &[Event]| {
            log.iter()
                .map(|e| format!("{:?}\t{}\t{}\n", e.fire_time, e.seq, e.kind))
                .collect::<String>()
        };
        assert_eq!(render(&a).into_bytes(), render(&b).into_bytes());
        assert!(a.windows(2).all(|w| w[0].fire_time <= w[1].fire_time));
    }
}
