use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::sink::{Resolution, SinkId, SyncUpdate};

use super::SimError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    /// Sender emits its first packet and asks its sink for a context id.
    JoinStart { sender: usize },
    ResolutionRequest { sender: usize },
    ResolutionReply { sender: usize, resolution: Resolution },
    SinkSync { to: SinkId, update: SyncUpdate },
    Generate { sender: usize, k: u64 },
    ChannelTxDone { channel: usize },
    Deliver { record: usize },
    MobilityStep,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub time_ns: u64,
    pub seq: u64,
    pub kind: EventKind,
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time_ns, self.seq).cmp(&(other.time_ns, other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Min-heap on `(time, seq)`; `seq` is assigned at scheduling time.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<Event>>,
    next_seq: u64,
    now_ns: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now_ns(&self) -> u64 {
        self.now_ns
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, time_ns: u64, kind: EventKind) -> Result<(), SimError> {
        if time_ns < self.now_ns {
            return Err(SimError::Internal(format!(
                "event scheduled at {time_ns} ns, before the clock at {} ns",
                self.now_ns
            )));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Event { time_ns, seq, kind }));
        Ok(())
    }

    pub fn schedule_in(&mut self, delay_ns: u64, kind: EventKind) -> Result<(), SimError> {
        self.schedule(self.now_ns + delay_ns, kind)
    }

    /// Pops the earliest event and advances the clock to it.
    pub fn pop(&mut self) -> Option<Event> {
        let Reverse(ev) = self.heap.pop()?;
        debug_assert!(ev.time_ns >= self.now_ns);
        self.now_ns = ev.time_ns;
        Some(ev)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pops_in_time_then_seq_order() {
        let mut q = EventQueue::new();
        q.schedule(10, EventKind::MobilityStep).unwrap();
        q.schedule(5, EventKind::Deliver { record: 1 }).unwrap();
        q.schedule(5, EventKind::Deliver { record: 2 }).unwrap();
        let order: Vec<_> = std::iter::from_fn(|| q.pop()).map(|e| (e.time_ns, e.seq)).collect();
        assert_eq!(order, vec![(5, 1), (5, 2), (10, 0)]);
    }

    #[test]
    fn rejects_events_in_the_past() {
        let mut q = EventQueue::new();
        q.schedule(10, EventKind::MobilityStep).unwrap();
        q.pop();
        assert!(q.schedule(9, EventKind::MobilityStep).is_err());
        assert!(q.schedule_in(0, EventKind::MobilityStep).is_ok());
    }
}
