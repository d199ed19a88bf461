//! Single-server FIFO stand-in for the shared wireless medium.

use std::collections::VecDeque;

use crate::model::Packet;

use super::SimError;

pub const NANOS_PER_SEC: u64 = 1_000_000_000;

pub fn secs_to_ns(s: f64) -> u64 {
    (s * NANOS_PER_SEC as f64).round() as u64
}

pub fn ns_to_secs(ns: u64) -> f64 {
    ns as f64 / NANOS_PER_SEC as f64
}

/// Serialization time of `size_bytes` at `data_rate_bps`, in seconds.
pub fn transmission_delay(size_bytes: u64, data_rate_bps: u64) -> Result<f64, SimError> {
    if size_bytes == 0 || data_rate_bps == 0 {
        return Err(SimError::Config(super::ConfigError::Invalid {
            field: if size_bytes == 0 {
                "packet_size_bytes"
            } else {
                "data_rate_bps"
            },
            reason: "must be positive".into(),
        }));
    }
    Ok(size_bytes as f64 * 8.0 / data_rate_bps as f64)
}

/// Same as [`transmission_delay`], rounded to whole nanoseconds.
pub fn transmission_delay_ns(size_bytes: u64, data_rate_bps: u64) -> Result<u64, SimError> {
    transmission_delay(size_bytes, data_rate_bps)?;
    let bits = u128::from(size_bytes) * 8 * u128::from(NANOS_PER_SEC);
    let rate = u128::from(data_rate_bps);
    Ok(((bits + rate / 2) / rate) as u64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SendOutcome {
    Enqueued { depart_ns: u64 },
    DroppedQueueFull,
}

#[derive(Debug, Clone)]
pub struct Channel {
    /// `None` for the shared medium.
    pub network: Option<u32>,
    busy_until_ns: u64,
    capacity: usize,
    data_rate_bps: u64,
    queue: VecDeque<(Packet, u64)>,
}

impl Channel {
    pub fn new(network: Option<u32>, capacity: usize, data_rate_bps: u64) -> Self {
        Self {
            network,
            busy_until_ns: 0,
            capacity,
            data_rate_bps,
            queue: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn busy_until_ns(&self) -> u64 {
        self.busy_until_ns
    }

    /// depart = max(now, busy_until) + transmission time; drops when the
    /// channel already holds `capacity` packets.
    pub fn send(&mut self, pkt: Packet, now_ns: u64) -> Result<SendOutcome, SimError> {
        if self.queue.len() >= self.capacity {
            return Ok(SendOutcome::DroppedQueueFull);
        }
        let tx = transmission_delay_ns(u64::from(pkt.size_bytes), self.data_rate_bps)?;
        let depart_ns = now_ns.max(self.busy_until_ns) + tx;
        self.busy_until_ns = depart_ns;
        self.queue.push_back((pkt, depart_ns));
        Ok(SendOutcome::Enqueued { depart_ns })
    }

    /// Removes the packet whose transmission finishes at `now_ns`.
    pub fn complete(&mut self, now_ns: u64) -> Result<Packet, SimError> {
        match self.queue.pop_front() {
            Some((pkt, depart)) if depart == now_ns => Ok(pkt),
            Some((_, depart)) => Err(SimError::Internal(format!(
                "channel completion at {now_ns} ns but head departs at {depart} ns"
            ))),
            None => Err(SimError::Internal("completion on an empty channel".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MatchFields;

    fn pkt(size: u32) -> Packet {
        Packet {
            seq: 0,
            fields: MatchFields::new(None, "a", 1),
            size_bytes: size,
            created_at_ns: 0,
            sender: None,
            group: None,
        }
    }

    #[test]
    fn transmission_delays() {
        assert_eq!(transmission_delay(512, 1_000_000).unwrap(), 0.004096);
        assert_eq!(transmission_delay(256, 1_000_000).unwrap(), 0.002048);
        assert_eq!(transmission_delay_ns(512, 1_000_000).unwrap(), 4_096_000);
        assert!(transmission_delay(512, 0).is_err());
        assert!(transmission_delay(0, 1_000_000).is_err());
    }

    #[test]
    fn idle_channel_departs_after_one_transmission() {
        let mut ch = Channel::new(None, 4, 1_000_000);
        assert_eq!(
            ch.send(pkt(512), 1_000).unwrap(),
            SendOutcome::Enqueued { depart_ns: 1_000 + 4_096_000 }
        );
    }

    #[test]
    fn back_to_back_serializes() {
        let mut ch = Channel::new(None, 4, 1_000_000);
        let a = ch.send(pkt(512), 0).unwrap();
        let b = ch.send(pkt(512), 0).unwrap();
        match (a, b) {
            (SendOutcome::Enqueued { depart_ns: x }, SendOutcome::Enqueued { depart_ns: y }) => {
                assert_eq!(y - x, 4_096_000)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn full_queue_drops() {
        let mut ch = Channel::new(Some(0), 2, 1_000_000);
        ch.send(pkt(512), 0).unwrap();
        ch.send(pkt(512), 0).unwrap();
        assert_eq!(ch.send(pkt(512), 0).unwrap(), SendOutcome::DroppedQueueFull);
        ch.complete(4_096_000).unwrap();
        assert!(matches!(ch.send(pkt(512), 4_096_000).unwrap(), SendOutcome::Enqueued { .. }));
        assert!(ch.complete(1).is_err());
    }
}
