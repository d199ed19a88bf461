//! Physically distributed, logically synchronized sinks.
//!
//! Each [`SinkState`] answers resolutions locally when it can. On a local
//! miss the CHORD ring names the responsible sink, which either knows the
//! context id or mints a new one. Every local change is queued as a
//! [`SyncUpdate`] and broadcast to the other sinks.
//!
//! Two sinks can mint different ids for one key (for example while
//! partitioned). Replicas resolve that by keeping the lower id and aliasing
//! the higher one onto it everywhere it appears, so the final state does
//! not depend on delivery order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::{self, Write as _};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chord::{self, ChordError, ChordRing, ContextDirectory, ContextLookup};
use crate::model::{ContextId, ContextKey, FlowId, GroupTable, NetworkId, SensorId};

/// Bits reserved for the per-sink counter in minted ids.
const LOCAL_ID_BITS: u32 = 40;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct SinkId {
    pub index: u32,
    pub network: NetworkId,
}

impl SinkId {
    pub fn new(index: u32, network: NetworkId) -> Self {
        Self { index, network }
    }

    /// index (u32 LE) followed by network (u32 LE); hashed onto the ring.
    pub fn canonical_bytes(&self) -> [u8; 8] {
        let mut out = [0u8; 8];
        out[..4].copy_from_slice(&self.index.to_le_bytes());
        out[4..].copy_from_slice(&self.network.0.to_le_bytes());
        out
    }
}

impl fmt::Display for SinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.index)
    }
}

/// Index of the sink that minted `id`.
pub fn minting_sink(id: ContextId) -> Option<u32> {
    let hi = id.0 >> LOCAL_ID_BITS;
    (hi > 0).then(|| (hi - 1) as u32)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SinkError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("sink {0} is unreachable")]
    Unreachable(SinkId),
    #[error("resolution failed: {0}")]
    ResolutionFailed(String),
    #[error("unknown sink {0}")]
    UnknownSink(SinkId),
    #[error(transparent)]
    Ring(#[from] ChordError),
}

impl SinkError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, SinkError::Unreachable(_) | SinkError::ResolutionFailed(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SyncKind {
    NewContext {
        key: ContextKey,
        context_id: ContextId,
    },
    /// Carries the key so a replica can register the context even if the
    /// minting sink's announcement has not arrived yet.
    NewMember {
        key: ContextKey,
        context_id: ContextId,
        sensor_id: SensorId,
        flow_id: FlowId,
    },
    Publish {
        context_id: ContextId,
    },
    Subscribe {
        context_id: ContextId,
        sensor_id: SensorId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyncUpdate {
    pub origin: SinkId,
    pub seq: u64,
    pub kind: SyncKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyOutcome {
    Applied,
    Duplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubscribeOutcome {
    Subscribed,
    UnknownContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Resolution {
    pub context_id: ContextId,
    pub sensor_id: SensorId,
    pub newly_defined: bool,
    pub overlay_hops: u32,
    /// Sink that answered: the contact sink on a local hit, otherwise the
    /// CHORD-responsible sink.
    pub answered_by: SinkId,
}

/// Replica state held by one physical sink.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SinkState {
    id: SinkId,
    registry: BTreeMap<ContextKey, ContextId>,
    aliases: BTreeMap<ContextId, ContextId>,
    context_flow_table: BTreeMap<(SensorId, FlowId), ContextId>,
    subscriptions: BTreeSet<(ContextId, SensorId)>,
    group_table: GroupTable,
    published: BTreeSet<ContextId>,
    pending_notifications: VecDeque<SyncUpdate>,
    seen: BTreeSet<(SinkId, u64)>,
    next_seq: u64,
    next_context: u64,
    next_sensor: u64,
    reachable: bool,
}

impl SinkState {
    pub fn new(id: SinkId) -> Self {
        Self {
            id,
            registry: BTreeMap::new(),
            aliases: BTreeMap::new(),
            context_flow_table: BTreeMap::new(),
            subscriptions: BTreeSet::new(),
            group_table: GroupTable::default(),
            published: BTreeSet::new(),
            pending_notifications: VecDeque::new(),
            seen: BTreeSet::new(),
            next_seq: 0,
            next_context: 0,
            next_sensor: 0,
            reachable: true,
        }
    }

    pub fn id(&self) -> SinkId {
        self.id
    }

    pub fn registry(&self) -> &BTreeMap<ContextKey, ContextId> {
        &self.registry
    }

    pub fn group_table(&self) -> &GroupTable {
        &self.group_table
    }

    pub fn published(&self) -> &BTreeSet<ContextId> {
        &self.published
    }

    pub fn context_flow_table(&self) -> impl Iterator<Item = crate::model::ContextFlowTableEntry> + '_ {
        self.context_flow_table
            .iter()
            .map(|(&(sensor_id, flow_id), &context_id)| crate::model::ContextFlowTableEntry {
                sensor_id,
                flow_id,
                context_id,
            })
    }

    pub fn pending(&self) -> usize {
        self.pending_notifications.len()
    }

    /// Follows the alias chain left by race resolution.
    pub fn canonical(&self, id: ContextId) -> ContextId {
        self.aliases.get(&id).copied().unwrap_or(id)
    }

    pub fn local_context(&self, key: &ContextKey) -> Option<ContextId> {
        self.registry.get(key).map(|&id| self.canonical(id))
    }

    fn knows_context(&self, id: ContextId) -> bool {
        let id = self.canonical(id);
        self.registry.values().any(|&v| v == id)
    }

    fn knows_sensor(&self, sensor: SensorId) -> bool {
        self.context_flow_table.keys().any(|&(s, _)| s == sensor)
            || self.subscriptions.iter().any(|&(_, s)| s == sensor)
    }

    fn prefix(&self) -> u64 {
        u64::from(self.id.index + 1) << LOCAL_ID_BITS
    }

    fn enqueue(&mut self, kind: SyncKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.seen.insert((self.id, seq));
        self.pending_notifications.push_back(SyncUpdate {
            origin: self.id,
            seq,
            kind,
        });
    }

    pub fn allocate_sensor_id(&mut self) -> SensorId {
        self.next_sensor += 1;
        SensorId(self.prefix() | self.next_sensor)
    }

    /// Mints a fresh id for `key` and publishes it. Normally only the
    /// CHORD-responsible sink does this; calling it on any other sink
    /// models a sink that could not reach the ring.
    pub fn define_context(&mut self, key: &ContextKey) -> ContextId {
        self.next_context += 1;
        let fresh = ContextId(self.prefix() | self.next_context);
        let id = self.register(key, fresh);
        self.enqueue(SyncKind::NewContext {
            key: key.clone(),
            context_id: fresh,
        });
        self.publish_local(id);
        id
    }

    /// Caches an answer obtained from another sink without re-announcing it.
    fn learn(&mut self, key: &ContextKey, id: ContextId) -> ContextId {
        self.register(key, id)
    }

    /// Records a binding; announces it if it was new.
    pub fn bind(
        &mut self,
        sensor: SensorId,
        flow: FlowId,
        key: &ContextKey,
        id: ContextId,
    ) -> bool {
        let id = self.register(key, id);
        if !self.bind_quiet(sensor, flow, id) {
            return false;
        }
        self.enqueue(SyncKind::NewMember {
            key: key.clone(),
            context_id: id,
            sensor_id: sensor,
            flow_id: flow,
        });
        true
    }

    fn bind_quiet(&mut self, sensor: SensorId, flow: FlowId, id: ContextId) -> bool {
        let id = self.canonical(id);
        let slot = self.context_flow_table.entry((sensor, flow)).or_insert(id);
        let changed = if *slot == id {
            false
        } else {
            *slot = (*slot).min(id);
            true
        };
        let bound = *slot;
        self.group_table.insert(bound, sensor) || changed
    }

    fn publish_local(&mut self, id: ContextId) -> bool {
        let id = self.canonical(id);
        if self.published.insert(id) {
            self.enqueue(SyncKind::Publish { context_id: id });
            true
        } else {
            false
        }
    }

    /// Publishes a known context id. Re-publishing is a no-op.
    pub fn publish_context(&mut self, id: ContextId) -> Result<bool, SinkError> {
        if !self.knows_context(id) {
            return Err(SinkError::InvalidRequest(format!(
                "context {id} is not registered at {}",
                self.id
            )));
        }
        Ok(self.publish_local(id))
    }

    fn register(&mut self, key: &ContextKey, id: ContextId) -> ContextId {
        let id = self.canonical(id);
        match self.registry.get(key).map(|&c| self.canonical(c)) {
            None => {
                self.registry.insert(key.clone(), id);
                id
            }
            Some(cur) if cur == id => id,
            Some(cur) => {
                let (winner, loser) = if cur < id { (cur, id) } else { (id, cur) };
                self.registry.insert(key.clone(), winner);
                self.alias(loser, winner);
                winner
            }
        }
    }

    fn alias(&mut self, loser: ContextId, winner: ContextId) {
        self.aliases.insert(loser, winner);
        for target in self.aliases.values_mut() {
            if *target == loser {
                *target = winner;
            }
        }
        for v in self.registry.values_mut() {
            if *v == loser {
                *v = winner;
            }
        }
        for v in self.context_flow_table.values_mut() {
            if *v == loser {
                *v = winner;
            }
        }
        self.subscriptions = std::mem::take(&mut self.subscriptions)
            .into_iter()
            .map(|(c, s)| (if c == loser { winner } else { c }, s))
            .collect();
        self.group_table.merge_into(loser, winner);
        if self.published.remove(&loser) {
            self.published.insert(winner);
        }
    }

    /// Applies a peer's update. Replays of an `(origin, seq)` pair, and the
    /// sink's own updates, are reported as duplicates and change nothing.
    pub fn apply_sync(&mut self, update: &SyncUpdate) -> ApplyOutcome {
        if update.origin == self.id || !self.seen.insert((update.origin, update.seq)) {
            return ApplyOutcome::Duplicate;
        }
        match &update.kind {
            SyncKind::NewContext { key, context_id } => {
                self.register(key, *context_id);
            }
            SyncKind::NewMember {
                key,
                context_id,
                sensor_id,
                flow_id,
            } => {
                let id = self.register(key, *context_id);
                self.bind_quiet(*sensor_id, *flow_id, id);
            }
            SyncKind::Publish { context_id } => {
                let id = self.canonical(*context_id);
                self.published.insert(id);
            }
            SyncKind::Subscribe {
                context_id,
                sensor_id,
            } => {
                let id = self.canonical(*context_id);
                self.subscriptions.insert((id, *sensor_id));
                self.group_table.insert(id, *sensor_id);
            }
        }
        ApplyOutcome::Applied
    }

    pub fn take_outbox(&mut self) -> Vec<SyncUpdate> {
        self.pending_notifications.drain(..).collect()
    }

    /// Sorted text form of everything that must agree across replicas at
    /// quiescence. Sink identity and counters are excluded.
    pub fn serialize_replicated(&self) -> String {
        let mut out = String::new();
        for (key, id) in &self.registry {
            let _ = writeln!(out, "registry {:?} {}", key.as_str(), id);
        }
        for (from, to) in &self.aliases {
            let _ = writeln!(out, "alias {from} {to}");
        }
        for (&(sensor, flow), id) in &self.context_flow_table {
            let _ = writeln!(out, "flow {sensor} {flow} {id}");
        }
        for (id, members) in self.group_table.iter() {
            let _ = write!(out, "group {id}");
            for m in members {
                let _ = write!(out, " {m}");
            }
            out.push('\n');
        }
        for (id, sensor) in &self.subscriptions {
            let _ = writeln!(out, "subscription {id} {sensor}");
        }
        for id in &self.published {
            let _ = writeln!(out, "published {id}");
        }
        out
    }

    pub fn dump(&self) -> String {
        format!(
            "[sink {} network {}]\n{}",
            self.id,
            self.id.network.0,
            self.serialize_replicated()
        )
    }

    /// Local structural invariants; returns a description of the first
    /// violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen_ids = BTreeMap::new();
        for (key, &id) in &self.registry {
            if let Some(other) = seen_ids.insert(id, key) {
                return Err(format!("{id} registered under {other:?} and {key:?}"));
            }
        }
        for (&(sensor, flow), &id) in &self.context_flow_table {
            if !seen_ids.contains_key(&id) {
                return Err(format!("flow {sensor}/{flow} bound to unregistered {id}"));
            }
            if !self.group_table.contains(id, sensor) {
                return Err(format!("{sensor} bound to {id} but missing from its group"));
            }
        }
        for (&id, members) in self.group_table.iter() {
            for &sensor in members {
                let bound = self
                    .context_flow_table
                    .iter()
                    .any(|(&(s, _), &c)| s == sensor && c == id);
                if !bound && !self.subscriptions.contains(&(id, sensor)) {
                    return Err(format!("{sensor} in group {id} without binding"));
                }
            }
        }
        Ok(())
    }
}

/// All physical sinks plus the overlay that connects them.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LogicalSink {
    ring: Arc<ChordRing>,
    sinks: Vec<SinkState>,
}

impl ContextDirectory for LogicalSink {
    fn local_context(&self, sink: SinkId, key: &ContextKey) -> Option<ContextId> {
        self.sinks
            .get(sink.index as usize)
            .and_then(|s| s.local_context(key))
    }
}

impl LogicalSink {
    /// Sinks must be indexed `0..n`, in order.
    pub fn new(sinks: &[SinkId], ring_bits: u32) -> Result<Self, SinkError> {
        let ring = ChordRing::from_sinks(sinks, ring_bits)?;
        Self::with_ring(sinks, ring)
    }

    pub fn with_ring(sinks: &[SinkId], ring: ChordRing) -> Result<Self, SinkError> {
        for (i, s) in sinks.iter().enumerate() {
            if s.index as usize != i {
                return Err(SinkError::InvalidRequest(format!(
                    "sink {s} listed at position {i}"
                )));
            }
            ring.index_of(*s)?;
        }
        Ok(Self {
            ring: Arc::new(ring),
            sinks: sinks.iter().map(|&s| SinkState::new(s)).collect(),
        })
    }

    pub fn ring(&self) -> &ChordRing {
        &self.ring
    }

    pub fn sinks(&self) -> &[SinkState] {
        &self.sinks
    }

    pub fn sink_ids(&self) -> Vec<SinkId> {
        self.sinks.iter().map(|s| s.id).collect()
    }

    pub fn sink(&self, id: SinkId) -> Result<&SinkState, SinkError> {
        self.sinks
            .get(id.index as usize)
            .filter(|s| s.id == id)
            .ok_or(SinkError::UnknownSink(id))
    }

    pub fn sink_mut(&mut self, id: SinkId) -> Result<&mut SinkState, SinkError> {
        self.sinks
            .get_mut(id.index as usize)
            .filter(|s| s.id == id)
            .ok_or(SinkError::UnknownSink(id))
    }

    pub fn set_reachable(&mut self, id: SinkId, reachable: bool) -> Result<(), SinkError> {
        self.sink_mut(id)?.reachable = reachable;
        Ok(())
    }

    fn ensure_reachable(&self, id: SinkId) -> Result<(), SinkError> {
        if self.sink(id)?.reachable {
            Ok(())
        } else {
            Err(SinkError::Unreachable(id))
        }
    }

    pub fn lookup_context(
        &self,
        initiator: SinkId,
        key: &ContextKey,
    ) -> Result<ContextLookup, SinkError> {
        Ok(chord::lookup_context(&self.ring, self, initiator, key)?)
    }

    /// Maps a flow to its context id, defining and publishing a new context
    /// when no sink knows the key, and assigns a sensor id if needed.
    pub fn resolve_flow(
        &mut self,
        contact: SinkId,
        sensor: Option<SensorId>,
        flow_id: FlowId,
        key: &ContextKey,
    ) -> Result<Resolution, SinkError> {
        if key.as_str().is_empty() {
            return Err(SinkError::InvalidRequest("empty context key".into()));
        }
        self.ensure_reachable(contact)?;

        let local = self.sink(contact)?.local_context(key);
        let (context_id, newly_defined, overlay_hops, answered_by) = match local {
            Some(id) => (id, false, 0, contact),
            None => {
                let lookup = self.lookup_context(contact, key)?;
                let responsible = lookup.responsible();
                if self.ensure_reachable(responsible).is_err() {
                    return Err(SinkError::ResolutionFailed(format!(
                        "responsible sink {responsible} unreachable"
                    )));
                }
                let (id, fresh) = match lookup {
                    ContextLookup::Found { context_id, .. } => (context_id, false),
                    ContextLookup::NotFound { .. } => {
                        (self.sink_mut(responsible)?.define_context(key), true)
                    }
                };
                let id = self.sink_mut(contact)?.learn(key, id);
                (id, fresh, lookup.overlay_hops(), responsible)
            }
        };

        let sensor_id = match sensor {
            Some(s) => s,
            None => self.sink_mut(answered_by)?.allocate_sensor_id(),
        };
        let context_id = {
            let contact_state = self.sink_mut(contact)?;
            contact_state.bind(sensor_id, flow_id, key, context_id);
            contact_state.canonical(context_id)
        };
        Ok(Resolution {
            context_id,
            sensor_id,
            newly_defined,
            overlay_hops,
            answered_by,
        })
    }

    pub fn publish_context(&mut self, sink: SinkId, id: ContextId) -> Result<bool, SinkError> {
        self.sink_mut(sink)?.publish_context(id)
    }

    /// Adds `sensor` to the group of `id`. The id must be published, either
    /// already known locally or at the sink that minted it.
    pub fn subscribe(
        &mut self,
        sink: SinkId,
        sensor: SensorId,
        id: ContextId,
    ) -> Result<SubscribeOutcome, SinkError> {
        self.ensure_reachable(sink)?;
        let local = self.sink(sink)?;
        if !local.knows_sensor(sensor) {
            return Err(SinkError::InvalidRequest(format!(
                "sensor {sensor} is not registered"
            )));
        }
        let mut canonical = local.canonical(id);
        let mut known = local.published.contains(&canonical);
        if !known {
            if let Some(origin) = minting_sink(id).and_then(|i| self.sinks.get(i as usize)) {
                if origin.reachable {
                    canonical = origin.canonical(id);
                    known = origin.published.contains(&canonical);
                }
            }
        }
        if !known {
            return Ok(SubscribeOutcome::UnknownContext);
        }
        let state = self.sink_mut(sink)?;
        state.published.insert(canonical);
        if state.subscriptions.insert((canonical, sensor)) {
            state.group_table.insert(canonical, sensor);
            state.enqueue(SyncKind::Subscribe {
                context_id: canonical,
                sensor_id: sensor,
            });
        }
        Ok(SubscribeOutcome::Subscribed)
    }

    /// Drains every outbox, addressed to every other sink. Ordered by
    /// origin, then sequence number, then destination.
    pub fn collect_outgoing(&mut self) -> Vec<(SinkId, SyncUpdate)> {
        let ids = self.sink_ids();
        let mut out = Vec::new();
        for i in 0..self.sinks.len() {
            let origin = self.sinks[i].id;
            for update in self.sinks[i].take_outbox() {
                for &to in &ids {
                    if to != origin {
                        out.push((to, update.clone()));
                    }
                }
            }
        }
        out
    }

    pub fn deliver(&mut self, to: SinkId, update: &SyncUpdate) -> Result<ApplyOutcome, SinkError> {
        Ok(self.sink_mut(to)?.apply_sync(update))
    }

    pub fn is_quiescent(&self) -> bool {
        self.sinks.iter().all(|s| s.pending_notifications.is_empty())
    }

    /// Delivers updates in FIFO order until no sink has anything to send.
    pub fn quiesce(&mut self) {
        loop {
            let batch = self.collect_outgoing();
            if batch.is_empty() {
                break;
            }
            for (to, update) in batch {
                self.sinks[to.index as usize].apply_sync(&update);
            }
        }
    }

    /// True when all sinks hold identical replicated state.
    pub fn converged(&self) -> bool {
        let first = self.sinks[0].serialize_replicated();
        self.sinks[1..]
            .iter()
            .all(|s| s.serialize_replicated() == first)
    }

    pub fn dump_state(&self) -> String {
        self.sinks.iter().map(SinkState::dump).collect::<Vec<_>>().join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::normalize_label;

    fn sinks(n: u32) -> Vec<SinkId> {
        (0..n).map(|i| SinkId::new(i, NetworkId(i))).collect()
    }

    fn key(s: &str) -> ContextKey {
        normalize_label(s).unwrap()
    }

    #[test]
    fn first_resolution_defines_and_publishes() {
        let ids = sinks(3);
        let mut ls = LogicalSink::new(&ids, 32).unwrap();
        let r = ls.resolve_flow(ids[0], None, FlowId(1), &key("temp")).unwrap();
        assert!(r.newly_defined);
        let owner = ls.ring().responsible(chord::context_position(&key("temp"), 32)).unwrap();
        assert_eq!(r.answered_by, owner);
        assert_eq!(minting_sink(r.context_id), Some(owner.index));
        assert!(ls.sink(owner).unwrap().published().contains(&r.context_id));
        ls.quiesce();
        assert!(ls.converged());
        for s in ls.sinks() {
            assert!(s.published().contains(&r.context_id));
            s.check_invariants().unwrap();
        }
    }

    #[test]
    fn local_hit_has_zero_hops() {
        let ids = sinks(3);
        let mut ls = LogicalSink::new(&ids, 32).unwrap();
        let a = ls.resolve_flow(ids[1], None, FlowId(1), &key("temp")).unwrap();
        let b = ls.resolve_flow(ids[1], None, FlowId(2), &key("temp")).unwrap();
        assert_eq!(a.context_id, b.context_id);
        assert_eq!(b.overlay_hops, 0);
        assert!(!b.newly_defined);
        assert_ne!(a.sensor_id, b.sensor_id);
    }

    #[test]
    fn remote_network_joins_existing_cluster() {
        let ids = sinks(4);
        let mut ls = LogicalSink::new(&ids, 32).unwrap();
        let owner = ls.ring().responsible(chord::context_position(&key("smoke"), 32)).unwrap();
        let first = ids.iter().copied().find(|&s| s != owner).unwrap();
        let second = ids.iter().copied().find(|&s| s != owner && s != first).unwrap();
        let a = ls.resolve_flow(first, None, FlowId(1), &key("smoke")).unwrap();
        let b = ls.resolve_flow(second, None, FlowId(2), &key("smoke")).unwrap();
        assert_eq!(a.context_id, b.context_id);
        assert!(!b.newly_defined);
        assert!(b.overlay_hops >= 1);
    }

    #[test]
    fn resolve_is_idempotent() {
        let ids = sinks(2);
        let mut ls = LogicalSink::new(&ids, 32).unwrap();
        let a = ls.resolve_flow(ids[0], None, FlowId(9), &key("x")).unwrap();
        ls.quiesce();
        for _ in 0..3 {
            let again = ls
                .resolve_flow(ids[0], Some(a.sensor_id), FlowId(9), &key("x"))
                .unwrap();
            assert_eq!(again.context_id, a.context_id);
            assert!(!again.newly_defined);
        }
        assert!(ls.is_quiescent(), "re-resolution must not announce anything");
    }

    #[test]
    fn unreachable_contact_is_retriable() {
        let ids = sinks(2);
        let mut ls = LogicalSink::new(&ids, 32).unwrap();
        ls.set_reachable(ids[0], false).unwrap();
        let err = ls.resolve_flow(ids[0], None, FlowId(1), &key("a")).unwrap_err();
        assert!(err.is_retriable());
    }

    #[test]
    fn apply_sync_is_idempotent() {
        let ids = sinks(2);
        let mut a = SinkState::new(ids[0]);
        let mut b = SinkState::new(ids[1]);
        a.define_context(&key("k"));
        let updates = a.take_outbox();
        assert_eq!(b.apply_sync(&updates[0]), ApplyOutcome::Applied);
        let snapshot = b.clone();
        assert_eq!(b.apply_sync(&updates[0]), ApplyOutcome::Duplicate);
        assert_eq!(b, snapshot);
        assert_eq!(b.registry().len(), 1);
        assert_eq!(a.apply_sync(&updates[0]), ApplyOutcome::Duplicate);
    }

    #[test]
    fn lower_id_wins_race() {
        let ids = sinks(2);
        let mut ls = LogicalSink::new(&ids, 32).unwrap();
        let k = key("race");
        let a = ls.sink_mut(ids[0]).unwrap().define_context(&k);
        let b = ls.sink_mut(ids[1]).unwrap().define_context(&k);
        ls.sink_mut(ids[1]).unwrap().bind(SensorId(77), FlowId(5), &k, b);
        ls.quiesce();
        assert!(ls.converged());
        let winner = a.min(b);
        for s in ls.sinks() {
            assert_eq!(s.local_context(&k), Some(winner));
            assert!(s.group_table().contains(winner, SensorId(77)));
            assert_eq!(s.published().iter().copied().collect::<Vec<_>>(), vec![winner]);
            s.check_invariants().unwrap();
        }
    }

    #[test]
    fn publish_is_idempotent_and_checked() {
        let ids = sinks(2);
        let mut ls = LogicalSink::new(&ids, 32).unwrap();
        let r = ls.resolve_flow(ids[0], None, FlowId(1), &key("p")).unwrap();
        let owner = r.answered_by;
        let before = ls.sink(owner).unwrap().published().len();
        assert!(!ls.publish_context(owner, r.context_id).unwrap());
        assert_eq!(ls.sink(owner).unwrap().published().len(), before);
        assert!(matches!(
            ls.publish_context(owner, ContextId(12345)),
            Err(SinkError::InvalidRequest(_))
        ));
    }

    #[test]
    fn explicit_publish_grows_set_once() {
        let mut s = SinkState::new(SinkId::new(0, NetworkId(0)));
        let id = s.define_context(&key("z"));
        // define_context publishes; model an unpublished id by clearing.
        s.published.clear();
        assert!(s.publish_context(id).unwrap());
        assert_eq!(s.published().len(), 1);
        assert!(!s.publish_context(id).unwrap());
        assert_eq!(s.published().len(), 1);
    }

    #[test]
    fn subscribe_across_networks() {
        let ids = sinks(2);
        let mut ls = LogicalSink::new(&ids, 32).unwrap();
        let r1 = ls.resolve_flow(ids[0], None, FlowId(1), &key("fire")).unwrap();
        let r2 = ls.resolve_flow(ids[1], None, FlowId(2), &key("flood")).unwrap();
        // Subscribe before any sync has propagated: the minting sink is asked.
        let out = ls.subscribe(ids[1], r2.sensor_id, r1.context_id).unwrap();
        assert_eq!(out, SubscribeOutcome::Subscribed);
        let never = ContextId((5u64 << LOCAL_ID_BITS) | 1);
        assert_eq!(
            ls.subscribe(ids[1], r2.sensor_id, never).unwrap(),
            SubscribeOutcome::UnknownContext
        );
        ls.quiesce();
        assert!(ls.converged());
        for s in ls.sinks() {
            let members = s.group_table().members(r1.context_id).unwrap();
            assert_eq!(members.len(), 2);
            s.check_invariants().unwrap();
        }
    }

    #[test]
    fn group_grows_by_distinct_subscribers() {
        let ids = sinks(2);
        let mut ls = LogicalSink::new(&ids, 32).unwrap();
        let owner = ls.resolve_flow(ids[0], None, FlowId(1), &key("g")).unwrap();
        let mut subscribers = Vec::new();
        for i in 0..4 {
            let r = ls
                .resolve_flow(ids[1], None, FlowId(100 + i), &key(&format!("other{i}")))
                .unwrap();
            subscribers.push(r.sensor_id);
        }
        ls.quiesce();
        for &s in &subscribers {
            ls.subscribe(ids[1], s, owner.context_id).unwrap();
            ls.subscribe(ids[1], s, owner.context_id).unwrap();
        }
        ls.quiesce();
        let members = ls.sink(ids[0]).unwrap().group_table().members(owner.context_id).unwrap();
        assert_eq!(members.len(), 1 + subscribers.len());
    }

    #[test]
    fn sensor_ids_partitioned_by_sink() {
        let ids = sinks(3);
        let mut ls = LogicalSink::new(&ids, 32).unwrap();
        let mut seen = BTreeSet::new();
        for i in 0..30u64 {
            let contact = ids[(i % 3) as usize];
            let r = ls
                .resolve_flow(contact, None, FlowId(i), &key(&format!("k{}", i % 5)))
                .unwrap();
            assert!(seen.insert(r.sensor_id), "duplicate sensor id {}", r.sensor_id);
        }
    }
}
