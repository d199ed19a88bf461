//! Static CHORD ring over the sinks, used to locate the sink responsible
//! for a context key.
//!
//! The ring is built once and never changes: no join/leave, stabilization
//! or successor lists. Lookups are iterative; `hops` counts forwards from
//! one ring node to another while walking closest-preceding fingers.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{fnv1a32, ContextId, ContextKey};
use crate::sink::SinkId;

pub const DEFAULT_RING_BITS: u32 = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChordError {
    #[error("ring has no nodes")]
    NoNodes,
    #[error("ring bit width {0} outside 1..=32")]
    BadWidth(u32),
    #[error("ring key {key} is out of range for a {bits}-bit ring")]
    KeyOutOfRange { key: u64, bits: u32 },
    #[error("duplicate ring position {0}")]
    DuplicatePosition(RingKey),
    #[error("sinks {a} and {b} hash to the same ring position")]
    SinkCollision { a: SinkId, b: SinkId },
    #[error("{0} is not a ring member")]
    UnknownSink(SinkId),
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct RingKey(pub u64);

impl fmt::Display for RingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

fn mask(bits: u32) -> u64 {
    (1u64 << bits) - 1
}

/// FNV-1a 32 of `bytes`, truncated to the low `bits` bits.
pub fn ring_position(bytes: &[u8], bits: u32) -> RingKey {
    RingKey(u64::from(fnv1a32(bytes)) & mask(bits))
}

pub fn context_position(key: &ContextKey, bits: u32) -> RingKey {
    ring_position(key.as_bytes(), bits)
}

pub fn sink_position(sink: SinkId, bits: u32) -> RingKey {
    ring_position(&sink.canonical_bytes(), bits)
}

/// `x` in the clockwise half-open arc `(from, to]`. Equal endpoints mean the
/// whole ring.
fn in_arc_incl(from: u64, x: u64, to: u64) -> bool {
    if from < to {
        from < x && x <= to
    } else {
        x > from || x <= to
    }
}

/// `x` in the open arc `(from, to)`.
fn in_arc_excl(from: u64, x: u64, to: u64) -> bool {
    if from < to {
        from < x && x < to
    } else {
        x > from || x < to
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct ChordNode {
    pub id: RingKey,
    pub sink: SinkId,
    /// `fingers[i]` is the ring index of successor(id + 2^i).
    pub fingers: Vec<usize>,
}

impl ChordNode {
    pub fn successor(&self) -> usize {
        self.fingers[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lookup {
    /// Index into [`ChordRing::nodes`].
    pub node: usize,
    pub hops: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct ChordRing {
    bits: u32,
    nodes: Vec<ChordNode>,
}

impl ChordRing {
    pub fn new(
        bits: u32,
        members: impl IntoIterator<Item = (RingKey, SinkId)>,
    ) -> Result<Self, ChordError> {
        if !(1..=32).contains(&bits) {
            return Err(ChordError::BadWidth(bits));
        }
        let mut members: Vec<(RingKey, SinkId)> = members.into_iter().collect();
        if members.is_empty() {
            return Err(ChordError::NoNodes);
        }
        for &(key, _) in &members {
            if key.0 > mask(bits) {
                return Err(ChordError::KeyOutOfRange { key: key.0, bits });
            }
        }
        members.sort_by_key(|&(k, _)| k);
        if let Some(w) = members.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(ChordError::DuplicatePosition(w[0].0));
        }

        let ids: Vec<u64> = members.iter().map(|(k, _)| k.0).collect();
        let space = 1u64 << bits;
        let nodes = members
            .iter()
            .map(|&(id, sink)| {
                let fingers = (0..bits)
                    .map(|i| successor_index(&ids, (id.0 + (1u64 << i)) % space))
                    .collect();
                ChordNode { id, sink, fingers }
            })
            .collect();
        Ok(Self { bits, nodes })
    }

    /// Places every sink at the hash of its identity.
    pub fn from_sinks(sinks: &[SinkId], bits: u32) -> Result<Self, ChordError> {
        for (i, a) in sinks.iter().enumerate() {
            for b in &sinks[i + 1..] {
                if sink_position(*a, bits) == sink_position(*b, bits) {
                    return Err(ChordError::SinkCollision { a: *a, b: *b });
                }
            }
        }
        Self::new(bits, sinks.iter().map(|&s| (sink_position(s, bits), s)))
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn nodes(&self) -> &[ChordNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, sink: SinkId) -> Result<usize, ChordError> {
        self.nodes
            .iter()
            .position(|n| n.sink == sink)
            .ok_or(ChordError::UnknownSink(sink))
    }

    /// Iterative CHORD lookup starting at node `start`.
    pub fn find_successor(&self, start: usize, key: RingKey) -> Result<Lookup, ChordError> {
        if self.nodes.is_empty() {
            return Err(ChordError::NoNodes);
        }
        if key.0 > mask(self.bits) {
            return Err(ChordError::KeyOutOfRange {
                key: key.0,
                bits: self.bits,
            });
        }
        let mut cur = start;
        let mut hops = 0;
        loop {
            let node = &self.nodes[cur];
            let pred = &self.nodes[(cur + self.nodes.len() - 1) % self.nodes.len()];
            if in_arc_incl(pred.id.0, key.0, node.id.0) {
                return Ok(Lookup { node: cur, hops });
            }
            let succ = node.successor();
            if in_arc_incl(node.id.0, key.0, self.nodes[succ].id.0) {
                return Ok(Lookup { node: succ, hops });
            }
            let next = node
                .fingers
                .iter()
                .rev()
                .copied()
                .find(|&f| in_arc_excl(node.id.0, self.nodes[f].id.0, key.0));
            match next {
                Some(f) if f != cur => {
                    cur = f;
                    hops += 1;
                }
                _ => return Ok(Lookup { node: succ, hops }),
            }
        }
    }

    /// Lookup initiated by `sink`.
    pub fn route(&self, from: SinkId, key: RingKey) -> Result<Lookup, ChordError> {
        let start = self.index_of(from)?;
        self.find_successor(start, key)
    }

    /// The sink responsible for `key`, by direct search.
    pub fn responsible(&self, key: RingKey) -> Result<SinkId, ChordError> {
        if self.nodes.is_empty() {
            return Err(ChordError::NoNodes);
        }
        let ids: Vec<u64> = self.nodes.iter().map(|n| n.id.0).collect();
        Ok(self.nodes[successor_index(&ids, key.0)].sink)
    }
}

/// First index whose id is >= key, wrapping to 0.
fn successor_index(sorted_ids: &[u64], key: u64) -> usize {
    let i = sorted_ids.partition_point(|&id| id < key);
    if i == sorted_ids.len() {
        0
    } else {
        i
    }
}

/// Read access to each sink's local context registry.
pub trait ContextDirectory {
    fn local_context(&self, sink: SinkId, key: &ContextKey) -> Option<ContextId>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextLookup {
    Found {
        context_id: ContextId,
        responsible: SinkId,
        overlay_hops: u32,
    },
    NotFound {
        responsible: SinkId,
        overlay_hops: u32,
    },
}

impl ContextLookup {
    pub fn responsible(&self) -> SinkId {
        match *self {
            ContextLookup::Found { responsible, .. } | ContextLookup::NotFound { responsible, .. } => {
                responsible
            }
        }
    }

    pub fn overlay_hops(&self) -> u32 {
        match *self {
            ContextLookup::Found { overlay_hops, .. }
            | ContextLookup::NotFound { overlay_hops, .. } => overlay_hops,
        }
    }
}

/// Routes to the sink responsible for `key` and asks its registry.
///
/// `overlay_hops` is the finger-walk forwards plus one for the query to the
/// responsible sink when that sink is not the initiator.
pub fn lookup_context<D: ContextDirectory + ?Sized>(
    ring: &ChordRing,
    directory: &D,
    initiator: SinkId,
    key: &ContextKey,
) -> Result<ContextLookup, ChordError> {
    let lookup = ring.route(initiator, context_position(key, ring.bits()))?;
    let responsible = ring.nodes[lookup.node].sink;
    let overlay_hops = lookup.hops + u32::from(responsible != initiator);
    Ok(match directory.local_context(responsible, key) {
        Some(context_id) => ContextLookup::Found {
            context_id,
            responsible,
            overlay_hops,
        },
        None => ContextLookup::NotFound {
            responsible,
            overlay_hops,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{normalize_label, NetworkId};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn sink(i: u32) -> SinkId {
        SinkId::new(i, NetworkId(i))
    }

    fn ring_from(bits: u32, ids: &[u64]) -> ChordRing {
        ChordRing::new(
            bits,
            ids.iter().enumerate().map(|(i, &k)| (RingKey(k), sink(i as u32))),
        )
        .unwrap()
    }

    fn scan_successor(ids: &[u64], key: u64) -> u64 {
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        sorted.iter().copied().find(|&id| id >= key).unwrap_or(sorted[0])
    }

    fn log2_ceil(n: usize) -> u32 {
        usize::BITS - (n.max(1) - 1).leading_zeros()
    }

    #[test]
    fn reference_positions() {
        // Independent FNV-1a 32 reference values.
        let key = normalize_label("temp-high").unwrap();
        assert_eq!(context_position(&key, 32), RingKey(0x1fd7_7ffe));
        assert_eq!(sink_position(sink(0), 32), RingKey(0x9be1_7165));
        assert_eq!(sink_position(sink(1), 32), RingKey(0x8eac_5155));
        assert_eq!(context_position(&key, 32), context_position(&key, 32));
    }

    #[test]
    fn empty_ring_rejected() {
        assert_eq!(ChordRing::new(8, []).unwrap_err(), ChordError::NoNodes);
    }

    #[test]
    fn duplicate_rejected() {
        let err = ChordRing::new(8, [(RingKey(3), sink(0)), (RingKey(3), sink(1))]).unwrap_err();
        assert_eq!(err, ChordError::DuplicatePosition(RingKey(3)));
    }

    #[test]
    fn single_node_owns_everything() {
        let ring = ring_from(8, &[42]);
        for k in 0..256 {
            let l = ring.find_successor(0, RingKey(k)).unwrap();
            assert_eq!((l.node, l.hops), (0, 0));
        }
    }

    #[test]
    fn exact_id_hits_node() {
        let ring = ring_from(8, &[10, 100, 200]);
        for (i, id) in [10u64, 100, 200].into_iter().enumerate() {
            for start in 0..3 {
                let node = ring.find_successor(start, RingKey(id)).unwrap().node;
                assert_eq!(ring.nodes()[node].id, RingKey(id), "start {start} index {i}");
            }
        }
    }

    #[test]
    fn fingers_are_successors() {
        let ids = [3u64, 50, 51, 130, 250];
        let ring = ring_from(8, &ids);
        for node in ring.nodes() {
            for (i, &f) in node.fingers.iter().enumerate() {
                let target = (node.id.0 + (1 << i)) % 256;
                assert_eq!(ring.nodes()[f].id.0, scan_successor(&ids, target));
            }
        }
    }

    #[test]
    fn full_keyspace_on_64_node_ring() {
        use rand::{seq::index::sample, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(64);
        let ids: Vec<u64> = sample(&mut rng, 1 << 16, 64).into_iter().map(|x| x as u64).collect();
        let ring = ring_from(16, &ids);
        for k in 0..(1u64 << 16) {
            let start = (k as usize) % 64;
            let l = ring.find_successor(start, RingKey(k)).unwrap();
            assert_eq!(ring.nodes()[l.node].id.0, scan_successor(&ids, k));
            assert!(l.hops <= log2_ceil(64) + 1, "key {k}: {} hops", l.hops);
        }
    }

    #[test]
    fn sink_collision_is_an_error() {
        // With a 1-bit ring, three sinks must collide.
        let err = ChordRing::from_sinks(&[sink(0), sink(1), sink(2)], 1).unwrap_err();
        assert!(matches!(err, ChordError::SinkCollision { .. }));
    }

    struct MapDirectory(BTreeMap<(SinkId, ContextKey), ContextId>);

    impl ContextDirectory for MapDirectory {
        fn local_context(&self, sink: SinkId, key: &ContextKey) -> Option<ContextId> {
            self.0.get(&(sink, key.clone())).copied()
        }
    }

    #[test]
    fn lookup_independent_of_initiator() {
        use rand::{Rng, SeedableRng};
        let sinks: Vec<SinkId> = (0..4).map(sink).collect();
        let ring = ChordRing::from_sinks(&sinks, 32).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20);
        let keys: Vec<ContextKey> = (0..20)
            .map(|_| normalize_label(&format!("ctx-{}", rng.gen::<u32>())).unwrap())
            .collect();
        let mut dir = MapDirectory(BTreeMap::new());
        for (i, k) in keys.iter().enumerate().step_by(2) {
            let owner = ring.responsible(context_position(k, 32)).unwrap();
            dir.0.insert((owner, k.clone()), ContextId(i as u64 + 1));
        }
        for (i, k) in keys.iter().enumerate() {
            let results: Vec<_> = sinks
                .iter()
                .map(|&s| lookup_context(&ring, &dir, s, k).unwrap())
                .collect();
            for r in &results {
                assert_eq!(r.responsible(), results[0].responsible());
                match r {
                    ContextLookup::Found { context_id, .. } => {
                        assert_eq!(i % 2, 0);
                        assert_eq!(*context_id, ContextId(i as u64 + 1));
                    }
                    ContextLookup::NotFound { .. } => assert_eq!(i % 2, 1),
                }
            }
            for (s, r) in sinks.iter().zip(&results) {
                if *s == r.responsible() {
                    assert_eq!(r.overlay_hops(), 0);
                } else {
                    assert!(r.overlay_hops() >= 1);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn find_successor_matches_scan(
            ids in proptest::collection::btree_set(0u64..(1 << 32), 1..64),
            keys in proptest::collection::vec(0u64..(1 << 32), 32),
            start in any::<proptest::sample::Index>(),
        ) {
            let ids: Vec<u64> = ids.into_iter().collect();
            let ring = ring_from(32, &ids);
            let start = start.index(ids.len());
            for k in keys {
                let l = ring.find_successor(start, RingKey(k)).unwrap();
                prop_assert_eq!(ring.nodes()[l.node].id.0, scan_successor(&ids, k));
                // Each forward at least halves the remaining distance and
                // visits a new node. The tighter logarithmic bound only
                // holds with high probability, so clustered rings can break it.
                prop_assert!(l.hops <= 32u32.min(ids.len() as u32 - 1));
            }
        }

        #[test]
        fn responsibility_partitions_small_ring(
            ids in proptest::collection::btree_set(0u64..256, 1..32),
        ) {
            let ids: Vec<u64> = ids.into_iter().collect();
            let ring = ring_from(8, &ids);
            // Each key has exactly one owner and each node owns the arc
            // (predecessor, id], so arc sizes sum to the key space.
            let mut owned = vec![0u64; ids.len()];
            for k in 0..256u64 {
                owned[ring.find_successor(0, RingKey(k)).unwrap().node] += 1;
            }
            prop_assert_eq!(owned.iter().sum::<u64>(), 256);
            for (i, node) in ring.nodes().iter().enumerate() {
                let pred = ring.nodes()[(i + ids.len() - 1) % ids.len()].id.0;
                let arc = if ids.len() == 1 { 256 } else { (node.id.0 + 256 - pred) % 256 };
                prop_assert_eq!(owned[i], arc);
            }
        }
    }
}
