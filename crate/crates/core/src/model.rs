//! Identifiers, flow tables and packets shared by every layer.
//!
//! The canonical byte encoding of [`MatchFields`] is the only externally
//! visible format defined here:
//!
//! ```text
//! context_label bytes (raw, no length prefix)
//! port            u16 little-endian
//! source          u64 little-endian (0 when unassigned)
//! ```
//!
//! A [`FlowId`] is the 64-bit FNV-1a digest of that encoding.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const FNV64_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV64_PRIME: u64 = 0x0000_0100_0000_01b3;
const FNV32_OFFSET: u32 = 0x811c_9dc5;
const FNV32_PRIME: u32 = 0x0100_0193;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV64_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV64_PRIME)
    })
}

/// 32-bit FNV-1a.
pub fn fnv1a32(bytes: &[u8]) -> u32 {
    bytes.iter().fold(FNV32_OFFSET, |h, &b| {
        (h ^ u32::from(b)).wrapping_mul(FNV32_PRIME)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid match fields: context label is empty")]
    EmptyContextLabel,
    #[error("invalid packet: {0}")]
    InvalidPacket(&'static str),
}

/// Globally unique sensor identifier. Zero is reserved for "unassigned".
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct SensorId(pub u64);

impl fmt::Display for SensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct NetworkId(pub u32);

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct FlowId(pub u64);

impl fmt::Display for FlowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Identifier of a cluster of context-similar flows.
///
/// Publication state is tracked by the sinks, not carried on the id.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct ContextId(pub u64);

impl fmt::Display for ContextId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Normalized context label. Two flows are context-similar iff their keys
/// are byte-equal.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContextKey(String);

impl ContextKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }
}

impl fmt::Display for ContextKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Packet header fields a flow entry matches on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MatchFields {
    pub source: Option<SensorId>,
    pub context_label: String,
    pub port: u16,
}

impl MatchFields {
    pub fn new(source: Option<SensorId>, context_label: impl Into<String>, port: u16) -> Self {
        Self {
            source,
            context_label: context_label.into(),
            port,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.context_label.is_empty() {
            return Err(ModelError::EmptyContextLabel);
        }
        Ok(())
    }

    /// Canonical encoding: label bytes, port (u16 LE), source (u64 LE, 0 if unassigned).
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.context_label.len() + 10);
        out.extend_from_slice(self.context_label.as_bytes());
        out.extend_from_slice(&self.port.to_le_bytes());
        out.extend_from_slice(&self.source.map_or(0, |s| s.0).to_le_bytes());
        out
    }
}

pub fn derive_flow_id(fields: &MatchFields) -> Result<FlowId, ModelError> {
    fields.validate()?;
    Ok(FlowId(fnv1a64(&fields.canonical_bytes())))
}

/// Lowercased, whitespace-trimmed context label.
pub fn extract_context_key(fields: &MatchFields) -> Result<ContextKey, ModelError> {
    normalize_label(&fields.context_label)
}

pub fn normalize_label(label: &str) -> Result<ContextKey, ModelError> {
    let key = label.trim().to_lowercase();
    if key.is_empty() {
        return Err(ModelError::EmptyContextLabel);
    }
    Ok(ContextKey(key))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlowStats {
    pub packet_count: u64,
    pub byte_count: u64,
    pub last_match: Option<MatchFields>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlowEntry {
    pub fields: MatchFields,
    pub flow_id: FlowId,
    pub stats: FlowStats,
}

impl FlowEntry {
    pub fn install(fields: MatchFields) -> Result<Self, ModelError> {
        let flow_id = derive_flow_id(&fields)?;
        Ok(Self {
            fields,
            flow_id,
            stats: FlowStats {
                packet_count: 0,
                byte_count: 0,
                last_match: None,
            },
        })
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct ContextFlowTableEntry {
    pub sensor_id: SensorId,
    pub flow_id: FlowId,
    pub context_id: ContextId,
}

/// Cluster membership: context id to member sensors.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupTable {
    groups: BTreeMap<ContextId, BTreeSet<SensorId>>,
}

impl GroupTable {
    pub fn insert(&mut self, group: ContextId, sensor: SensorId) -> bool {
        self.groups.entry(group).or_default().insert(sensor)
    }

    pub fn members(&self, group: ContextId) -> Option<&BTreeSet<SensorId>> {
        self.groups.get(&group)
    }

    pub fn contains(&self, group: ContextId, sensor: SensorId) -> bool {
        self.groups.get(&group).is_some_and(|m| m.contains(&sensor))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ContextId, &BTreeSet<SensorId>)> {
        self.groups.iter()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Moves every member of `from` under `to`.
    pub fn merge_into(&mut self, from: ContextId, to: ContextId) {
        if from == to {
            return;
        }
        if let Some(members) = self.groups.remove(&from) {
            self.groups.entry(to).or_default().extend(members);
        }
    }
}

/// Simulated datagram. Times are integer nanoseconds of simulation clock.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Packet {
    pub seq: u64,
    pub fields: MatchFields,
    pub size_bytes: u32,
    pub created_at_ns: u64,
    pub sender: Option<SensorId>,
    pub group: Option<ContextId>,
}

impl Packet {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.size_bytes == 0 {
            return Err(ModelError::InvalidPacket("size_bytes must be positive"));
        }
        self.fields.validate()
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum MatchOutcome {
    Hit(usize),
    Miss,
}

/// First entry whose match equals the packet's wins.
pub fn match_packet(table: &[FlowEntry], pkt: &Packet) -> MatchOutcome {
    table
        .iter()
        .position(|e| e.fields == pkt.fields)
        .map_or(MatchOutcome::Miss, MatchOutcome::Hit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsOutcome {
    Consistent,
    /// The packet's match differs from the last one seen; the caller must
    /// re-derive the flow id.
    Mismatch,
}

pub fn update_statistics(entry: &mut FlowEntry, pkt: &Packet) -> StatsOutcome {
    entry.stats.packet_count += 1;
    entry.stats.byte_count += u64::from(pkt.size_bytes);
    let outcome = match &entry.stats.last_match {
        Some(prev) if *prev != pkt.fields => StatsOutcome::Mismatch,
        _ => StatsOutcome::Consistent,
    };
    entry.stats.last_match = Some(pkt.fields.clone());
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;

    proptest::proptest! {
        #[test]
        fn fnv64_matches_reference_hasher(bytes in proptest::collection::vec(proptest::num::u8::ANY, 0..64)) {
            use std::hash::Hasher;
            let mut h = fnv::FnvHasher::default();
            h.write(&bytes);
            proptest::prop_assert_eq!(fnv1a64(&bytes), h.finish());
        }
    }

    fn pkt(fields: MatchFields) -> Packet {
        Packet {
            seq: 0,
            fields,
            size_bytes: 512,
            created_at_ns: 0,
            sender: None,
            group: None,
        }
    }

    #[test]
    fn flow_id_is_deterministic() {
        let a = MatchFields::new(Some(SensorId(7)), "temp-high", 1);
        let b = a.clone();
        assert_eq!(derive_flow_id(&a).unwrap(), derive_flow_id(&b).unwrap());
    }

    #[test]
    fn flow_id_distinguishes_labels() {
        let hi = MatchFields::new(Some(SensorId(7)), "temp-high", 1);
        let lo = MatchFields::new(Some(SensorId(7)), "temp-low", 1);
        // Reference FNV-1a digests of the canonical encodings.
        assert_eq!(derive_flow_id(&hi).unwrap(), FlowId(0xa71c_61b1_a3f7_6c70));
        assert_eq!(derive_flow_id(&lo).unwrap(), FlowId(0xb497_c663_c2b6_e96a));
    }

    #[test]
    fn unassigned_source_encodes_as_zero() {
        let m = MatchFields::new(None, "temp-high", 1);
        assert_eq!(&m.canonical_bytes()[9..], &[1, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(derive_flow_id(&m).unwrap(), FlowId(0x7ff7_d2f0_f082_7357));
    }

    #[test]
    fn empty_label_rejected() {
        let m = MatchFields::new(None, "", 1);
        assert_eq!(derive_flow_id(&m), Err(ModelError::EmptyContextLabel));
        assert_eq!(extract_context_key(&m), Err(ModelError::EmptyContextLabel));
        assert!(normalize_label("   ").is_err());
    }

    #[test]
    fn context_key_normalization() {
        let m = MatchFields::new(None, "Temp-High ", 3);
        assert_eq!(extract_context_key(&m).unwrap().as_str(), "temp-high");
        let other_net = MatchFields::new(Some(SensorId(99)), "Temp-High ", 4);
        assert_eq!(
            extract_context_key(&m).unwrap(),
            extract_context_key(&other_net).unwrap()
        );
        let hum = MatchFields::new(None, "humidity", 3);
        assert_ne!(
            extract_context_key(&m).unwrap(),
            extract_context_key(&hum).unwrap()
        );
    }

    #[test]
    fn match_packet_first_match() {
        let a = MatchFields::new(None, "a", 1);
        let b = MatchFields::new(None, "b", 1);
        assert_eq!(match_packet(&[], &pkt(a.clone())), MatchOutcome::Miss);
        let table = vec![
            FlowEntry::install(a.clone()).unwrap(),
            FlowEntry::install(b.clone()).unwrap(),
            FlowEntry::install(b.clone()).unwrap(),
        ];
        assert_eq!(match_packet(&table[..1], &pkt(a)), MatchOutcome::Hit(0));
        assert_eq!(match_packet(&table, &pkt(b)), MatchOutcome::Hit(1));
    }

    #[test]
    fn statistics_track_mismatch() {
        let a = MatchFields::new(None, "a", 1);
        let mut entry = FlowEntry::install(a.clone()).unwrap();
        assert_eq!(update_statistics(&mut entry, &pkt(a.clone())), StatsOutcome::Consistent);
        assert_eq!(update_statistics(&mut entry, &pkt(a.clone())), StatsOutcome::Consistent);
        assert_eq!(entry.stats.packet_count, 2);
        let changed = MatchFields::new(None, "b", 1);
        assert_eq!(update_statistics(&mut entry, &pkt(changed)), StatsOutcome::Mismatch);
    }

    #[test]
    fn statistics_count_table_one_run() {
        let a = MatchFields::new(Some(SensorId(1)), "a", 1);
        let mut entry = FlowEntry::install(a.clone()).unwrap();
        let p = pkt(a);
        for _ in 0..2000 {
            update_statistics(&mut entry, &p);
        }
        assert_eq!(entry.stats.packet_count, 2000);
        assert_eq!(entry.stats.byte_count, 2000 * 512);
    }

    #[test]
    fn group_table_merge() {
        let mut g = GroupTable::default();
        g.insert(ContextId(5), SensorId(1));
        g.insert(ContextId(3), SensorId(2));
        g.merge_into(ContextId(5), ContextId(3));
        assert_eq!(g.len(), 1);
        assert!(g.contains(ContextId(3), SensorId(1)));
    }
}
