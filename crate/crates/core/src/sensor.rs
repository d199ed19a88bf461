//! Flow-sensor state machine: the local flow-table pipeline plus the join
//! handshake with its nearby sink.

use std::collections::{BTreeSet, VecDeque};
use std::hash::{Hash, Hasher};

use serde::Serialize;
use thiserror::Error;

use crate::model::{
    derive_flow_id, extract_context_key, match_packet, update_statistics, ContextId, ContextKey,
    FlowEntry, FlowId, MatchOutcome, ModelError, NetworkId, Packet, SensorId, StatsOutcome,
};
use crate::sink::{LogicalSink, Resolution, SinkError, SinkId};

/// Packets held while a sensor waits for its context id.
pub const PRE_JOIN_BUFFER: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl Eq for Position {}

impl Hash for Position {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.x.to_bits().hash(state);
        self.y.to_bits().hash(state);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    /// Empty or malformed packet.
    Empty,
    /// Sender does not match this sensor's id.
    NotOwner,
    BufferFull,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SensorAction {
    Drop(DropReason),
    ForwardToSink { flow_id: FlowId, pkt: Packet },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Offer {
    Action(SensorAction),
    Buffered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinOutcome {
    JoinedExisting(ContextId),
    FormedNew(ContextId),
}

impl JoinOutcome {
    pub fn context_id(&self) -> ContextId {
        match *self {
            JoinOutcome::JoinedExisting(id) | JoinOutcome::FormedNew(id) => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JoinError {
    #[error("sensor already holds context {0}")]
    AlreadyJoined(ContextId),
    #[error("sensor has no flow to resolve")]
    NoFlow,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("join failed: {0}")]
    Sink(#[from] SinkError),
    #[error("sensor is fixed and cannot move")]
    Immobile,
}

impl JoinError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, JoinError::Sink(e) if e.is_retriable())
    }
}

/// What a sensor sends to its sink to be resolved.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct JoinRequest {
    pub sensor: Option<SensorId>,
    pub flow_id: FlowId,
    pub key: ContextKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FlowSensor {
    pub sensor_id: Option<SensorId>,
    pub network: NetworkId,
    position: Position,
    mobile: bool,
    flow_table: Vec<FlowEntry>,
    pub context_id: Option<ContextId>,
    subscriptions: BTreeSet<ContextId>,
    current: Option<usize>,
    buffer: VecDeque<Packet>,
}

impl FlowSensor {
    pub fn new(network: NetworkId, position: Position, mobile: bool) -> Self {
        Self {
            sensor_id: None,
            network,
            position,
            mobile,
            flow_table: Vec::new(),
            context_id: None,
            subscriptions: BTreeSet::new(),
            current: None,
            buffer: VecDeque::new(),
        }
    }

    pub fn position(&self) -> Position {
        self.position
    }

    pub fn is_mobile(&self) -> bool {
        self.mobile
    }

    pub fn flow_table(&self) -> &[FlowEntry] {
        &self.flow_table
    }

    pub fn subscriptions(&self) -> &BTreeSet<ContextId> {
        &self.subscriptions
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn move_to(&mut self, to: Position) -> Result<(), JoinError> {
        if !self.mobile {
            return Err(JoinError::Immobile);
        }
        self.position = to;
        Ok(())
    }

    /// Flow entry of the most recently forwarded packet.
    pub fn current_flow(&self) -> Option<&FlowEntry> {
        self.current.map(|i| &self.flow_table[i])
    }

    /// Runs one packet through the flow table.
    pub fn process_packet(&mut self, pkt: Packet) -> SensorAction {
        if pkt.validate().is_err() {
            return SensorAction::Drop(DropReason::Empty);
        }
        if let (Some(own), Some(sender)) = (self.sensor_id, pkt.sender) {
            if own != sender {
                return SensorAction::Drop(DropReason::NotOwner);
            }
        }
        let idx = match match_packet(&self.flow_table, &pkt) {
            MatchOutcome::Hit(i) => i,
            MatchOutcome::Miss => match FlowEntry::install(pkt.fields.clone()) {
                Ok(entry) => {
                    self.flow_table.push(entry);
                    self.flow_table.len() - 1
                }
                Err(_) => return SensorAction::Drop(DropReason::Empty),
            },
        };
        let entry = &mut self.flow_table[idx];
        if update_statistics(entry, &pkt) == StatsOutcome::Mismatch {
            // validated above, so derivation cannot fail
            if let Ok(id) = derive_flow_id(&pkt.fields) {
                entry.flow_id = id;
                entry.fields = pkt.fields.clone();
            }
        }
        self.current = Some(idx);
        SensorAction::ForwardToSink {
            flow_id: entry.flow_id,
            pkt,
        }
    }

    /// Data path: holds traffic until the sensor has a context id.
    pub fn offer(&mut self, pkt: Packet) -> Offer {
        if self.context_id.is_some() {
            return Offer::Action(self.process_packet(pkt));
        }
        if self.buffer.len() >= PRE_JOIN_BUFFER {
            return Offer::Action(SensorAction::Drop(DropReason::BufferFull));
        }
        self.buffer.push_back(pkt);
        Offer::Buffered
    }

    /// Processes everything buffered before the join completed.
    pub fn release_buffered(&mut self) -> Vec<SensorAction> {
        let pending: Vec<Packet> = self.buffer.drain(..).collect();
        pending.into_iter().map(|p| self.process_packet(p)).collect()
    }

    pub fn join_request(&self) -> Result<JoinRequest, JoinError> {
        if let Some(id) = self.context_id {
            return Err(JoinError::AlreadyJoined(id));
        }
        let entry = self.current_flow().ok_or(JoinError::NoFlow)?;
        Ok(JoinRequest {
            sensor: self.sensor_id,
            flow_id: entry.flow_id,
            key: extract_context_key(&entry.fields)?,
        })
    }

    pub fn apply_resolution(&mut self, res: &Resolution) -> JoinOutcome {
        if self.sensor_id.is_none() {
            self.sensor_id = Some(res.sensor_id);
        }
        if let Some(old) = self.context_id.replace(res.context_id) {
            self.subscriptions.remove(&old);
        }
        self.subscriptions.insert(res.context_id);
        if res.newly_defined {
            JoinOutcome::FormedNew(res.context_id)
        } else {
            JoinOutcome::JoinedExisting(res.context_id)
        }
    }

    /// Resolves the current flow through `contact` and adopts the answer.
    pub fn join(
        &mut self,
        sinks: &mut LogicalSink,
        contact: SinkId,
    ) -> Result<JoinOutcome, JoinError> {
        let req = self.join_request()?;
        let res = sinks.resolve_flow(contact, req.sensor, req.flow_id, &req.key)?;
        Ok(self.apply_resolution(&res))
    }
}
