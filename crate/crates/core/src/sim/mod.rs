//! Discrete-event simulation of the clustered sensor networks.
//!
//! A run has two phases. During the join phase every active sender
//! resolves its context id through the sink of its own network, and sinks
//! synchronize until no update is in flight. The traffic phase then
//! generates constant-rate data, serializes it through the channel model
//! and records per-group delay, jitter and loss.

pub mod channel;
pub mod config;
pub mod event;
pub mod mobility;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::metrics::{GroupReport, GroupStats, JoinSummary, MetricsReport, Totals};
use crate::model::{ContextId, MatchFields, NetworkId, Packet, SensorId};
use crate::sensor::{FlowSensor, Offer, Position, SensorAction};
use crate::sink::{LogicalSink, SinkError, SinkId};

pub use channel::{transmission_delay, transmission_delay_ns, Channel, SendOutcome};
pub use config::{ChannelScope, ConfigError, ScenarioConfig};
pub use event::{Event, EventKind, EventQueue};
pub use mobility::{step_mobility, Bounds};

use channel::secs_to_ns;

/// Random streams; each consumer draws from its own so that changing one
/// knob does not shift the others.
const STREAM_TOPOLOGY: u64 = 1;
const STREAM_JOIN: u64 = 2;
const STREAM_PHASE: u64 = 3;
const STREAM_MOBILITY: u64 = 4;
const STREAM_LOSS: u64 = 5;

/// Upper bound of the random delay before a sender starts joining.
const JOIN_JITTER_NS: u64 = 10_000_000;
const DATA_PORT: u16 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("internal consistency error: {0}")]
    Internal(String),
    #[error("contract violation: {0}")]
    Contract(&'static str),
}

impl From<SinkError> for SimError {
    fn from(e: SinkError) -> Self {
        SimError::Internal(format!("sink: {e}"))
    }
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn group_label(group: u32) -> String {
    format!("group-{}", group + 1)
}

/// One sensor that generates measured traffic.
#[derive(Debug, Clone, PartialEq)]
pub struct Sender {
    /// Index into [`SimWorld::sensors`].
    pub sensor: usize,
    /// 0-based group number.
    pub group: u32,
    pub label: String,
}

#[derive(Debug, Clone)]
pub struct SimWorld {
    pub cfg: ScenarioConfig,
    pub sensors: Vec<FlowSensor>,
    pub sinks: LogicalSink,
    /// Gateway position of each network, in that network's own frame.
    pub gateways: Vec<Position>,
    pub bounds: Bounds,
    pub senders: Vec<Sender>,
}

impl SimWorld {
    pub fn sink_of(&self, sensor: usize) -> SinkId {
        let n = self.sensors[sensor].network;
        SinkId::new(n.0, n)
    }

    pub fn in_range(&self, sensor: usize) -> bool {
        let s = &self.sensors[sensor];
        s.position().distance(&self.gateways[s.network.0 as usize]) <= self.cfg.range_m
    }

    pub fn sensors_in(&self, network: u32) -> impl Iterator<Item = usize> + '_ {
        self.sensors
            .iter()
            .enumerate()
            .filter(move |(_, s)| s.network.0 == network)
            .map(|(i, _)| i)
    }
}

/// Places sensors, assigns groups and builds the sink overlay.
pub fn build_topology(cfg: &ScenarioConfig) -> Result<SimWorld, SimError> {
    cfg.validate()?;
    let bounds = Bounds::new(cfg.mobility_bounds_m[0], cfg.mobility_bounds_m[1]);
    let center = bounds.center();
    let mut rng = stream_rng(cfg.seed, STREAM_TOPOLOGY);

    let mut sensors = Vec::with_capacity(cfg.total_nodes() as usize);
    for n in 0..cfg.num_networks {
        for _ in 0..cfg.nodes_per_network {
            let pos = place_in_range(&bounds, center, cfg.range_m, &mut rng);
            sensors.push(FlowSensor::new(NetworkId(n), pos, cfg.is_mobile(n)));
        }
    }

    // Spread each group over the networks: the k-th sender goes to group
    // k mod G, in network (k div G) mod N, or the next one with room.
    let npn = cfg.nodes_per_network as usize;
    let mut used = vec![0usize; cfg.num_networks as usize];
    let mut senders = Vec::with_capacity(cfg.active_senders() as usize);
    for k in 0..cfg.active_senders() {
        let group = k % cfg.num_groups;
        let first = (k / cfg.num_groups) % cfg.num_networks;
        let network = (0..cfg.num_networks)
            .map(|d| (first + d) % cfg.num_networks)
            .find(|&n| used[n as usize] < npn)
            .ok_or(ConfigError::Invalid {
                field: "nodes_per_group",
                reason: "not enough sensors for the requested groups".into(),
            })?;
        let slot = &mut used[network as usize];
        senders.push(Sender {
            sensor: network as usize * npn + *slot,
            group,
            label: group_label(group),
        });
        *slot += 1;
    }

    let sink_ids: Vec<SinkId> = (0..cfg.num_networks)
        .map(|n| SinkId::new(n, NetworkId(n)))
        .collect();
    let sinks = LogicalSink::new(&sink_ids, cfg.ring_bits).map_err(|e| match e {
        SinkError::Ring(err) => SimError::Config(ConfigError::Invalid {
            field: "ring_bits",
            reason: err.to_string(),
        }),
        other => other.into(),
    })?;

    Ok(SimWorld {
        cfg: cfg.clone(),
        sensors,
        sinks,
        gateways: vec![center; cfg.num_networks as usize],
        bounds,
        senders,
    })
}

fn place_in_range(bounds: &Bounds, gateway: Position, range: f64, rng: &mut ChaCha8Rng) -> Position {
    loop {
        let p = Position::new(
            rng.gen_range(bounds.min_x..=bounds.max_x),
            rng.gen_range(bounds.min_y..=bounds.max_y),
        );
        if p.distance(&gateway) <= range {
            return p;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketOutcome {
    InFlight,
    Delivered { at_ns: u64 },
    DroppedQueue,
    LostChannel,
}

/// Life of one data packet, kept in generation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketRecord {
    pub sender: usize,
    pub sensor: SensorId,
    pub network: u32,
    /// 0-based group number.
    pub group: u32,
    pub seq: u64,
    pub created_ns: u64,
    pub size_bytes: u32,
    pub depart_ns: Option<u64>,
    /// Sender was out of range when the transmission finished.
    pub relayed: bool,
    pub outcome: PacketOutcome,
}

impl PacketRecord {
    pub fn delay_ns(&self) -> Option<u64> {
        match self.outcome {
            PacketOutcome::Delivered { at_ns } => Some(at_ns - self.created_ns),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Collect `time,event,group,sensor,seq,delay` lines.
    pub trace: bool,
    /// Keep every [`PacketRecord`].
    pub records: bool,
    /// Serialize all sink states at the end.
    pub dump_state: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    /// Trace text including its header line; empty unless requested.
    pub trace: String,
    pub records: Vec<PacketRecord>,
    pub state_dump: String,
}

pub const TRACE_HEADER: &str = "time,event,group,sensor,seq,delay";

struct SenderState {
    joined: bool,
    context: Option<ContextId>,
    gap_ns: f64,
    start_ns: u64,
}

pub struct Simulator {
    world: SimWorld,
    queue: EventQueue,
    channels: Vec<Channel>,
    /// Record index of each packet held by the matching channel.
    channel_records: Vec<VecDeque<usize>>,
    records: Vec<PacketRecord>,
    stats: Vec<GroupStats>,
    senders: Vec<SenderState>,
    loss_rng: ChaCha8Rng,
    mobility_rng: ChaCha8Rng,
    trace: Option<String>,
    pending_joins: usize,
    max_hops: u32,
    formed_new: u32,
    joined_existing: u32,
    join_done_ns: u64,
    generating: usize,
    traffic_end_ns: u64,
}

impl Simulator {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, SimError> {
        let world = build_topology(cfg)?;
        let channel_count = match cfg.channel_scope {
            ChannelScope::Shared => 1,
            ChannelScope::PerNetwork => cfg.num_networks as usize,
        };
        let channels = (0..channel_count)
            .map(|i| {
                let network = match cfg.channel_scope {
                    ChannelScope::Shared => None,
                    ChannelScope::PerNetwork => Some(i as u32),
                };
                Channel::new(network, cfg.queue_capacity_pkts as usize, cfg.data_rate_bps)
            })
            .collect();
        let gap_ns = 1e9 / cfg.flow_rate_pps;
        Ok(Self {
            senders: world
                .senders
                .iter()
                .map(|_| SenderState {
                    joined: false,
                    context: None,
                    gap_ns,
                    start_ns: 0,
                })
                .collect(),
            world,
            queue: EventQueue::new(),
            channels,
            channel_records: vec![VecDeque::new(); channel_count],
            records: Vec::new(),
            stats: Vec::new(),
            loss_rng: stream_rng(cfg.seed, STREAM_LOSS),
            mobility_rng: stream_rng(cfg.seed, STREAM_MOBILITY),
            trace: None,
            pending_joins: 0,
            max_hops: 0,
            formed_new: 0,
            joined_existing: 0,
            join_done_ns: 0,
            generating: 0,
            traffic_end_ns: 0,
        })
    }

    pub fn world(&self) -> &SimWorld {
        &self.world
    }

    pub fn now_ns(&self) -> u64 {
        self.queue.now_ns()
    }

    fn cfg(&self) -> &ScenarioConfig {
        &self.world.cfg
    }

    /// Resolves every sender's context id and lets the sinks converge.
    pub fn run_join_phase(&mut self) -> Result<(), SimError> {
        let mut rng = stream_rng(self.cfg().seed, STREAM_JOIN);
        for sender in 0..self.senders.len() {
            let at = rng.gen_range(0..JOIN_JITTER_NS);
            self.queue.schedule(at, EventKind::JoinStart { sender })?;
        }
        self.pending_joins = self.senders.len();
        while let Some(ev) = self.queue.pop() {
            self.dispatch(ev)?;
        }
        if self.pending_joins != 0 {
            return Err(SimError::Internal(format!(
                "{} senders never joined",
                self.pending_joins
            )));
        }
        if !self.world.sinks.is_quiescent() || !self.world.sinks.converged() {
            return Err(SimError::Internal("sinks did not converge after joining".into()));
        }
        for s in self.world.sinks.sinks() {
            s.check_invariants().map_err(SimError::Internal)?;
        }

        // Group numbers follow the configured labels; each must map to one id.
        let mut ids: BTreeMap<u32, ContextId> = BTreeMap::new();
        for (i, s) in self.world.senders.iter().enumerate() {
            let id = self.senders[i]
                .context
                .ok_or_else(|| SimError::Internal("sender without context".into()))?;
            if *ids.entry(s.group).or_insert(id) != id {
                return Err(SimError::Internal(format!(
                    "group {} split across contexts",
                    s.group + 1
                )));
            }
        }
        let distinct: BTreeSet<ContextId> = ids.values().copied().collect();
        if distinct.len() != ids.len() {
            return Err(SimError::Internal("two groups share a context".into()));
        }
        self.stats = ids.values().map(|&id| GroupStats::new(id)).collect();
        self.join_done_ns = self.queue.now_ns();
        Ok(())
    }

    /// Generates all data traffic and drains the network.
    pub fn run_traffic_phase(&mut self) -> Result<(), SimError> {
        let start = self.join_done_ns;
        self.traffic_end_ns = start + secs_to_ns(self.cfg().duration_s);
        let mut rng = stream_rng(self.cfg().seed, STREAM_PHASE);
        for sender in 0..self.senders.len() {
            let gap = self.senders[sender].gap_ns;
            let phase = rng.gen_range(0..(gap.ceil() as u64).max(1));
            self.senders[sender].start_ns = start + phase;
            if self.senders[sender].start_ns <= self.traffic_end_ns {
                self.generating += 1;
                self.queue.schedule(start + phase, EventKind::Generate { sender, k: 0 })?;
            }
        }
        let cfg = self.cfg();
        let moves = cfg.mobility_speed_mps > 0.0
            && self.world.sensors.iter().any(FlowSensor::is_mobile)
            && self.generating > 0;
        if moves {
            let step = secs_to_ns(cfg.mobility_step_s);
            self.queue.schedule(start + step, EventKind::MobilityStep)?;
        }
        while let Some(ev) = self.queue.pop() {
            self.dispatch(ev)?;
        }
        self.check_conservation()
    }

    fn dispatch(&mut self, ev: Event) -> Result<(), SimError> {
        match ev.kind {
            EventKind::JoinStart { sender } => self.on_join_start(sender),
            EventKind::ResolutionRequest { sender } => self.on_resolution_request(sender),
            EventKind::ResolutionReply { sender, resolution } => {
                let sensor = self.world.senders[sender].sensor;
                let outcome = self.world.sensors[sensor].apply_resolution(&resolution);
                match outcome {
                    crate::sensor::JoinOutcome::FormedNew(_) => self.formed_new += 1,
                    crate::sensor::JoinOutcome::JoinedExisting(_) => self.joined_existing += 1,
                }
                let st = &mut self.senders[sender];
                if !st.joined {
                    st.joined = true;
                    self.pending_joins -= 1;
                }
                st.context = Some(outcome.context_id());
                Ok(())
            }
            EventKind::SinkSync { to, update } => {
                self.world.sinks.deliver(to, &update)?;
                Ok(())
            }
            EventKind::Generate { sender, k } => self.on_generate(sender, k),
            EventKind::ChannelTxDone { channel } => self.on_tx_done(channel),
            EventKind::Deliver { record } => self.on_deliver(record),
            EventKind::MobilityStep => self.on_mobility(),
        }
    }

    fn on_join_start(&mut self, sender: usize) -> Result<(), SimError> {
        let s = &self.world.senders[sender];
        let pkt = Packet {
            seq: 0,
            fields: MatchFields::new(None, s.label.clone(), DATA_PORT),
            size_bytes: self.world.cfg.packet_size_bytes,
            created_at_ns: self.queue.now_ns(),
            sender: None,
            group: None,
        };
        match self.world.sensors[s.sensor].process_packet(pkt) {
            SensorAction::ForwardToSink { .. } => {}
            SensorAction::Drop(r) => {
                return Err(SimError::Internal(format!("join packet dropped: {r:?}")))
            }
        }
        let prop = secs_to_ns(self.cfg().prop_delay_s);
        self.queue
            .schedule_in(prop, EventKind::ResolutionRequest { sender })
    }

    fn on_resolution_request(&mut self, sender: usize) -> Result<(), SimError> {
        let sensor = self.world.senders[sender].sensor;
        let contact = self.world.sink_of(sensor);
        let req = self.world.sensors[sensor]
            .join_request()
            .map_err(|e| SimError::Internal(format!("join request: {e}")))?;
        let resolution = self
            .world
            .sinks
            .resolve_flow(contact, req.sensor, req.flow_id, &req.key)?;
        self.max_hops = self.max_hops.max(resolution.overlay_hops);
        let link = secs_to_ns(self.cfg().sink_link_delay_s);
        let prop = secs_to_ns(self.cfg().prop_delay_s);
        for (to, update) in self.world.sinks.collect_outgoing() {
            self.queue.schedule_in(link, EventKind::SinkSync { to, update })?;
        }
        let back = u64::from(resolution.overlay_hops) * link + prop;
        self.queue
            .schedule_in(back, EventKind::ResolutionReply { sender, resolution })
    }

    fn channel_for(&self, sensor: usize) -> usize {
        match self.cfg().channel_scope {
            ChannelScope::Shared => 0,
            ChannelScope::PerNetwork => self.world.sensors[sensor].network.0 as usize,
        }
    }

    fn on_generate(&mut self, sender: usize, k: u64) -> Result<(), SimError> {
        let now = self.queue.now_ns();
        let info = &self.world.senders[sender];
        let (sensor_idx, group) = (info.sensor, info.group);
        let sensor = &mut self.world.sensors[sensor_idx];
        let sensor_id = sensor
            .sensor_id
            .ok_or_else(|| SimError::Internal("data before sensor id".into()))?;
        let pkt = Packet {
            seq: k,
            fields: MatchFields::new(Some(sensor_id), info.label.clone(), DATA_PORT),
            size_bytes: self.world.cfg.packet_size_bytes,
            created_at_ns: now,
            sender: Some(sensor_id),
            group: self.senders[sender].context,
        };
        let pkt = match sensor.offer(pkt) {
            Offer::Action(SensorAction::ForwardToSink { pkt, .. }) => pkt,
            other => {
                return Err(SimError::Internal(format!(
                    "data packet not forwarded: {other:?}"
                )))
            }
        };

        let record = self.records.len();
        let network = sensor.network.0;
        self.records.push(PacketRecord {
            sender,
            sensor: sensor_id,
            network,
            group,
            seq: k,
            created_ns: now,
            size_bytes: pkt.size_bytes,
            depart_ns: None,
            relayed: false,
            outcome: PacketOutcome::InFlight,
        });
        self.stats[group as usize].record_tx();

        let ch = self.channel_for(sensor_idx);
        match self.channels[ch].send(pkt, now)? {
            SendOutcome::Enqueued { depart_ns } => {
                self.records[record].depart_ns = Some(depart_ns);
                self.channel_records[ch].push_back(record);
                self.queue.schedule(depart_ns, EventKind::ChannelTxDone { channel: ch })?;
            }
            SendOutcome::DroppedQueueFull => {
                self.records[record].outcome = PacketOutcome::DroppedQueue;
                self.stats[group as usize].lost_queue += 1;
                self.trace_line(now, "drop_queue", record, None);
            }
        }

        let next = k + 1;
        let st = &self.senders[sender];
        let at = st.start_ns + (next as f64 * st.gap_ns).round() as u64;
        if next < self.world.cfg.total_packets && at <= self.traffic_end_ns {
            self.queue.schedule(at, EventKind::Generate { sender, k: next })?;
        } else {
            self.generating -= 1;
        }
        Ok(())
    }

    fn on_tx_done(&mut self, ch: usize) -> Result<(), SimError> {
        let now = self.queue.now_ns();
        self.channels[ch].complete(now)?;
        let record = self.channel_records[ch]
            .pop_front()
            .ok_or_else(|| SimError::Internal("channel bookkeeping out of sync".into()))?;
        let sensor = self.records[record].sender;
        let sensor = self.world.senders[sensor].sensor;
        let in_range = self.world.in_range(sensor);
        let p = if in_range {
            self.world.cfg.base_loss_prob
        } else {
            self.world.cfg.out_of_range_loss_prob
        };
        // One draw per transmitted packet whatever p is, so runs that only
        // differ in loss probability see the same uniforms.
        let u: f64 = self.loss_rng.gen();
        let group = self.records[record].group as usize;
        self.records[record].relayed = !in_range;
        if u < p {
            self.records[record].outcome = PacketOutcome::LostChannel;
            self.stats[group].lost_channel += 1;
            self.trace_line(now, "drop_channel", record, None);
            return Ok(());
        }
        let mut delay = secs_to_ns(self.world.cfg.prop_delay_s);
        if !in_range {
            delay += secs_to_ns(self.world.cfg.sink_link_delay_s);
        }
        self.queue.schedule_in(delay, EventKind::Deliver { record })
    }

    fn on_deliver(&mut self, record: usize) -> Result<(), SimError> {
        let now = self.queue.now_ns();
        let rec = &mut self.records[record];
        if rec.outcome != PacketOutcome::InFlight {
            return Err(SimError::Internal(format!("packet {record} delivered twice")));
        }
        rec.outcome = PacketOutcome::Delivered { at_ns: now };
        let delay = now
            .checked_sub(rec.created_ns)
            .ok_or_else(|| SimError::Internal("delivery before creation".into()))?;
        self.stats[rec.group as usize].record_rx_ns(delay);
        self.trace_line(now, "deliver", record, Some(delay));
        Ok(())
    }

    fn on_mobility(&mut self) -> Result<(), SimError> {
        let cfg = &self.world.cfg;
        let (speed, dt) = (cfg.mobility_speed_mps, cfg.mobility_step_s);
        for sensor in self.world.sensors.iter_mut().filter(|s| s.is_mobile()) {
            step_mobility(sensor, speed, dt, &self.world.bounds, &mut self.mobility_rng)?;
        }
        if self.generating > 0 {
            self.queue
                .schedule_in(secs_to_ns(dt), EventKind::MobilityStep)?;
        }
        Ok(())
    }

    fn trace_line(&mut self, now: u64, event: &str, record: usize, delay: Option<u64>) {
        let Some(out) = self.trace.as_mut() else {
            return;
        };
        let r = &self.records[record];
        let delay = delay
            .map(|d| format!("{:.9}", d as f64 / 1e9))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{:.9},{},{},{},{},{}",
            now as f64 / 1e9,
            event,
            r.group + 1,
            r.sensor,
            r.seq,
            delay
        );
    }

    fn check_conservation(&self) -> Result<(), SimError> {
        for (g, s) in self.stats.iter().enumerate() {
            let in_flight = self
                .records
                .iter()
                .filter(|r| r.group as usize == g && r.outcome == PacketOutcome::InFlight)
                .count() as u64;
            if s.tx_count != s.rx_count + s.lost_queue + s.lost_channel + in_flight {
                return Err(SimError::Internal(format!(
                    "group {} does not conserve packets",
                    g + 1
                )));
            }
            if in_flight != 0 {
                return Err(SimError::Internal(format!(
                    "group {} has {in_flight} packets in flight after draining",
                    g + 1
                )));
            }
        }
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let mut totals = Totals::default();
        let mut groups = Vec::with_capacity(self.stats.len());
        for (g, s) in self.stats.iter().enumerate() {
            totals.generated += s.tx_count;
            totals.received += s.rx_count;
            totals.lost_queue += s.lost_queue;
            totals.lost_channel += s.lost_channel;
            let members = self
                .world
                .senders
                .iter()
                .filter(|x| x.group as usize == g)
                .count() as u32;
            groups.push(GroupReport::from_stats(g as u32 + 1, members, s));
        }
        totals.in_flight = totals.generated - totals.received - totals.lost_queue - totals.lost_channel;
        let contexts: BTreeSet<ContextId> = self.stats.iter().map(|s| s.group).collect();
        MetricsReport {
            seed: self.world.cfg.seed,
            config: self.world.cfg.clone(),
            groups,
            totals,
            join: JoinSummary {
                contexts: contexts.len() as u32,
                formed_new: self.formed_new,
                joined_existing: self.joined_existing,
                max_overlay_hops: self.max_hops,
                completed_at_s: self.join_done_ns as f64 / 1e9,
            },
        }
    }

    pub fn records(&self) -> &[PacketRecord] {
        &self.records
    }
}

pub fn run(cfg: &ScenarioConfig) -> Result<MetricsReport, SimError> {
    Ok(run_with(cfg, RunOptions::default())?.report)
}

pub fn run_with(cfg: &ScenarioConfig, opts: RunOptions) -> Result<RunOutput, SimError> {
    let mut sim = Simulator::new(cfg)?;
    if opts.trace {
        sim.trace = Some(format!("{TRACE_HEADER}\n"));
    }
    sim.run_join_phase()?;
    sim.run_traffic_phase()?;
    let report = sim.report();
    let state_dump = if opts.dump_state {
        sim.world.sinks.dump_state()
    } else {
        String::new()
    };
    Ok(RunOutput {
        report,
        trace: sim.trace.take().unwrap_or_default(),
        records: if opts.records {
            std::mem::take(&mut sim.records)
        } else {
            Vec::new()
        },
        state_dump,
    })
}
