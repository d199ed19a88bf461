//! Exhaustive exploration of the join protocol at small scale.
//!
//! Sensors, sinks and bounded FIFO channels between them form a finite
//! transition system. Every interleaving of enabled steps is explored and
//! each reachable state is checked: no state may be stuck before every
//! sensor holds a context id, the state graph must be acyclic (so every run
//! terminates), and terminal states must agree on the registries.

use std::collections::{HashMap, VecDeque};

use crate::model::{ContextKey, MatchFields, NetworkId, Packet};
use crate::sensor::{FlowSensor, JoinRequest, Position, SensorAction};
use crate::sink::{LogicalSink, Resolution, SinkId, SyncUpdate};

#[derive(Debug, Clone)]
pub struct ExploreConfig {
    /// Context label of each sensor.
    pub labels: Vec<String>,
    /// Contact sink index of each sensor.
    pub contact: Vec<u32>,
    pub sinks: u32,
    /// Capacity of every sink-to-sink channel.
    pub channel_capacity: usize,
    /// Sinks answer misses by minting locally instead of asking the ring,
    /// which produces concurrent definitions of one key.
    pub local_definitions: bool,
    pub ring_bits: u32,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        Self {
            labels: vec!["alarm".into(), "alarm".into()],
            contact: vec![0, 1],
            sinks: 2,
            channel_capacity: 4,
            local_definitions: false,
            ring_bits: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct State {
    sinks: LogicalSink,
    sensors: Vec<FlowSensor>,
    /// Sensor-to-sink request slot per sensor (capacity one).
    requests: Vec<Option<JoinRequest>>,
    /// Sink-to-sensor reply slot per sensor.
    replies: Vec<Option<Resolution>>,
    requested: Vec<bool>,
    /// `links[from * n + to]`, FIFO.
    links: Vec<VecDeque<SyncUpdate>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    SendRequest(usize),
    Resolve(usize),
    Reply(usize),
    Sync { from: usize, to: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExploreReport {
    pub states: usize,
    pub transitions: usize,
    pub terminal_states: usize,
    /// Stuck states in which some sensor still lacks a context id.
    pub deadlocks: usize,
    pub cycle: bool,
    /// Terminal-state violations, with a description of each.
    pub violations: Vec<String>,
}

impl ExploreReport {
    pub fn ok(&self) -> bool {
        self.deadlocks == 0 && !self.cycle && self.violations.is_empty() && self.terminal_states > 0
    }
}

struct Explorer<'a> {
    cfg: &'a ExploreConfig,
    keys: Vec<ContextKey>,
}

impl Explorer<'_> {
    fn initial(&self) -> Result<State, String> {
        let ids: Vec<SinkId> = (0..self.cfg.sinks)
            .map(|i| SinkId::new(i, NetworkId(i)))
            .collect();
        let sinks = LogicalSink::new(&ids, self.cfg.ring_bits).map_err(|e| e.to_string())?;
        let mut sensors = Vec::new();
        for (i, label) in self.cfg.labels.iter().enumerate() {
            let mut s = FlowSensor::new(NetworkId(self.cfg.contact[i]), Position::new(0.0, 0.0), false);
            let pkt = Packet {
                seq: 0,
                fields: MatchFields::new(None, label.clone(), 1),
                size_bytes: 64,
                created_at_ns: 0,
                sender: None,
                group: None,
            };
            if let SensorAction::Drop(r) = s.process_packet(pkt) {
                return Err(format!("sensor {i} dropped its flow packet: {r:?}"));
            }
            sensors.push(s);
        }
        let n = self.cfg.labels.len();
        let links = (self.cfg.sinks * self.cfg.sinks) as usize;
        Ok(State {
            sinks,
            sensors,
            requests: vec![None; n],
            replies: vec![None; n],
            requested: vec![false; n],
            links: vec![VecDeque::new(); links],
        })
    }

    fn enabled(&self, st: &State) -> Vec<Step> {
        let mut steps = Vec::new();
        let n = self.cfg.sinks as usize;
        for i in 0..st.sensors.len() {
            if !st.requested[i] {
                steps.push(Step::SendRequest(i));
            }
            if st.requests[i].is_some() && self.resolve_fits(st, i) {
                steps.push(Step::Resolve(i));
            }
            if st.replies[i].is_some() {
                steps.push(Step::Reply(i));
            }
        }
        for from in 0..n {
            for to in 0..n {
                if !st.links[from * n + to].is_empty() {
                    steps.push(Step::Sync { from, to });
                }
            }
        }
        steps
    }

    /// A sink only handles a request if its outgoing updates fit the links.
    fn resolve_fits(&self, st: &State, sensor: usize) -> bool {
        let mut probe = st.clone();
        let Ok(updates) = self.resolve(&mut probe, sensor) else {
            return true;
        };
        let n = self.cfg.sinks as usize;
        (0..n * n).all(|l| {
            let added = updates.iter().filter(|(from, to, _)| from * n + to == l).count();
            st.links[l].len() + added <= self.cfg.channel_capacity
        })
    }

    /// Runs the sink side of a request; returns the updates to send.
    fn resolve(&self, st: &mut State, sensor: usize) -> Result<Vec<(usize, usize, SyncUpdate)>, String> {
        let req = st.requests[sensor].take().ok_or("no request")?;
        let contact = SinkId::new(self.cfg.contact[sensor], NetworkId(self.cfg.contact[sensor]));
        let res = if self.cfg.local_definitions {
            let sink = st.sinks.sink_mut(contact).map_err(|e| e.to_string())?;
            let (id, fresh) = match sink.local_context(&req.key) {
                Some(id) => (id, false),
                None => (sink.define_context(&req.key), true),
            };
            let sensor_id = req.sensor.unwrap_or_else(|| sink.allocate_sensor_id());
            sink.bind(sensor_id, req.flow_id, &req.key, id);
            Resolution {
                context_id: sink.canonical(id),
                sensor_id,
                newly_defined: fresh,
                overlay_hops: 0,
                answered_by: contact,
            }
        } else {
            st.sinks
                .resolve_flow(contact, req.sensor, req.flow_id, &req.key)
                .map_err(|e| e.to_string())?
        };
        st.replies[sensor] = Some(res);
        Ok(st
            .sinks
            .collect_outgoing()
            .into_iter()
            .map(|(to, u)| (u.origin.index as usize, to.index as usize, u))
            .collect())
    }

    fn apply(&self, st: &State, step: Step) -> Result<State, String> {
        let mut next = st.clone();
        let n = self.cfg.sinks as usize;
        match step {
            Step::SendRequest(i) => {
                next.requests[i] = Some(next.sensors[i].join_request().map_err(|e| e.to_string())?);
                next.requested[i] = true;
            }
            Step::Resolve(i) => {
                for (from, to, u) in self.resolve(&mut next, i)? {
                    next.links[from * n + to].push_back(u);
                }
            }
            Step::Reply(i) => {
                let res = next.replies[i].take().ok_or("no reply")?;
                next.sensors[i].apply_resolution(&res);
            }
            Step::Sync { from, to } => {
                let u = next.links[from * n + to].pop_front().ok_or("empty link")?;
                next.sinks
                    .deliver(SinkId::new(to as u32, NetworkId(to as u32)), &u)
                    .map_err(|e| e.to_string())?;
            }
        }
        Ok(next)
    }

    fn check_terminal(&self, st: &State) -> Vec<String> {
        let mut problems = Vec::new();
        if !st.sinks.converged() {
            problems.push("sinks disagree at quiescence".to_string());
        }
        for s in st.sinks.sinks() {
            if let Err(e) = s.check_invariants() {
                problems.push(format!("sink {}: {e}", s.id()));
            }
        }
        for (i, sensor) in st.sensors.iter().enumerate() {
            let Some(ctx) = sensor.context_id else {
                problems.push(format!("sensor {i} finished without a context id"));
                continue;
            };
            for s in st.sinks.sinks() {
                if s.local_context(&self.keys[i]) != Some(s.canonical(ctx)) {
                    problems.push(format!(
                        "sensor {i} holds {ctx}, which sink {} does not map to its key",
                        s.id()
                    ));
                }
            }
        }
        problems
    }
}

/// Explores every interleaving reachable from the initial state.
pub fn explore(cfg: &ExploreConfig) -> Result<ExploreReport, String> {
    if cfg.labels.len() != cfg.contact.len() {
        return Err("labels and contact sinks differ in length".into());
    }
    let keys = cfg
        .labels
        .iter()
        .map(|l| crate::model::normalize_label(l).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let ex = Explorer { cfg, keys };
    let mut report = ExploreReport::default();

    // Iterative DFS; `on_stack` detects back edges, i.e. cycles.
    let mut index: HashMap<State, usize> = HashMap::new();
    let mut on_stack: Vec<bool> = Vec::new();
    let root = ex.initial()?;
    index.insert(root.clone(), 0);
    on_stack.push(true);
    let mut stack: Vec<(State, usize, Vec<Step>, usize)> = Vec::new();
    let steps = ex.enabled(&root);
    stack.push((root, 0, steps, 0));

    while let Some(top) = stack.last_mut() {
        let (state, id, steps, next) = top;
        if *next == steps.len() {
            if steps.is_empty() {
                let done = state.sensors.iter().all(|s| s.context_id.is_some());
                if done {
                    report.terminal_states += 1;
                    for p in ex.check_terminal(state) {
                        report.violations.push(p);
                    }
                } else {
                    report.deadlocks += 1;
                }
            }
            on_stack[*id] = false;
            stack.pop();
            continue;
        }
        let step = steps[*next];
        *next += 1;
        let succ = ex.apply(state, step)?;
        report.transitions += 1;
        match index.get(&succ) {
            Some(&seen) => {
                if on_stack[seen] {
                    report.cycle = true;
                }
            }
            None => {
                let sid = on_stack.len();
                index.insert(succ.clone(), sid);
                on_stack.push(true);
                let steps = ex.enabled(&succ);
                stack.push((succ, sid, steps, 0));
            }
        }
    }
    report.states = index.len();
    Ok(report)
}
