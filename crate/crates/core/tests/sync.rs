use flowclust::model::{normalize_label, ContextId, FlowId, NetworkId, SensorId};
use flowclust::sink::{ApplyOutcome, LogicalSink, SinkId, SubscribeOutcome, SyncUpdate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sinks(n: u32) -> Vec<SinkId> {
    (0..n).map(|i| SinkId::new(i, NetworkId(i))).collect()
}

/// Four sinks resolve a mix of keys; returns the system and every update
/// still to be delivered.
fn busy_system() -> (LogicalSink, Vec<(SinkId, SyncUpdate)>) {
    let ids = sinks(4);
    let mut ls = LogicalSink::new(&ids, 32).unwrap();
    let keys = ["alpha", "beta", "gamma", "alpha", "delta", "beta", "gamma", "gamma"];
    for (i, k) in keys.iter().enumerate() {
        let key = normalize_label(k).unwrap();
        ls.resolve_flow(ids[i % 4], None, FlowId(i as u64 + 1), &key)
            .unwrap();
    }
    let pending = ls.collect_outgoing();
    (ls, pending)
}

#[test]
fn delivery_order_does_not_matter() {
    let (base, pending) = busy_system();
    assert!(!pending.is_empty());
    let mut reference: Option<Vec<String>> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let mut ls = base.clone();
        let mut order = pending.clone();
        order.shuffle(&mut rng);
        for (to, u) in &order {
            ls.deliver(*to, u).unwrap();
        }
        assert!(ls.converged());
        let states: Vec<String> = ls.sinks().iter().map(|s| s.serialize_replicated()).collect();
        match &reference {
            None => reference = Some(states),
            Some(r) => assert_eq!(&states, r),
        }
    }
}

#[test]
fn replayed_updates_are_duplicates() {
    let (mut ls, pending) = busy_system();
    for (to, u) in &pending {
        assert_eq!(ls.deliver(*to, u).unwrap(), ApplyOutcome::Applied);
    }
    let snapshot = ls.clone();
    for (to, u) in &pending {
        assert_eq!(ls.deliver(*to, u).unwrap(), ApplyOutcome::Duplicate);
    }
    assert_eq!(ls, snapshot);
}

#[test]
fn registry_is_a_bijection_after_quiescence() {
    let (mut ls, pending) = busy_system();
    for (to, u) in &pending {
        ls.deliver(*to, u).unwrap();
    }
    for s in ls.sinks() {
        let ids: std::collections::BTreeSet<ContextId> = s.registry().values().copied().collect();
        assert_eq!(ids.len(), s.registry().len());
        assert_eq!(s.registry().len(), 4);
        s.check_invariants().unwrap();
    }
}

#[test]
fn publish_then_remote_subscribe() {
    let ids = sinks(2);
    let mut ls = LogicalSink::new(&ids, 32).unwrap();
    let key = normalize_label("noise").unwrap();
    let owner_res = ls.resolve_flow(ids[0], None, FlowId(1), &key).unwrap();
    let remote = ls.resolve_flow(ids[1], None, FlowId(2), &normalize_label("light").unwrap()).unwrap();
    ls.quiesce();

    let before = ls.sinks()[0]
        .group_table()
        .members(owner_res.context_id)
        .map_or(0, |m| m.len());
    let outcome = ls.subscribe(ids[1], remote.sensor_id, owner_res.context_id).unwrap();
    assert_eq!(outcome, SubscribeOutcome::Subscribed);
    ls.quiesce();
    assert!(ls.converged());
    for s in ls.sinks() {
        let members = s.group_table().members(owner_res.context_id).unwrap();
        assert_eq!(members.len(), before + 1);
        assert!(members.contains(&remote.sensor_id));
    }

    // An id nobody minted or published is refused.
    let bogus = ContextId((7u64 << 40) | 99);
    assert_eq!(
        ls.subscribe(ids[1], remote.sensor_id, bogus).unwrap(),
        SubscribeOutcome::UnknownContext
    );
}

#[test]
fn subscribe_requires_registered_sensor() {
    let ids = sinks(2);
    let mut ls = LogicalSink::new(&ids, 32).unwrap();
    let r = ls
        .resolve_flow(ids[0], None, FlowId(1), &normalize_label("a").unwrap())
        .unwrap();
    assert!(ls.subscribe(ids[0], SensorId(12345), r.context_id).is_err());
}

#[test]
fn racing_definitions_converge_on_lower_id() {
    let ids = sinks(3);
    let key = normalize_label("smoke").unwrap();
    let mut reference = None;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..30 {
        let mut ls = LogicalSink::new(&ids, 32).unwrap();
        let minted: Vec<ContextId> = ids
            .iter()
            .map(|&s| ls.sink_mut(s).unwrap().define_context(&key))
            .collect();
        let winner = *minted.iter().min().unwrap();
        let mut pending = ls.collect_outgoing();
        pending.shuffle(&mut rng);
        for (to, u) in &pending {
            ls.deliver(*to, u).unwrap();
        }
        assert!(ls.converged());
        for s in ls.sinks() {
            assert_eq!(s.local_context(&key), Some(winner));
            for &loser in minted.iter().filter(|&&m| m != winner) {
                assert_eq!(s.canonical(loser), winner);
            }
        }
        let state = ls.sinks()[0].serialize_replicated();
        match &reference {
            None => reference = Some(state),
            Some(r) => assert_eq!(&state, r),
        }
    }
}
