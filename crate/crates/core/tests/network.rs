mod common;

use std::collections::BTreeSet;

use common::*;
use rentledger_core::consensus::{
    create_network, GenesisSpec, LatencyConfig, Mode, NetworkConfig, NetworkError, NodeRef, Partition, TraceKind,
};
use rentledger_core::keys::Signature;
use rentledger_core::whisper::{seal_envelope, Topic, TopicKey};

fn latency(min: u64, max: u64) -> NetworkConfig {
    NetworkConfig {
        latency: LatencyConfig {
            min,
            max,
            overrides: Vec::new(),
        },
        ..NetworkConfig::default()
    }
}

#[test]
fn genesis_is_shared_and_reproducible() {
    let a = network(4, &[1, 2], 500, NetworkConfig::default());
    let b = network(4, &[1, 2], 500, NetworkConfig::default());
    assert_eq!(a.nodes().len(), 4);
    assert!(a.heads_agree());
    assert_eq!(a.canonical_head().0, 0);
    assert_eq!(a.genesis_digest(), b.genesis_digest());
    assert_eq!(a.nodes()[0].state().total_supply(), 1000);
    let empty = create_network(NetworkConfig::default(), GenesisSpec::default(), Vec::new());
    assert!(matches!(empty, Err(NetworkError::EmptyValidatorSet)));
}

#[test]
fn proposers_rotate_in_address_order() {
    let mut net = network(4, &[1], 1_000, NetworkConfig::default());
    for i in 0..8u64 {
        send(&mut net, (i % 4) as usize, 1, 2, 1);
        net.run_until_quiescent(100).unwrap();
    }
    let mut sorted = net.node_ids();
    sorted.sort();
    let chain = net.nodes()[0].chain();
    assert_eq!(chain.len(), 9);
    for b in &chain[1..] {
        assert_eq!(b.proposer, sorted[(b.height % 4) as usize], "height {}", b.height);
    }
}

#[test]
fn gossip_arrives_after_pairwise_latency() {
    let mut net = network(4, &[1], 1_000, latency(2, 2));
    let origin = node(&net, 0);
    let digest = transfer(&mut net, origin, 1, 2, 5);
    let holders = |net: &rentledger_core::consensus::Network| {
        net.nodes().iter().filter(|n| n.has_pending(&digest) || included(net, n.id).contains(&digest)).count()
    };
    net.advance_tick();
    assert_eq!(holders(&net), 1);
    net.advance_tick();
    assert_eq!(holders(&net), 4);
    let gossip: Vec<_> = net.trace().iter().filter(|e| e.kind == TraceKind::TxGossip).collect();
    assert_eq!(gossip.len(), 3);
    assert!(gossip.iter().all(|e| e.tick == 2 && e.peer == Some(origin)));
}

#[test]
fn unknown_node_is_refused() {
    let mut net = network(2, &[1], 1_000, NetworkConfig::default());
    let tx = signed(&net, node(&net, 0), 1, rentledger_core::ledger::ContractCall::PlainTransfer { to: addr(2), amount: 1 }, 1);
    assert!(matches!(net.submit_transaction(addr(77), tx), Err(NetworkError::UnknownNode(_))));
}

#[test]
fn partition_blocks_gossip_until_heal() {
    let mut config = latency(1, 1);
    config.partitions = vec![Partition {
        group: vec![NodeRef::Index(0)],
        start: 0,
        end: 10,
    }];
    let mut net = network(3, &[1], 1_000, config);
    let isolated = node(&net, 0);
    let digest = transfer(&mut net, isolated, 1, 2, 5);
    net.run_ticks(9);
    for n in &net.nodes()[1..] {
        assert!(!n.has_pending(&digest) && !included(&net, n.id).contains(&digest));
    }
    net.run_until_quiescent(100).unwrap();
    assert!(net.heads_agree());
    for n in net.nodes() {
        assert!(included(&net, n.id).contains(&digest));
    }
}

#[test]
fn runs_are_deterministic() {
    let run = || {
        let mut net = network(5, &[1, 2, 3], 10_000, latency(1, 3));
        for i in 0..60u64 {
            let from = 1 + i % 3;
            send(&mut net, (i % 5) as usize, from, 1 + (i + 1) % 3, i + 1);
            if i % 7 == 0 {
                net.advance_tick();
            }
        }
        net.run_until_quiescent(1_000).unwrap();
        (net.take_trace(), net.canonical_head())
    };
    let (ta, ha) = run();
    let (tb, hb) = run();
    assert_eq!(ha, hb);
    assert_eq!(ta, tb);
}

#[test]
fn quiescent_network_agrees_and_keeps_every_tx() {
    let mut net = network(5, &[1, 2, 3, 4], 10_000, latency(1, 3));
    let mut submitted = BTreeSet::new();
    for i in 0..200u64 {
        let from = 1 + i % 4;
        submitted.insert(send(&mut net, (i % 5) as usize, from, 1 + (i + 2) % 4, 3));
        if i % 5 == 4 {
            net.advance_tick();
        }
    }
    net.run_until_quiescent(2_000).unwrap();
    assert!(net.heads_agree());
    let on_chain: BTreeSet<_> = included(&net, node(&net, 0)).into_iter().collect();
    assert_eq!(on_chain, submitted);
    assert!(net.nodes().iter().all(|n| n.state().total_supply() == 40_000));
}

#[test]
fn split_network_converges_within_one_rotation() {
    let mut config = latency(1, 3);
    config.partitions = vec![Partition {
        group: vec![NodeRef::Index(0), NodeRef::Index(1)],
        start: 0,
        end: 50,
    }];
    let mut net = network(5, &[1, 2, 3, 4, 5], 10_000, config);
    let mut submitted = BTreeSet::new();
    for t in 0..50u64 {
        let i = (t % 5) as usize;
        submitted.insert(send(&mut net, i, 1 + t % 5, 1 + (t + 1) % 5, 2));
        net.advance_tick();
    }
    assert_eq!(net.now(), 50);
    assert!(!net.heads_agree());
    let rotation = 5 * net.config().block_interval;
    let mut agreed_at = None;
    for _ in 0..rotation {
        net.advance_tick();
        if net.heads_agree() {
            agreed_at = Some(net.now());
            break;
        }
    }
    assert!(agreed_at.is_some(), "no agreement within {rotation} ticks of heal");
    net.run_until_quiescent(1_000).unwrap();
    assert!(net.heads_agree());
    let on_chain: BTreeSet<_> = included(&net, node(&net, 0)).into_iter().collect();
    assert_eq!(on_chain, submitted, "orphaned transactions must be re-included");
    // One proposer per height: a split stalls the side without the next
    // proposer rather than forking.
    assert!(!net.trace().iter().any(|e| e.kind == TraceKind::ChainSwitched));
}

#[test]
fn join_modes() {
    let mut open = network(2, &[1], 100, NetworkConfig::default());
    let id = open.join_node(kp(50), None).unwrap();
    assert_eq!(open.nodes().len(), 3);
    assert!(matches!(open.join_node(kp(50), None), Err(NetworkError::AlreadyJoined(_))));
    transfer(&mut open, id, 1, 2, 1);
    open.run_until_quiescent(100).unwrap();
    assert!(open.heads_agree());

    let admin = kp(60);
    let closed_config = NetworkConfig {
        mode: Mode::Permissioned,
        admin_key: Some(admin.public_key.clone()),
        ..NetworkConfig::default()
    };
    let mut closed = network(2, &[1], 100, closed_config);
    assert!(matches!(closed.join_node(kp(51), None), Err(NetworkError::PermissionDenied)));
    let forged: Signature = kp(61).sign(&addr(51).0);
    assert!(matches!(closed.join_node(kp(51), Some(&forged)), Err(NetworkError::PermissionDenied)));
    let credential = admin.sign(&addr(51).0);
    closed.join_node(kp(51), Some(&credential)).unwrap();
    assert_eq!(closed.nodes().len(), 3);
}

#[test]
fn whisper_reaches_subscribers_only() {
    let mut net = network(3, &[1], 100, latency(1, 1));
    let topic = Topic::from_label("door");
    let key = TopicKey([7; 32]);
    let (a, b, c) = (node(&net, 0), node(&net, 1), node(&net, 2));
    net.subscribe(b, topic, key).unwrap();
    net.subscribe(c, topic, TopicKey([8; 32])).unwrap();
    let difficulty = net.config().whisper_difficulty;
    let env = seal_envelope(topic, b"open", 5, &key, difficulty, net.now()).unwrap();
    net.post_envelope(a, env).unwrap();
    net.run_ticks(1);
    assert_eq!(net.collect_messages(b).unwrap(), vec![(topic, b"open".to_vec())]);
    assert!(net.collect_messages(c).unwrap().is_empty());
    assert!(net.nodes().iter().all(|n| n.chain().len() == 1));

    let weak = seal_envelope(topic, b"spam", 5, &key, 0, net.now()).unwrap();
    if !weak.meets_difficulty(difficulty) {
        assert_eq!(net.post_envelope(a, weak).unwrap_err().code(), "InsufficientWork");
    }
}
