//! The ten acceptance criteria, one line each. Runs without the libtest
//! harness so every verdict prints even when an earlier one fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rentledger_core::consensus::{LatencyConfig, Network, NetworkConfig, NodeRef, Partition};
use rentledger_core::harness::{random_script, run_script, Action, Command, RunOptions, ScenarioScript};
use rentledger_core::iot::{authorize_command, compute_bill, CommandKind, CommandMessage, UsageEvent};
use rentledger_core::keys::Digest;
use rentledger_core::ledger::{decode_chain, verify_chain, ChainRules, ContractCall, Transaction};
use rentledger_core::market::BookingState;
use rentledger_core::persist::{chain_path, persist_state};
use rentledger_core::whisper::{seal_envelope, Topic, TopicKey};

type Verdict = Result<String, String>;

fn check(ok: bool, pass: String, fail: String) -> Verdict {
    if ok {
        Ok(pass)
    } else {
        Err(fail)
    }
}

fn spread(min: u64, max: u64) -> NetworkConfig {
    NetworkConfig {
        latency: LatencyConfig {
            min,
            max,
            overrides: Vec::new(),
        },
        ..NetworkConfig::default()
    }
}

fn conservation() -> Verdict {
    let script = random_script(2024, 1_000);
    let started = Instant::now();
    let run = run_script(&script, &RunOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let supply = run.network.genesis().genesis.as_ref().expect("genesis").supply();
    let off: Vec<String> = run
        .network
        .nodes()
        .iter()
        .filter(|n| n.state().accounts.values().map(|a| a.balance as u128 + a.locked as u128).sum::<u128>() != supply)
        .map(|n| n.id.to_string())
        .collect();
    check(
        off.is_empty() && elapsed < Duration::from_secs(10),
        format!("supply {supply} exact on every node, {} txs, {elapsed:.2?}", run.report.event_counts["submitted"]),
        format!("nodes off supply: {off:?}, elapsed {elapsed:.2?}"),
    )
}

fn tamper_detection() -> Verdict {
    let mut net = network(1, &[1], 1_000_000, NetworkConfig::default());
    for i in 0..100 {
        send(&mut net, 0, 1, 2, 1 + i);
        net.advance_tick();
    }
    net.run_until_quiescent(10).map_err(|e| e.to_string())?;
    let height = net.nodes()[0].height();
    if height != 100 {
        return Err(format!("built {height} blocks, wanted 100"));
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    persist_state(&net, dir.path()).map_err(|e| e.to_string())?;
    let clean = std::fs::read(chain_path(dir.path(), &node(&net, 0))).map_err(|e| e.to_string())?;
    let rules = ChainRules {
        validators: None,
        genesis_anchor: Some(net.genesis_digest()),
    };
    verify_chain(&decode_chain(&clean).map_err(|e| e.1)?, &rules).map_err(|e| e.to_string())?;

    let mut rng = ChaCha8Rng::seed_from_u64(0xB17);
    let mut missed = Vec::new();
    for _ in 0..500 {
        let bit = rng.gen_range(0..clean.len() * 8);
        let (byte, mask) = (bit / 8, 1u8 << (bit % 8));
        let mutated_height = clean[..byte].iter().filter(|b| **b == b'\n').count() as u64;
        let mut bytes = clean.clone();
        bytes[byte] ^= mask;
        let failed_at = match decode_chain(&bytes) {
            Err((line, _)) => Some(line as u64),
            Ok(blocks) => verify_chain(&blocks, &rules).err().map(|f| f.height),
        };
        if !failed_at.is_some_and(|h| h <= mutated_height) {
            missed.push((bit, mutated_height, failed_at));
        }
    }
    check(
        missed.is_empty(),
        format!("500/500 flips caught at or before the mutated height ({} bytes)", clean.len()),
        format!("{} flips missed, first {:?}", missed.len(), missed.first()),
    )
}

fn booking_soundness() -> Verdict {
    const ASSETS: usize = 20;
    const HORIZON: usize = 1_000;
    let owner = 1;
    let tenants: Vec<u64> = (2..12).collect();
    let mut balances = vec![(owner, u64::MAX / 4)];
    balances.extend(tenants.iter().map(|t| (*t, 1_000_000_000)));
    let mut desk = Desk::new(&balances);
    desk.register(owner);
    for t in &tenants {
        desk.register(*t);
    }
    let assets: Vec<Digest> = (0..ASSETS).map(|_| desk.list(owner, 1)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    let mut open = vec![vec![false; HORIZON]; ASSETS];
    let mut taken: Vec<Vec<Option<Digest>>> = vec![vec![None; HORIZON]; ASSETS];
    for (a, id) in assets.iter().enumerate() {
        for _ in 0..rng.gen_range(1..5) {
            let s = rng.gen_range(1..HORIZON - 100);
            let e = s + rng.gen_range(5..100);
            desk.open(owner, *id, s as u64, e as u64);
            open[a][s..e].iter_mut().for_each(|x| *x = true);
        }
    }

    let mut live: Vec<(usize, Digest, usize, usize)> = Vec::new();
    let (mut attempts, mut accepted, mut mismatches) = (0, 0, 0);
    while attempts < 10_000 {
        let roll = rng.gen_range(0..100);
        let a = rng.gen_range(0..ASSETS);
        if roll < 4 {
            let s = rng.gen_range(1..HORIZON - 60);
            let e = s + rng.gen_range(1..60);
            desk.open(owner, assets[a], s as u64, e as u64);
            open[a][s..e].iter_mut().for_each(|x| *x = true);
            continue;
        }
        if roll < 8 && !live.is_empty() {
            let (a, id, s, e) = live.swap_remove(rng.gen_range(0..live.len()));
            let tenant = desk.state.bookings[&id].tenant;
            let seed = *tenants.iter().find(|t| addr(**t) == tenant).expect("tenant");
            desk.exec(seed, ContractCall::CancelBooking { booking_id: id })
                .map_err(|e| e.to_string())?;
            taken[a][s..e].iter_mut().for_each(|x| *x = None);
            continue;
        }
        attempts += 1;
        let s = rng.gen_range(1..HORIZON - 30);
        let e = s + rng.gen_range(1..30);
        let expected = (s..e).all(|t| open[a][t] && taken[a][t].is_none());
        let tenant = tenants[rng.gen_range(0..tenants.len())];
        match desk.book(tenant, assets[a], s as u64, e as u64) {
            Ok(id) => {
                accepted += 1;
                if !expected {
                    mismatches += 1;
                }
                taken[a][s..e].iter_mut().for_each(|x| *x = Some(id));
                live.push((a, id, s, e));
            }
            Err(err) => {
                if expected || err.code() != "WindowUnavailable" {
                    mismatches += 1;
                }
            }
        }
    }

    let mut overlaps = 0;
    let kept: Vec<_> = desk.state.bookings.values().filter(|b| b.state != BookingState::Cancelled).collect();
    for (i, x) in kept.iter().enumerate() {
        for y in &kept[i + 1..] {
            if x.asset_id == y.asset_id && x.window.overlaps(&y.window) {
                overlaps += 1;
            }
        }
    }
    let oracle_kept: BTreeSet<Digest> = taken.iter().flatten().flatten().copied().collect();
    let chain_kept: BTreeSet<Digest> = kept.iter().map(|b| b.booking_id).collect();
    check(
        mismatches == 0 && overlaps == 0 && oracle_kept == chain_kept,
        format!("10000 attempts, {accepted} accepted, all match the interval oracle, none overlap"),
        format!("{mismatches} decisions differ, {overlaps} overlapping pairs, kept sets equal: {}", oracle_kept == chain_kept),
    )
}

fn consensus_agreement() -> Verdict {
    let users: Vec<u64> = (1..=10).collect();
    let mut net = network(5, &users, 1_000_000, spread(1, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for i in 0..200u64 {
        let from = users[(i % 10) as usize];
        send(&mut net, (from % 5) as usize, from, rng.gen_range(1..=10), 1 + i);
        if rng.gen_bool(0.3) {
            net.advance_tick();
        }
    }
    net.run_until_quiescent(5_000).map_err(|e| e.to_string())?;
    let txs = included(&net, node(&net, 0)).len();
    if !net.heads_agree() || txs != 200 {
        return Err(format!("calm run: heads agree {}, {txs}/200 txs on chain", net.heads_agree()));
    }

    let mut config = spread(1, 3);
    config.partitions = vec![Partition {
        group: vec![NodeRef::Index(0), NodeRef::Index(1)],
        start: 0,
        end: 50,
    }];
    let mut net = network(5, &users, 1_000_000, config);
    let mut submitted = BTreeSet::new();
    for t in 0..50u64 {
        for k in 0..2u64 {
            let from = users[((2 * t + k) % 10) as usize];
            submitted.insert(send(&mut net, (from % 5) as usize, from, rng.gen_range(1..=10), 1));
        }
        net.advance_tick();
    }
    let rotation = 5 * net.config().block_interval;
    let heal = net.now();
    let mut agreed = None;
    for _ in 0..rotation {
        net.advance_tick();
        if net.heads_agree() && net.in_flight().next().is_none() {
            agreed = Some(net.now() - heal);
            break;
        }
    }
    net.run_until_quiescent(5_000).map_err(|e| e.to_string())?;
    let on_chain: BTreeSet<Digest> = included(&net, node(&net, 0)).into_iter().collect();
    check(
        agreed.is_some() && net.heads_agree() && on_chain == submitted,
        format!(
            "calm: 200 txs, one head; split 2|3 for 50 ticks: one head {} ticks after heal (rotation {rotation}), {} txs kept",
            agreed.unwrap_or_default(),
            submitted.len()
        ),
        format!("after heal: agreed {agreed:?}, txs kept {}/{}", on_chain.len(), submitted.len()),
    )
}

fn truth_table() -> Verdict {
    let (owner, tenant, stranger, lock) = (1, 2, 3, 30);
    let mut desk = Desk::new(&[(owner, 10_000), (tenant, 10_000), (stranger, 10_000)]);
    for s in [owner, tenant, stranger] {
        desk.register(s);
    }
    let asset = desk.list(owner, 1);
    desk.open(owner, asset, 0, 100);
    desk.exec(
        owner,
        ContractCall::RegisterDevice {
            asset_id: asset,
            device_public_key: kp(lock).public_key,
            tariff: 1,
        },
    )
    .map_err(|e| e.to_string())?;
    let device = rentledger_core::iot::device_id_for(&kp(lock).public_key);
    let booking = desk.book(tenant, asset, 10, 20).map_err(|e| e.to_string())?;
    let mut wrong = Vec::new();
    for now in 0..=30u64 {
        desk.at(now);
        for issuer in [tenant, owner, stranger] {
            let cmd = CommandMessage::signed(&kp(issuer), CommandKind::Unlock, device, booking, now);
            let accepted = authorize_command(&desk.state, &cmd, now).is_accept();
            if accepted != (issuer == tenant && (10..20).contains(&now)) {
                wrong.push((now, issuer));
            }
        }
    }
    check(
        wrong.is_empty(),
        "93 cases, 0 discrepancies".into(),
        format!("{} discrepancies: {wrong:?}", wrong.len()),
    )
}

fn billing_equivalence() -> Verdict {
    let mut failed = Vec::new();
    for run in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(run);
        let (owner, tenant) = (1, 2);
        let mut desk = Desk::new(&[(owner, 1_000_000), (tenant, 1_000_000)]);
        desk.register(owner);
        desk.register(tenant);
        let asset = desk.list(owner, 1);
        desk.open(owner, asset, 0, 1_000);
        let seeds = [30 + 2 * run, 31 + 2 * run];
        let tariffs = [rng.gen_range(0..50u64), rng.gen_range(0..50u64)];
        for (seed, tariff) in seeds.iter().zip(tariffs) {
            desk.exec(
                owner,
                ContractCall::RegisterDevice {
                    asset_id: asset,
                    device_public_key: kp(*seed).public_key,
                    tariff,
                },
            )
            .map_err(|e| e.to_string())?;
        }
        let start = rng.gen_range(50..400u64);
        let end = start + rng.gen_range(1..400u64);
        let booking = desk.book(tenant, asset, start, end).map_err(|e| e.to_string())?;

        let mut log: Vec<(usize, u64, u64)> = Vec::new();
        for _ in 0..1_000 {
            let d = rng.gen_range(0..2);
            let at = rng.gen_range(0..900u64);
            let units = rng.gen_range(0..1_000u64);
            let event = UsageEvent::signed(&kp(seeds[d]), units, at);
            desk.state.usage.entry(event.device_id).or_default().push(event);
            log.push((d, units, at));
        }
        let bills = compute_bill(&desk.state, &booking).map_err(|e| e.to_string())?;
        for (d, seed) in seeds.iter().enumerate() {
            let id = rentledger_core::iot::device_id_for(&kp(*seed).public_key);
            let units: u64 = log
                .iter()
                .filter(|(dd, _, at)| *dd == d && start <= *at && *at < end)
                .map(|(_, u, _)| *u)
                .sum();
            let bill = bills.iter().find(|b| b.device_id == id);
            if bill.map(|b| (b.total_units, b.amount)) != Some((units, units * tariffs[d])) {
                failed.push(run);
            }
        }
    }
    check(
        failed.is_empty(),
        "100 runs x 1000 events, every statement equals the filter-and-sum oracle".into(),
        format!("runs differing: {failed:?}"),
    )
}

fn whisper_delivery() -> Verdict {
    let nodes = 4usize;
    let topics: Vec<Topic> = (0..10).map(|t| Topic::from_label(&format!("topic-{t}"))).collect();
    let keys: Vec<TopicKey> = (0..10u8).map(|t| TopicKey([t + 1; 32])).collect();
    // Node k: right key on topic t when (t + k) % 3 == 0, a wrong key when 1.
    let plan = |t: usize, k: usize| (t + k) % 3;

    let mut net = network(nodes as u64, &[1], 10, spread(1, 3));
    for k in 0..nodes {
        let id = node(&net, k);
        for t in 0..10 {
            match plan(t, k) {
                0 => net.subscribe(id, topics[t], keys[t]).unwrap(),
                1 => net.subscribe(id, topics[t], TopicKey([0xEE; 32])).unwrap(),
                _ => {}
            }
        }
    }
    let difficulty = net.config().whisper_difficulty;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut posted: Vec<(usize, u64, u64)> = Vec::new();
    let mut delivered: BTreeMap<usize, Vec<(String, u64)>> = BTreeMap::new();
    let mut weak_pooled = 0;
    let collect = |net: &mut Network, delivered: &mut BTreeMap<usize, Vec<(String, u64)>>| {
        for k in 0..nodes {
            let id = node(net, k);
            for (_, payload) in net.collect_messages(id).unwrap() {
                delivered.entry(k).or_default().push((String::from_utf8(payload).unwrap(), net.now()));
            }
        }
    };
    for i in 0..100usize {
        let t = i % 10;
        let ttl = rng.gen_range(4..12);
        let env = seal_envelope(topics[t], format!("msg-{i}").as_bytes(), ttl, &keys[t], difficulty, net.now())
            .map_err(|e| e.to_string())?;
        net.post_envelope(node(&net, i % nodes), env).map_err(|e| e.to_string())?;
        posted.push((t, net.now(), ttl));
        net.advance_tick();
        weak_pooled += net
            .nodes()
            .iter()
            .flat_map(|n| n.whisper().envelopes())
            .filter(|e| !e.meets_difficulty(difficulty))
            .count();
        collect(&mut net, &mut delivered);
    }
    for _ in 0..15 {
        net.advance_tick();
        collect(&mut net, &mut delivered);
    }

    let mut wrong = 0;
    let mut late = 0;
    for k in 0..nodes {
        let got: Vec<&String> = delivered.get(&k).into_iter().flatten().map(|(m, _)| m).collect();
        let got_set: BTreeSet<&String> = got.iter().copied().collect();
        let want: BTreeSet<String> = (0..100).filter(|i| plan(i % 10, k) == 0).map(|i| format!("msg-{i}")).collect();
        if got.len() != got_set.len() || got_set != want.iter().collect() {
            wrong += 1;
        }
        for (m, at) in delivered.get(&k).into_iter().flatten() {
            let i: usize = m.trim_start_matches("msg-").parse().unwrap();
            let (_, posted_at, ttl) = posted[i];
            if *at >= posted_at + ttl {
                late += 1;
            }
        }
    }

    // Nothing is handed out once the TTL has run.
    let mut stale = network(nodes as u64, &[1], 10, spread(1, 3));
    let listener = node(&stale, 1);
    stale.subscribe(listener, topics[0], keys[0]).unwrap();
    for i in 0..10 {
        let env = seal_envelope(topics[0], format!("old-{i}").as_bytes(), 5, &keys[0], difficulty, stale.now()).unwrap();
        stale.post_envelope(node(&stale, 0), env).unwrap();
    }
    stale.run_ticks(5);
    let after_expiry = stale.collect_messages(listener).unwrap().len();

    let total: usize = delivered.values().map(Vec::len).sum();
    check(
        wrong == 0 && late == 0 && weak_pooled == 0 && after_expiry == 0,
        format!("100 envelopes, 10 topics: {total} deliveries exactly to keyed subscribers, none expired, all pooled meet difficulty {difficulty}"),
        format!("{wrong} nodes with wrong sets, {late} late, {weak_pooled} weak pooled, {after_expiry} after expiry"),
    )
}

fn throughput() -> Verdict {
    let users: Vec<u64> = (1..=100).collect();
    let mut net = network(4, &users, 1_000_000, spread(1, 2));
    let started = Instant::now();
    let mut sent = 0;
    // Streaming clients track their own nonces.
    for nonce in 0..12u64 {
        for u in &users {
            let to = addr(1 + (u + nonce) % 100);
            let tx = Transaction::signed(&kp(*u), nonce, ContractCall::PlainTransfer { to, amount: 1 }, 1);
            net.submit_transaction(node(&net, (*u % 4) as usize), tx).map_err(|e| e.to_string())?;
            sent += 1;
        }
        net.advance_tick();
    }
    net.run_until_quiescent(5_000).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let finalized = included(&net, node(&net, 0)).len();
    check(
        finalized >= 1_000 && finalized == sent && elapsed < Duration::from_secs(60),
        format!("{finalized} txs in {} blocks in {elapsed:.2?}", net.nodes()[0].height()),
        format!("{finalized}/{sent} txs finalized in {elapsed:.2?}"),
    )
}

fn split(script: &ScenarioScript) -> ScenarioScript {
    let mut s = script.clone();
    let mid = s.actions.len() / 2;
    let tick = s.actions[mid].tick;
    for (i, command) in [Command::Persist { dir: "split".into() }, Command::Restore { dir: "split".into() }]
        .into_iter()
        .enumerate()
    {
        s.actions.insert(mid + i, Action { tick, actor: None, command });
    }
    s
}

fn determinism() -> Verdict {
    let script = random_script(99, 600);
    let opts = RunOptions::default();
    let a = run_script(&script, &opts).map_err(|e| e.to_string())?.report;
    let b = run_script(&script, &opts).map_err(|e| e.to_string())?.report;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let split_opts = RunOptions {
        work_dir: Some(dir.path().to_path_buf()),
        write_trace: false,
    };
    let c = run_script(&split(&script), &split_opts).map_err(|e| e.to_string())?.report;
    let restored = c.event_counts.get("restored").copied().unwrap_or(0);
    let digests = [a.final_chain_digest, b.final_chain_digest, c.final_chain_digest];
    check(
        digests.iter().all(|d| *d == digests[0]) && restored == 1 && c.failures.is_empty(),
        format!("3 runs (one split by persist/restore) end at {}", digests[0]),
        format!("digests {digests:?}, restores {restored}, failures {:?}", c.failures),
    )
}

fn privacy() -> Verdict {
    let mut script = random_script(31337, 500);
    let end = script.actions.last().expect("actions").tick;
    script.actions.push(Action {
        tick: end,
        actor: None,
        command: Command::Persist { dir: "final".into() },
    });
    let sentinels: Vec<String> = script
        .actors
        .values()
        .filter_map(|a| a.profile.as_ref())
        .flat_map(|p| p.sentinels().map(str::to_owned).collect::<Vec<_>>())
        .collect();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = RunOptions {
        work_dir: Some(dir.path().to_path_buf()),
        write_trace: true,
    };
    let report = run_script(&split(&script), &opts).map_err(|e| e.to_string())?.report;
    let files: Vec<_> = walkdir::WalkDir::new(dir.path())
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .collect();
    let mut hits = 0;
    for f in &files {
        let bytes = std::fs::read(f).map_err(|e| e.to_string())?;
        hits += sentinels
            .iter()
            .filter(|s| bytes.windows(s.len()).any(|w| w == s.as_bytes()))
            .count();
    }
    let invariant = report.invariant("privacy").is_some_and(|i| i.passed);
    check(
        hits == 0 && invariant && files.len() > 3 && !sentinels.is_empty(),
        format!("{} sentinels, {} artifacts, 0 occurrences", sentinels.len(), files.len()),
        format!("{hits} sentinel hits across {} files, invariant passed: {invariant}", files.len()),
    )
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 10] = [
        ("conservation", conservation),
        ("tamper detection", tamper_detection),
        ("booking soundness", booking_soundness),
        ("consensus agreement", consensus_agreement),
        ("access-control truth table", truth_table),
        ("billing equivalence", billing_equivalence),
        ("whisper", whisper_delivery),
        ("throughput smoke", throughput),
        ("determinism", determinism),
        ("privacy", privacy),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = started.elapsed();
        match verdict {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{took:.2?}]", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {:>2} {name}: {detail} [{took:.2?}]", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
