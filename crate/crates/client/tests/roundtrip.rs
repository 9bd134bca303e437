use std::sync::{Arc, Mutex};

use rentledger_client::{Client, ClientError};
use rentledger_core::api::AssetQuery;
use rentledger_core::codec::canonical_json;
use rentledger_core::harness::device_topic_key;
use rentledger_core::iot::{device_id_for, device_topic, CommandKind, CommandMessage, Decision, UsageEvent};
use rentledger_core::keys::{generate_keypair, Digest, KeyPair, Seed};
use rentledger_core::ledger::{ContractCall, Outcome, Transaction};
use rentledger_core::market::{Location, Window};
use rentledger_core::whisper::seal_envelope;
use rentledger_service::{serve, Funding, Hub, ServiceConfig};

const OWNER: u64 = 1;
const TENANT: u64 = 2;
const DOOR: u64 = 40;

fn kp(seed: u64) -> KeyPair {
    generate_keypair(Seed::from_u64(seed))
}

async fn start() -> (Client, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        validators: vec![9001, 9002],
        allocations: [OWNER, TENANT]
            .into_iter()
            .map(|seed| Funding::Seed { seed, amount: 1_000 })
            .collect(),
        ..ServiceConfig::default()
    };
    let hub = Arc::new(Mutex::new(Hub::open(dir.path(), &config).unwrap()));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(serve(listener, hub, None));
    (Client::new(base), dir)
}

async fn exec(client: &Client, seed: u64, call: ContractCall) -> Result<Outcome, ClientError> {
    let k = kp(seed);
    let nonce = client.account(&k.address()).await?.next_nonce;
    let sent = client.submit(Transaction::signed(&k, nonce, call, 100), None).await?;
    for _ in 0..20 {
        client.tick(1).await?;
        if client.transaction(&sent.digest).await?["status"] == "included" {
            return Ok(sent.outcome);
        }
    }
    panic!("transaction {} never included", sent.digest);
}

#[tokio::test]
async fn status_accounts_and_transfers() {
    let (client, _dir) = start().await;
    assert_eq!(client.health().await.unwrap()["status"], "ok");
    let status = client.status().await.unwrap();
    assert_eq!((status.now, status.height, status.nodes.len()), (0, 0, 2));

    let (a, b) = (kp(OWNER).address(), kp(TENANT).address());
    let tx = Transaction::signed(&kp(OWNER), 0, ContractCall::PlainTransfer { to: b, amount: 10 }, 1);
    let sent = client.submit(tx.clone(), None).await.unwrap();
    assert_eq!(sent.digest, tx.digest());
    assert_eq!(client.transaction(&sent.digest).await.unwrap()["status"], "pending");
    assert_eq!(client.account(&a).await.unwrap().next_nonce, 1);

    let replay = client.submit(tx, None).await.unwrap_err();
    assert_eq!(replay.code(), "NonceReused");

    client.tick(3).await.unwrap();
    assert_eq!(client.transaction(&sent.digest).await.unwrap()["status"], "included");
    let acct = client.account(&b).await.unwrap();
    assert_eq!((acct.balance, acct.nonce), (1_010, 0));

    let broke = Transaction::signed(&kp(TENANT), 0, ContractCall::PlainTransfer { to: a, amount: 5_000 }, 1);
    match client.submit(broke, None).await.unwrap_err() {
        ClientError::Api { status, code, .. } => assert_eq!((status, code.as_str()), (422, "InsufficientFunds")),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(client.account(&kp(77).address()).await.unwrap_err().code(), "NotFound");
}

#[tokio::test]
async fn rental_with_a_hosted_door() {
    let (client, _dir) = start().await;
    for seed in [OWNER, TENANT] {
        exec(&client, seed, ContractCall::RegisterUser { kyc_doc_digest: Digest::ZERO })
            .await
            .unwrap();
    }
    let listed = ContractCall::ListAsset {
        metadata_digest: Digest::ZERO,
        location: Location::from_degrees(48.2, 16.4),
        price_per_tick: 3,
        sensitive: false,
    };
    let Outcome::AssetListed { asset_id } = exec(&client, OWNER, listed).await.unwrap() else {
        panic!("not listed");
    };
    let now = client.status().await.unwrap().now;
    let window = Window::new(now + 5, now + 15);
    exec(&client, OWNER, ContractCall::SetAvailability { asset_id, window: Window::new(0, 1_000) })
        .await
        .unwrap();

    let door = kp(DOOR);
    let device_id = device_id_for(&door.public_key);
    let register = ContractCall::RegisterDevice {
        asset_id,
        device_public_key: door.public_key.clone(),
        tariff: 2,
    };
    exec(&client, OWNER, register).await.unwrap();
    let key = device_topic_key(&Seed::from_u64(DOOR));
    client.attach_agent(device_id, key, None).await.unwrap();
    assert_eq!(client.attach_agent(device_id, key, None).await.unwrap_err().code(), "Conflict");

    let query = AssetQuery {
        bbox: Some("48,16,49,17".into()),
        window: Some(window.to_string()),
        ..AssetQuery::default()
    };
    assert_eq!(client.assets(&query).await.unwrap().len(), 1);

    let book = ContractCall::BookAsset { asset_id, window, deposit: 10 };
    let Outcome::Booked { booking } = exec(&client, TENANT, book).await.unwrap() else {
        panic!("not booked");
    };
    assert_eq!(client.assets(&query).await.unwrap().len(), 0);
    assert_eq!(client.booking(&booking.booking_id).await.unwrap().tenant, kp(TENANT).address());

    let now = client.status().await.unwrap().now;
    client.tick(window.start.saturating_sub(now)).await.unwrap();
    let now = client.status().await.unwrap().now;
    let cmd = CommandMessage::signed(&kp(TENANT), CommandKind::Unlock, device_id, booking.booking_id, now);
    let difficulty = client.status().await.unwrap().whisper_difficulty;
    let env = seal_envelope(device_topic(&device_id), &canonical_json(&cmd), 5, &key, difficulty, now).unwrap();
    client.post_envelope(env, None).await.unwrap();
    let decided = client.tick(1).await.unwrap().decisions;
    assert_eq!(decided.len(), 1);
    assert_eq!(decided[0].decision, Decision::Accept);
    assert_eq!(client.decisions().await.unwrap(), decided);

    let meter = ContractCall::RecordUsage {
        event: UsageEvent::signed(&door, 4, client.status().await.unwrap().now),
    };
    exec(&client, OWNER, meter).await.unwrap();
    let bill = client.bill(&booking.booking_id).await.unwrap();
    assert_eq!((bill[0].total_units, bill[0].amount), (4, 8));
    assert_eq!(client.device(&device_id).await.unwrap().tariff, 2);
    assert!(!client.take_trace().await.unwrap().is_empty());
}

#[tokio::test]
async fn snapshots_save_and_load() {
    let (client, dir) = start().await;
    client.tick(4).await.unwrap();
    let saved = client.save_state(Some("before".into())).await.unwrap();
    assert!(std::path::Path::new(&saved.path).starts_with(dir.path()));
    client.tick(6).await.unwrap();
    assert_eq!(client.status().await.unwrap().now, 10);
    client.load_state(Some("before".into())).await.unwrap();
    assert_eq!(client.status().await.unwrap().now, 4);

    assert_eq!(client.load_state(Some("never".into())).await.unwrap_err().code(), "CorruptSnapshot");
    assert_eq!(client.save_state(Some("../escape".into())).await.unwrap_err().code(), "BadRequest");
}

#[tokio::test]
async fn unreachable_service_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let err = Client::new(format!("http://{addr}")).status().await.unwrap_err();
    assert_eq!(err.code(), "Unreachable");
}
