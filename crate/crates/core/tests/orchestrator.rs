mod common;

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use common::{until, Rig, TestConsole};
use piheart_core::mqtt::{broker_serve, BrokerConfig, MqttClient};
use piheart_core::orchestrator::{
    bridge_serve, read_log, start_session, validate_log, LogTarget, Modality, RecordBody, SessionConfig, SessionError,
    SessionPhase, SessionPlan, SessionRecord,
};

fn plan(order: [Modality; 3]) -> SessionPlan {
    SessionPlan::new(1, order)
}

const OWN_FIRST: [Modality; 3] = [Modality::WithOwnHeart, Modality::WithNeighborHeart, Modality::WithoutHeart];

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn start_refused_when_device_b_down() {
    let rig = Rig::start(66.0, 90.0).await;
    let dead = broker_serve(BrokerConfig::ephemeral()).await.unwrap();
    let dead_addr = dead.local_addr().to_string();
    dead.shutdown().await;
    let cfg = SessionConfig::new(plan(OWN_FIRST), &rig.addr(0), &dead_addr, LogTarget::Path(rig.log_path()));
    match start_session(cfg).await {
        Err(SessionError::Unreachable { label, .. }) => assert_eq!(label, "B"),
        other => panic!("expected unreachable B, got {other:?}"),
    }
    // no partial session leaves a log behind
    assert!(!rig.log_path().exists());

    // a broker with no node on it is refused as well
    let empty = broker_serve(BrokerConfig::ephemeral()).await.unwrap();
    let mut cfg = SessionConfig::new(
        plan(OWN_FIRST),
        &rig.addr(0),
        &empty.local_addr().to_string(),
        LogTarget::Path(rig.log_path()),
    );
    cfg.discovery_timeout = Duration::from_millis(300);
    match start_session(cfg).await {
        Err(SessionError::Device { label, .. }) => assert_eq!(label, "B"),
        other => panic!("expected device B error, got {other:?}"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn restart_refused_while_log_exists() {
    let rig = Rig::start(66.0, 90.0).await;
    let session = rig.session(plan(OWN_FIRST)).await;
    session.stop().await.unwrap();
    let cfg = SessionConfig::new(plan(OWN_FIRST), &rig.addr(0), &rig.addr(1), LogTarget::Path(rig.log_path()));
    assert!(matches!(start_session(cfg).await, Err(SessionError::LogExists(_))));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn neighbor_routing_and_idle_on_without() {
    let rig = Rig::start(66.0, 90.0).await;
    let session = rig
        .session(plan([Modality::WithNeighborHeart, Modality::WithOwnHeart, Modality::WithoutHeart]))
        .await;
    rig.hops(2).await;
    until("routed rates", 10, || {
        rig.nodes[0].rate_history().iter().any(|r| r.source.as_deref() == Some("B"))
            && rig.nodes[1].rate_history().iter().any(|r| r.source.as_deref() == Some("A"))
    })
    .await;
    // nothing crossed the wrong way
    assert!(rig.nodes[0].rate_history().iter().all(|r| r.source.as_deref() != Some("A")));
    assert!(rig.nodes[1].rate_history().iter().all(|r| r.source.as_deref() != Some("B")));
    until("B beats", 10, || rig.nodes[1].status().beats_executed > 0).await;

    session.set_modality(Modality::WithoutHeart).await.unwrap();
    until("both idle", 5, || rig.nodes.iter().all(|n| n.status().current_bpm.is_none())).await;
    let beats: Vec<u64> = rig.nodes.iter().map(|n| n.status().beats_executed).collect();
    rig.hops(2).await;
    let after: Vec<u64> = rig.nodes.iter().map(|n| n.status().beats_executed).collect();
    assert_eq!(beats, after);
    session.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn movie_and_modality_tags() {
    let rig = Rig::start(66.0, 90.0).await;
    let session = rig.session(plan(OWN_FIRST)).await;
    rig.hops(1).await;
    session.set_movie("overwatch").await.unwrap();
    session.set_movie("overwatch").await.unwrap();
    assert!(matches!(session.set_movie("  ").await, Err(SessionError::EmptyTitle)));
    assert!(matches!(session.set_modality_str("Sometimes").await, Err(SessionError::Modality(_))));
    rig.hops(2).await;
    tokio::time::sleep(Duration::from_millis(50)).await;
    session.stop().await.unwrap();
    assert!(matches!(session.set_movie("for the birds").await, Err(SessionError::NotActive)));

    let records = read_log(rig.log_path()).unwrap();
    let movie_changes: Vec<&SessionRecord> = records
        .iter()
        .filter(|r| matches!(r.body, RecordBody::MovieChange { .. }))
        .collect();
    assert_eq!(movie_changes.len(), 3);
    assert_eq!(
        movie_changes[2].body,
        RecordBody::MovieChange {
            previous: Some("overwatch".into())
        }
    );
    let switch = records
        .iter()
        .position(|r| matches!(&r.body, RecordBody::MovieChange { previous: Some(p) } if p == "big bunny"))
        .unwrap();
    for (i, r) in records.iter().enumerate() {
        if matches!(r.body, RecordBody::Hr { .. } | RecordBody::BvpBatch { .. }) {
            let want = if i < switch { "big bunny" } else { "overwatch" };
            assert_eq!(r.movie, want, "line {}", i + 1);
            assert_eq!(r.modality, Modality::WithOwnHeart);
        }
    }
    let (_, issues) = validate_log(std::fs::File::open(rig.log_path()).unwrap()).unwrap();
    assert!(issues.is_empty(), "{issues:?}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn log_reconstructs_bpm_series() {
    let mut rig = Rig::start(66.0, 90.0).await;
    let session = rig.session(plan(OWN_FIRST)).await;
    rig.hops(4).await;
    let published = rig.stop_nodes_with_history().await;
    session.stop().await.unwrap();
    let records = read_log(rig.log_path()).unwrap();
    for (i, label) in ["A", "B"].iter().enumerate() {
        let logged: Vec<(u64, f64)> = records
            .iter()
            .filter(|r| r.device.as_deref() == Some(*label))
            .filter_map(|r| match r.body {
                RecordBody::Hr { bpm, t_ms } => Some((t_ms, bpm)),
                _ => None,
            })
            .collect();
        // the session may start after a node's first hops
        assert!(!logged.is_empty());
        let start = published[i].iter().position(|p| *p == logged[0]).unwrap();
        assert_eq!(logged, published[i][start..].to_vec(), "device {label}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn export_is_consistent_snapshot() {
    let rig = Rig::start(66.0, 90.0).await;
    let session = rig.session(plan(OWN_FIRST)).await;
    rig.hops(2).await;
    let dest = rig.dir.path().join("export.jsonl");
    let n = session.export_log(&dest).await.unwrap();
    let exported = read_log(&dest).unwrap();
    assert_eq!(exported.len() as u64, n);
    session.stop().await.unwrap();
    let full = read_log(rig.log_path()).unwrap();
    assert!(full.len() >= exported.len());
    assert_eq!(&full[..exported.len()], &exported[..]);
}

/// Accepts `limit` bytes, then fails every write.
struct FailingWriter {
    written: Arc<AtomicUsize>,
    limit: usize,
}

impl Write for FailingWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        if self.written.load(Ordering::SeqCst) + buf.len() > self.limit {
            return Err(std::io::Error::other("disk full"));
        }
        self.written.fetch_add(buf.len(), Ordering::SeqCst);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn write_failure_degrades_but_routing_continues() {
    let rig = Rig::start(66.0, 90.0).await;
    let writer = FailingWriter {
        written: Arc::new(AtomicUsize::new(0)),
        limit: 2000,
    };
    let cfg = SessionConfig::new(plan(OWN_FIRST), &rig.addr(0), &rig.addr(1), LogTarget::Writer(Box::new(writer)));
    let session = start_session(cfg).await.unwrap();
    let mut events = session.subscribe();
    until("degraded", 10, || session.status().phase == SessionPhase::Degraded).await;
    let status = session.status();
    assert!(status.write_errors > 0);
    assert!(status.error.as_deref().unwrap().contains("disk full"));
    // operator notified through the event stream
    let mut saw_status = false;
    while let Ok(ev) = events.try_recv() {
        if let piheart_core::orchestrator::SessionEvent::Status { phase, .. } = ev {
            saw_status |= phase == SessionPhase::Degraded;
        }
    }
    assert!(saw_status);
    let sent = session.status().beat_rates_sent;
    rig.hops(2).await;
    until("routing continues", 5, || {
        let now = session.status().beat_rates_sent;
        now[0] > sent[0] && now[1] > sent[1]
    })
    .await;
    session.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn broker_loss_fails_session() {
    let mut rig = Rig::start(66.0, 90.0).await;
    let session = rig.session(plan(OWN_FIRST)).await;
    let b = rig.brokers.pop().unwrap();
    b.shutdown().await;
    let status = tokio::time::timeout(Duration::from_secs(5), session.finished()).await.unwrap();
    assert_eq!(status.phase, SessionPhase::Failed);
    assert!(status.error.unwrap().contains("device B"));
    assert!(matches!(session.set_movie("x").await, Err(SessionError::NotActive)));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn bridge_consoles_share_events_and_commands() {
    let rig = Rig::start(66.0, 90.0).await;
    let session = rig.session(plan(OWN_FIRST)).await;
    let bridge = bridge_serve(session.clone(), "127.0.0.1:0").unwrap();
    let addr = bridge.local_addr();
    let (c1, c2) = tokio::task::spawn_blocking(move || (TestConsole::connect(addr), TestConsole::connect(addr)))
        .await
        .unwrap();

    // snapshot first
    let first = tokio::task::block_in_place(|| c1.next_of("status", Duration::from_secs(2)));
    assert_eq!(first["modality"], "WithOwnHeart");
    assert_eq!(first["movie"], "big bunny");
    until("two consoles", 5, || bridge.consoles() == 2).await;

    // same effect and same record as the direct call
    c1.send(r#"{"type":"set_modality","value":"WithNeighborHeart","id":7}"#);
    let ack = tokio::task::block_in_place(|| c1.next_of("ack", Duration::from_secs(2)));
    assert_eq!(ack["command"], "set_modality");
    assert_eq!(ack["id"], 7);
    assert_eq!(session.status().modality, Modality::WithNeighborHeart);
    session.set_modality(Modality::WithOwnHeart).await.unwrap();

    // malformed command: error to the sender only
    c2.send("{\"type\":\"set_modality\",\"value\":\"Loud\"}");
    let err = tokio::task::block_in_place(|| c2.next_of("error", Duration::from_secs(2)));
    assert!(err["message"].as_str().unwrap().contains("unknown modality"));
    c2.send("not json");
    tokio::task::block_in_place(|| c2.next_of("error", Duration::from_secs(2)));
    c2.send(r#"{"type":"launch"}"#);
    tokio::task::block_in_place(|| c2.next_of("error", Duration::from_secs(2)));

    rig.hops(3).await;
    tokio::time::sleep(Duration::from_millis(200)).await;
    let s1: Vec<serde_json::Value> = tokio::task::block_in_place(|| c1.drain());
    let s2: Vec<serde_json::Value> = tokio::task::block_in_place(|| c2.drain());
    assert!(s1.iter().all(|v| v["type"] != "error"), "error leaked to console 1");
    let events = |s: &[serde_json::Value]| -> Vec<serde_json::Value> {
        s.iter()
            .filter(|v| v["type"] != "ack" && v["type"] != "error")
            .cloned()
            .collect()
    };
    let (e1, e2) = (events(&s1), events(&s2));
    assert!(e1.iter().any(|v| v["type"] == "hr"));
    assert!(e1.iter().any(|v| v["type"] == "beat_event"));
    // the drains cut the stream at slightly different points; align and compare the overlap
    let (i, j) = e1
        .iter()
        .enumerate()
        .find_map(|(i, v)| e2.iter().position(|w| w == v).map(|j| (i, j)))
        .expect("streams overlap");
    let n = (e1.len() - i).min(e2.len() - j);
    assert!(n > 5);
    assert_eq!(&e1[i..i + n], &e2[j..j + n]);

    // a console leaving does not disturb the session
    let hr_before = session.status().hr_records;
    tokio::task::block_in_place(|| c2.close());
    rig.hops(2).await;
    until("hr keeps flowing", 5, || session.status().hr_records[0] > hr_before[0]).await;
    assert!(session.status().phase.is_running());

    // start advances the plan, stop ends the session
    c1.send(r#"{"type":"start"}"#);
    let ack = tokio::task::block_in_place(|| c1.next_of("ack", Duration::from_secs(2)));
    assert_eq!(ack["segment"], 1);
    let change = tokio::task::block_in_place(|| c1.next_of("movie_change", Duration::from_secs(2)));
    assert_eq!(change["value"], "overwatch");
    c1.send(r#"{"type":"stop"}"#);
    tokio::task::block_in_place(|| c1.next_of("ack", Duration::from_secs(5)));
    assert_eq!(session.status().phase, SessionPhase::Stopped);
    c1.send(r#"{"type":"set_movie","value":"x"}"#);
    let err = tokio::task::block_in_place(|| c1.next_of("error", Duration::from_secs(2)));
    assert!(err["message"].as_str().unwrap().contains("not active"));
    tokio::task::block_in_place(|| c1.close());
    tokio::task::block_in_place(|| bridge.shutdown());

    let records = read_log(rig.log_path()).unwrap();
    let modality_changes: Vec<Option<Modality>> = records
        .iter()
        .filter_map(|r| match r.body {
            RecordBody::ModalityChange { previous } => Some(previous),
            _ => None,
        })
        .collect();
    assert_eq!(
        modality_changes,
        vec![
            None,
            Some(Modality::WithOwnHeart),
            Some(Modality::WithNeighborHeart),
            Some(Modality::WithOwnHeart)
        ]
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn late_console_gets_latest_hr() {
    let rig = Rig::start(66.0, 90.0).await;
    let session = rig.session(plan(OWN_FIRST)).await;
    rig.hops(2).await;
    until("hr seen", 5, || session.status().latest_hr.iter().all(Option::is_some)).await;
    let bridge = bridge_serve(session.clone(), "127.0.0.1:0").unwrap();
    let addr = bridge.local_addr();
    let console = tokio::task::spawn_blocking(move || TestConsole::connect(addr)).await.unwrap();
    let hr = tokio::task::block_in_place(|| console.next_of("hr", Duration::from_secs(2)));
    assert!(hr["device"] == "A" || hr["device"] == "B");
    tokio::task::block_in_place(|| console.close());
    session.stop().await.unwrap();
    let _ = MqttClient::connect(rig.addr(0), "probe", 5).await.unwrap();
}
