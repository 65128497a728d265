use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use piheart_core::mqtt::{broker_serve, BrokerConfig, BrokerHandle, ClientOptions, LastWill, Message, MqttClient};
use tokio::sync::mpsc;

async fn broker() -> BrokerHandle {
    broker_serve(BrokerConfig::ephemeral()).await.unwrap()
}

async fn collect(client: &MqttClient, filter: &str) -> mpsc::UnboundedReceiver<Message> {
    let (tx, rx) = mpsc::unbounded_channel();
    client
        .subscribe(filter, move |m| {
            let _ = tx.send(m.clone());
        })
        .await
        .unwrap();
    rx
}

async fn recv(rx: &mut mpsc::UnboundedReceiver<Message>) -> Message {
    tokio::time::timeout(Duration::from_secs(5), rx.recv())
        .await
        .expect("timed out")
        .expect("channel closed")
}

async fn nothing(rx: &mut mpsc::UnboundedReceiver<Message>, wait_ms: u64) {
    if let Ok(Some(m)) = tokio::time::timeout(Duration::from_millis(wait_ms), rx.recv()).await {
        panic!("unexpected message on {}", m.topic);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn loopback_delivery_in_order() {
    let b = broker().await;
    let sub = MqttClient::connect(b.local_addr(), "sub", 30).await.unwrap();
    let publ = MqttClient::connect(b.local_addr(), "pub", 30).await.unwrap();
    let mut rx = collect(&sub, "piheart/dev1/hr").await;
    for i in 0..200u32 {
        publ.publish("piheart/dev1/hr", i.to_string(), false).unwrap();
    }
    for i in 0..200u32 {
        let m = recv(&mut rx).await;
        assert_eq!(m.payload, i.to_string().as_bytes());
        assert!(!m.retain);
    }
    publ.disconnect().await.unwrap();
    sub.disconnect().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn single_level_wildcard_delivery() {
    let b = broker().await;
    let sub = MqttClient::connect(b.local_addr(), "sub", 30).await.unwrap();
    let publ = MqttClient::connect(b.local_addr(), "pub", 30).await.unwrap();
    let mut rx = collect(&sub, "piheart/+/hr").await;
    publ.publish("piheart/dev1/bvp", "x", false).unwrap();
    publ.publish("piheart/dev1/hr", "1", false).unwrap();
    publ.publish("piheart/dev2/hr", "2", false).unwrap();
    publ.publish("piheart/dev2/x/hr", "3", false).unwrap();
    assert_eq!(recv(&mut rx).await.topic, "piheart/dev1/hr");
    assert_eq!(recv(&mut rx).await.topic, "piheart/dev2/hr");
    nothing(&mut rx, 200).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn overlapping_subscriptions_deliver_once() {
    let b = broker().await;
    let sub = MqttClient::connect(b.local_addr(), "sub", 30).await.unwrap();
    let count = Arc::new(Mutex::new(0usize));
    for filter in ["a/#", "a/+", "a/b"] {
        let count = count.clone();
        sub.subscribe(filter, move |_| *count.lock() += 1).await.unwrap();
    }
    let publ = MqttClient::connect(b.local_addr(), "pub", 30).await.unwrap();
    publ.publish("a/b", "x", false).unwrap();
    tokio::time::sleep(Duration::from_millis(300)).await;
    // one PUBLISH on the wire, dispatched to each matching local callback
    assert_eq!(b.delivered(), 1);
    assert_eq!(*count.lock(), 3);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn retained_message_replayed_on_subscribe() {
    let b = broker().await;
    let publ = MqttClient::connect(b.local_addr(), "pub", 30).await.unwrap();
    publ.publish("piheart/dev1/hr", r#"{"t_ms":30000,"bpm":72.0}"#, true).unwrap();
    publ.publish("piheart/dev1/hr", r#"{"t_ms":37500,"bpm":74.0}"#, true).unwrap();
    tokio::time::sleep(Duration::from_millis(100)).await;

    let late = MqttClient::connect(b.local_addr(), "late", 30).await.unwrap();
    let mut rx = collect(&late, "piheart/+/hr").await;
    let m = recv(&mut rx).await;
    assert!(m.retain);
    assert_eq!(m.payload, r#"{"t_ms":37500,"bpm":74.0}"#.as_bytes());

    // live traffic after the replay is not flagged
    publ.publish("piheart/dev1/hr", "next", true).unwrap();
    let m = recv(&mut rx).await;
    assert!(!m.retain);
    assert_eq!(m.payload, "next".as_bytes());

    // an empty retained payload clears the slot
    publ.publish("piheart/dev1/hr", "", true).unwrap();
    let _ = recv(&mut rx).await;
    let again = MqttClient::connect(b.local_addr(), "again", 30).await.unwrap();
    let mut rx2 = collect(&again, "piheart/dev1/hr").await;
    nothing(&mut rx2, 200).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn keep_alive_survives_idle_period() {
    let b = broker().await;
    let idle = MqttClient::connect(b.local_addr(), "idle", 2).await.unwrap();
    tokio::time::sleep(Duration::from_secs(10)).await;
    assert!(idle.is_connected());
    assert_eq!(b.client_count(), 1);
    let publ = MqttClient::connect(b.local_addr(), "pub", 30).await.unwrap();
    let mut rx = collect(&idle, "t").await;
    publ.publish("t", "still here", false).unwrap();
    assert_eq!(recv(&mut rx).await.payload, "still here".as_bytes());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn brokers_are_isolated() {
    let b1 = broker().await;
    let b2 = broker().await;
    let s1 = MqttClient::connect(b1.local_addr(), "s", 30).await.unwrap();
    let s2 = MqttClient::connect(b2.local_addr(), "s", 30).await.unwrap();
    let mut rx1 = collect(&s1, "#").await;
    let mut rx2 = collect(&s2, "#").await;
    let p1 = MqttClient::connect(b1.local_addr(), "p", 30).await.unwrap();
    p1.publish("piheart/dev1/hr", "1", false).unwrap();
    assert_eq!(recv(&mut rx1).await.payload, "1".as_bytes());
    nothing(&mut rx2, 300).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn broker_loss_surfaces_session_error() {
    let b = broker().await;
    let c = MqttClient::connect(b.local_addr(), "c", 30).await.unwrap();
    b.shutdown().await;
    let reason = tokio::time::timeout(Duration::from_secs(5), c.closed())
        .await
        .expect("loss not detected");
    assert!(reason.is_some());
    assert!(!c.is_connected());
    assert!(c.publish("t", "x", false).is_err());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn local_disconnect_is_graceful() {
    let b = broker().await;
    let watcher = MqttClient::connect(b.local_addr(), "w", 30).await.unwrap();
    let mut wills = collect(&watcher, "will/#").await;
    let options = ClientOptions {
        will: Some(LastWill {
            topic: "will/c".into(),
            message: "gone".into(),
            qos: 0,
            retain: false,
        }),
        ..ClientOptions::default()
    };
    let c = MqttClient::connect_with(b.local_addr(), "c", options.clone()).await.unwrap();
    c.disconnect().await.unwrap();
    assert_eq!(c.closed().await, None);
    nothing(&mut wills, 300).await;

    // dropping the TCP connection without DISCONNECT triggers the will
    let d = MqttClient::connect_with(b.local_addr(), "d", options).await.unwrap();
    drop(d);
    let m = recv(&mut wills).await;
    assert_eq!(m.payload, "gone".as_bytes());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn oversized_payload_rejected_locally() {
    let b = broker().await;
    let c = MqttClient::connect(b.local_addr(), "c", 30).await.unwrap();
    let big = vec![0u8; 256 * 1024 + 1];
    assert!(c.publish("t", big, false).is_err());
    assert!(c.is_connected());
}
