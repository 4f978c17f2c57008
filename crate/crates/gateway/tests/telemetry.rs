mod common;

use std::time::Duration;

use common::{next_event, open_ws, Harness};
use iohrt_core::protocol::{DeviceKind, Message, Probe, SensorReading};
use iohrt_core::time::now_ms;
use serde_json::json;

async fn send_reading(link: &mut iohrt_edgesim::DeviceLink, channel: &str, value: f64) {
    link.tx
        .send(Message::Reading(SensorReading { channel: channel.into(), value, unit: "C".into(), timestamp_ms: now_ms() }))
        .await
        .unwrap();
}

async fn barrier(link: &mut iohrt_edgesim::DeviceLink, id: u64) {
    link.tx.send(Message::LatencyProbe(Probe { probe_id: id })).await.unwrap();
    loop {
        if let Message::LatencyEcho(p) = link.rx.recv().await.unwrap().unwrap().message {
            if p.probe_id == id {
                return;
            }
        }
    }
}

#[tokio::test]
async fn readings_fan_out_to_every_subscriber() {
    let h = Harness::start().await;
    let viewer = h.login("viewer").await;
    let mut a = open_ws(&h, &viewer, "reading").await;
    let mut b = open_ws(&h, &viewer, "").await;
    let mut sensor = h.connect_simple("temp-1", DeviceKind::Sensor).await;
    send_reading(&mut sensor, "temperature", 21.0).await;

    let ea = next_event(&mut a, Duration::from_secs(3)).await.expect("a receives");
    assert_eq!(ea["type"], "reading");
    assert_eq!(ea["device_id"], "temp-1");
    assert_eq!(ea["payload"]["value"], 21.0);
    // b is unfiltered and also sees the device registration.
    let mut got = false;
    while let Some(e) = next_event(&mut b, Duration::from_secs(3)).await {
        if e["type"] == "reading" {
            assert_eq!(e["payload"]["value"], 21.0);
            got = true;
            break;
        }
    }
    assert!(got);
    h.shutdown().await;
}

#[tokio::test]
async fn topic_filter_and_bad_topics() {
    let h = Harness::start().await;
    let viewer = h.login("viewer").await;
    let mut ws = open_ws(&h, &viewer, "mission").await;
    let mut sensor = h.connect_simple("temp-1", DeviceKind::Sensor).await;
    send_reading(&mut sensor, "temperature", 21.0).await;
    barrier(&mut sensor, 1).await;
    assert!(next_event(&mut ws, Duration::from_millis(300)).await.is_none());

    let url = format!("ws://{}/ws/telemetry?token={viewer}&topics=bogus", h.gw.http_addr);
    assert!(tokio_tungstenite::connect_async(url).await.is_err());
    let url = format!("ws://{}/ws/telemetry?token=wrong", h.gw.http_addr);
    assert!(tokio_tungstenite::connect_async(url).await.is_err());
    h.shutdown().await;
}

#[tokio::test]
async fn command_events_reach_subscribers() {
    let h = Harness::start().await;
    let _robot = h.connect_robot("arm", vec![0.0, 0.0]).await;
    let op = h.login("oper").await;
    let mut ws = open_ws(&h, &op, "command").await;
    h.post("/api/robots/arm/acquire", &op, json!({})).await;
    let (_, out) = h.post("/api/robots/arm/command", &op, json!({"v_h": [0.1, 0.2], "dt": 0.1})).await;
    let e = next_event(&mut ws, Duration::from_secs(3)).await.unwrap();
    assert_eq!(e["type"], "command");
    assert_eq!(e["payload"]["cmd_seq"], out["cmd_seq"]);
    assert_eq!(e["payload"]["pose"], out["pose"]);
    h.shutdown().await;
}

#[tokio::test]
async fn robot_state_is_published() {
    let h = Harness::start().await;
    let mut robot = h.connect_robot("arm", vec![0.0]).await;
    let viewer = h.login("viewer").await;
    let mut ws = open_ws(&h, &viewer, "robot_state").await;
    robot
        .tx
        .send(Message::RobotState(iohrt_core::protocol::RobotState {
            pose: vec![0.25],
            gripper: None,
            status: iohrt_core::protocol::RobotStatus::Idle,
            cmd_seq: 0,
            plan: None,
            mission_done: None,
        }))
        .await
        .unwrap();
    let e = next_event(&mut ws, Duration::from_secs(3)).await.unwrap();
    assert_eq!(e["payload"]["pose"], json!([0.25]));
    let (_, dev) = h.get("/api/devices/arm", &viewer).await;
    assert_eq!(dev["robot"]["last_state"]["pose"], json!([0.25]));
    h.shutdown().await;
}
