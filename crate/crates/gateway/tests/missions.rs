mod common;

use std::time::Duration;

use common::{eventually, Harness};
use iohrt_core::protocol::{DeviceKind, Message, Probe, RobotState, RobotStatus, SensorReading};
use iohrt_core::time::now_ms;
use reqwest::StatusCode;
use serde_json::{json, Value};

async fn reading_then_barrier(link: &mut iohrt_edgesim::DeviceLink, channel: &str, value: f64, probe: u64) {
    link.tx
        .send(Message::Reading(SensorReading { channel: channel.into(), value, unit: "C".into(), timestamp_ms: now_ms() }))
        .await
        .unwrap();
    link.tx.send(Message::LatencyProbe(Probe { probe_id: probe })).await.unwrap();
    loop {
        if let Message::LatencyEcho(p) = link.rx.recv().await.unwrap().unwrap().message {
            if p.probe_id == probe {
                return;
            }
        }
    }
}

async fn missions(h: &Harness, token: &str) -> Vec<Value> {
    h.get("/api/missions", token).await.1.as_array().unwrap().clone()
}

#[tokio::test]
async fn boundary_value_raises_nothing() {
    let h = Harness::start().await;
    let mut s = h.connect_simple("temp-kitchen", DeviceKind::Sensor).await;
    let viewer = h.login("viewer").await;
    reading_then_barrier(&mut s, "temperature", 35.0, 1).await;
    reading_then_barrier(&mut s, "temperature", 10.0, 2).await;
    reading_then_barrier(&mut s, "humidity", 80.0, 3).await;
    assert!(missions(&h, &viewer).await.is_empty());
    assert!(h.get("/api/alerts", &viewer).await.1.as_array().unwrap().is_empty());
    h.shutdown().await;
}

#[tokio::test]
async fn excursion_creates_exactly_one_mission_and_dispatches_it() {
    let h = Harness::start().await;
    let mut robot = h.connect_robot("robot-7dof", vec![0.0; 7]).await;
    let mut s = h.connect_simple("temp-kitchen", DeviceKind::Sensor).await;
    let viewer = h.login("viewer").await;
    reading_then_barrier(&mut s, "temperature", 80.0, 1).await;
    reading_then_barrier(&mut s, "temperature", 81.0, 2).await;

    let ms = missions(&h, &viewer).await;
    assert_eq!(ms.len(), 1, "{ms:?}");
    let m = &ms[0];
    assert_eq!(m["rule_id"], "temperature-range");
    assert_eq!(m["target_robot"], "robot-7dof");
    assert_eq!(m["cause"]["value"], 80.0);
    let alerts = h.get("/api/alerts", &viewer).await.1;
    assert_eq!(alerts.as_array().unwrap().len(), 1);

    let assign = tokio::time::timeout(Duration::from_secs(2), async {
        loop {
            if let Message::MissionAssign(a) = robot.rx.recv().await.unwrap().unwrap().message {
                return a;
            }
        }
    })
    .await
    .unwrap();
    assert_eq!(assign.mission_id, m["id"].as_str().unwrap());
    assert_eq!(assign.goal, vec![0.4, 0.0, 0.3, 0.0, 0.0, 0.0, 0.0]);

    let op = h.login("oper").await;
    let (status, acked) = h.post(&format!("/api/missions/{}/ack", assign.mission_id), &op, json!({})).await;
    assert_eq!(status, StatusCode::OK, "{acked}");
    assert_eq!(acked["status"], "acknowledged");

    robot
        .tx
        .send(Message::RobotState(RobotState {
            pose: assign.goal.clone(),
            gripper: None,
            status: RobotStatus::Autonomous,
            cmd_seq: assign.cmd_seq,
            plan: None,
            mission_done: Some(assign.mission_id.clone()),
        }))
        .await
        .unwrap();
    let done = eventually(Duration::from_secs(3), || async {
        let ms = missions(&h, &viewer).await;
        (ms[0]["status"] == "done").then_some(())
    })
    .await;
    assert!(done.is_some());
    let (_, dev) = h.get("/api/devices/robot-7dof", &viewer).await;
    assert_eq!(dev["robot"]["setpoint"], json!(assign.goal));

    // With the first mission finished, a fresh excursion raises a new one.
    reading_then_barrier(&mut s, "temperature", 90.0, 3).await;
    assert_eq!(missions(&h, &viewer).await.len(), 2);
    h.shutdown().await;
}

#[tokio::test]
async fn mission_for_offline_robot_waits_for_registration() {
    let h = Harness::start().await;
    let mut s = h.connect_simple("temp-kitchen", DeviceKind::Sensor).await;
    let viewer = h.login("viewer").await;
    reading_then_barrier(&mut s, "temperature", 5.0, 1).await;
    assert_eq!(missions(&h, &viewer).await[0]["status"], "pending");
    let mut robot = h.connect_robot("robot-7dof", vec![0.0; 7]).await;
    let got = tokio::time::timeout(Duration::from_secs(2), async {
        loop {
            if let Message::MissionAssign(a) = robot.rx.recv().await.unwrap().unwrap().message {
                return a;
            }
        }
    })
    .await;
    assert!(got.is_ok());
    assert_eq!(missions(&h, &viewer).await[0]["status"], "dispatched");
    h.shutdown().await;
}

#[tokio::test]
async fn rules_can_be_replaced_by_developers() {
    let h = Harness::start().await;
    let op = h.login("oper").await;
    let dev = h.login("dev").await;
    let rules = json!([{ "id": "hot", "channel": "temperature", "min": -100.0, "max": 50.0, "target_robot": "arm", "goal": [1.0] }]);
    let (status, _) = h.call(reqwest::Method::PUT, "/api/rules", Some(&op), Some(rules.clone())).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let (status, body) = h.call(reqwest::Method::PUT, "/api/rules", Some(&dev), Some(rules)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let mut s = h.connect_simple("temp-kitchen", DeviceKind::Sensor).await;
    reading_then_barrier(&mut s, "temperature", 40.0, 1).await;
    assert!(missions(&h, &op).await.is_empty());
    reading_then_barrier(&mut s, "temperature", 51.0, 2).await;
    assert_eq!(missions(&h, &op).await[0]["rule_id"], "hot");
    let bad = json!([{ "id": "x", "channel": "t", "min": 5.0, "max": 1.0, "target_robot": "arm", "goal": [] }]);
    let (status, _) = h.call(reqwest::Method::PUT, "/api/rules", Some(&dev), Some(bad)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    h.shutdown().await;
}
