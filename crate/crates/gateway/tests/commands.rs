mod common;

use std::time::Duration;

use common::Harness;
use iohrt_core::protocol::Message;
use reqwest::StatusCode;
use serde_json::{json, Value};

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[tokio::test]
async fn teleop_command_moves_setpoint_and_reaches_robot() {
    let h = Harness::start().await;
    let mut robot = h.connect_robot("arm", vec![0.10, 0.20, 0.30]).await;
    let op = h.login("oper").await;
    let (status, body) = h.post("/api/robots/arm/acquire", &op, json!({})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["status"], "granted");

    let (status, out) = h.post("/api/robots/arm/command", &op, json!({"v_h": [0.5, -0.5, 0.0], "dt": 0.01})).await;
    assert_eq!(status, StatusCode::OK, "{out}");
    let pose = floats(&out["pose"]);
    let oracle: Vec<f64> = [0.10, 0.20, 0.30].iter().zip([0.5, -0.5, 0.0]).map(|(p, v)| (1.0 * v) * 0.01 + p).collect();
    assert_eq!(pose, oracle);
    for (got, want) in pose.iter().zip([0.105, 0.195, 0.30]) {
        assert!((got - want).abs() < 1e-12);
    }
    assert_eq!(out["mode"], "teleop");
    let seq = out["cmd_seq"].as_u64().unwrap();

    let env = tokio::time::timeout(Duration::from_secs(2), robot.rx.recv()).await.unwrap().unwrap().unwrap();
    match env.message {
        Message::Command(c) => {
            assert_eq!(c.cmd_seq, seq);
            assert_eq!(c.setpoint, oracle);
        }
        other => panic!("robot got {other:?}"),
    }

    let session = out["session_id"].as_str().unwrap();
    let (status, log) = h.get(&format!("/api/sessions/{session}"), &op).await;
    assert_eq!(status, StatusCode::OK);
    let log = log.as_array().unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(floats(&log[0]["pose"]), oracle);
    assert_eq!(floats(&log[0]["prev_pose"]), vec![0.10, 0.20, 0.30]);
    h.shutdown().await;
}

#[tokio::test]
async fn shared_command_blends_an_explicit_plan() {
    let h = Harness::start().await;
    let _robot = h.connect_robot("arm", vec![0.0, 0.0]).await;
    let op = h.login("oper").await;
    h.post("/api/robots/arm/acquire", &op, json!({})).await;
    let (status, out) = h
        .post("/api/robots/arm/command", &op, json!({"v_h": [0.4, 0.0], "v_r": [0.0, 0.2], "m": 0.25, "gamma": 0.5, "dt": 0.02}))
        .await;
    assert_eq!(status, StatusCode::OK, "{out}");
    let pose = floats(&out["pose"]);
    let oracle: Vec<f64> = [(0.4, 0.0), (0.0, 0.2)]
        .iter()
        .map(|(vh, vr)| ((1.0 - 0.25) * 0.5 * vh + 0.25 * vr) * 0.02 + 0.0)
        .collect();
    assert_eq!(pose, oracle);
    assert_eq!(out["mode"], "shared");
    h.shutdown().await;
}

#[tokio::test]
async fn command_errors_map_to_status_codes() {
    let h = Harness::start().await;
    let _robot = h.connect_robot("arm", vec![0.0, 0.0, 0.0]).await;
    let op = h.login("oper").await;
    let op2 = h.login("oper2").await;
    let viewer = h.login("viewer").await;
    let cmd = json!({"v_h": [0.1, 0.0, 0.0], "dt": 0.01});

    let (status, body) = h.post("/api/robots/arm/command", &op, cmd.clone()).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "not_holder");

    h.post("/api/robots/arm/acquire", &op, json!({})).await;
    let (status, body) = h.post("/api/robots/arm/acquire", &op2, json!({})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "busy");
    let (status, body) = h.post("/api/robots/arm/command", &op2, cmd.clone()).await;
    assert_eq!((status, body["error"].as_str()), (StatusCode::CONFLICT, Some("not_holder")));

    let (status, body) = h.post("/api/robots/arm/command", &op, json!({"v_h": [0.1, 0.0], "dt": 0.01})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "dimension_mismatch");

    let (status, body) = h.post("/api/robots/arm/command", &viewer, cmd.clone()).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert_eq!(body["error"], "forbidden");

    let (status, _) = h.call(reqwest::Method::POST, "/api/robots/arm/command", None, Some(cmd.clone())).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);

    let (status, _) = h.post("/api/robots/ghost/command", &op, cmd.clone()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, body) = h.post("/api/robots/arm/command", &op, json!({"v_h": [0.1, 0.0, 0.0], "dt": -1.0})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");

    let (status, _) = h.post("/api/robots/arm/release", &op, json!({})).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = h.post("/api/robots/arm/acquire", &op2, json!({})).await;
    assert_eq!((status, body["status"].as_str()), (StatusCode::OK, Some("granted")));
    h.shutdown().await;
}

#[tokio::test]
async fn offline_robot_rejects_commands() {
    let h = Harness::start().await;
    let robot = h.connect_robot("arm", vec![0.0]).await;
    let op = h.login("oper").await;
    h.post("/api/robots/arm/acquire", &op, json!({})).await;
    drop(robot);
    let offline = common::eventually(Duration::from_secs(3), || async {
        let (status, body) = h.post("/api/robots/arm/command", &op, json!({"v_h": [0.1], "dt": 0.01})).await;
        (status == StatusCode::CONFLICT && body["error"] == "device_offline").then_some(())
    })
    .await;
    assert!(offline.is_some());
    h.shutdown().await;
}

#[tokio::test]
async fn workspace_and_rate_limits_apply() {
    let h = Harness::start().await;
    let _robot = h.connect_robot("arm", vec![9.99]).await;
    let op = h.login("oper").await;
    h.post("/api/robots/arm/acquire", &op, json!({})).await;
    // v_max defaults to 1 and dt_max to 0.1, so one step moves at most 0.1.
    let (_, out) = h.post("/api/robots/arm/command", &op, json!({"v_h": [50.0], "dt": 5.0})).await;
    assert_eq!(floats(&out["pose"]), vec![10.0]);
    assert_eq!(out["dt"], 0.1);
    h.shutdown().await;
}

#[tokio::test]
async fn logout_releases_held_robots() {
    let h = Harness::start().await;
    let _robot = h.connect_robot("arm", vec![0.0]).await;
    let op = h.login("oper").await;
    h.post("/api/robots/arm/acquire", &op, json!({})).await;
    let (status, body) = h.post("/api/logout", &op, json!({})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let op2 = h.login("oper2").await;
    let (_, body) = h.post("/api/robots/arm/acquire", &op2, json!({})).await;
    assert_eq!(body["status"], "granted");
    let (status, _) = h.get("/api/devices", &op).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    h.shutdown().await;
}

#[tokio::test]
async fn admin_force_release() {
    let h = Harness::start().await;
    let _robot = h.connect_robot("arm", vec![0.0]).await;
    let op = h.login("oper").await;
    let admin = h.login("admin").await;
    h.post("/api/robots/arm/acquire", &op, json!({})).await;
    let (status, _) = h.post("/api/robots/arm/release?force=true", &op, json!({})).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let (status, body) = h.post("/api/robots/arm/release?force=true", &admin, json!({})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert!(body["previous_holder"].is_string());
    let (status, body) = h.post("/api/robots/arm/command", &op, json!({"v_h": [0.1], "dt": 0.01})).await;
    assert_eq!((status, body["error"].as_str()), (StatusCode::CONFLICT, Some("not_holder")));
    h.shutdown().await;
}
