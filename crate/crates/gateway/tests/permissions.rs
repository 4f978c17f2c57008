mod common;

use common::{Harness, USERS};
use iohrt_core::auth::{role_allows, Action, Role};
use iohrt_core::protocol::DeviceKind;
use reqwest::{Method, StatusCode};
use serde_json::{json, Value};

/// One representative request per action.
fn request_for(action: Action) -> (Method, &'static str, Option<Value>) {
    use Action::*;
    match action {
        ReadDevices => (Method::GET, "/api/devices", None),
        ReadTelemetry => (Method::GET, "/api/sensors/temp/readings", None),
        ReadFrames => (Method::GET, "/api/cameras/cam/frame", None),
        ReadMissions => (Method::GET, "/api/missions", None),
        ReadRules => (Method::GET, "/api/rules", None),
        AcquireControl => (Method::POST, "/api/robots/arm/acquire", None),
        ReleaseControl => (Method::POST, "/api/robots/arm/release", None),
        SendCommand => (Method::POST, "/api/robots/arm/command", Some(json!({"v_h": [0.0], "dt": 0.01}))),
        SetGoal => (Method::POST, "/api/robots/arm/goal", Some(json!({"goal": [0.0]}))),
        SetActuator => (Method::POST, "/api/actuators/light/set", Some(json!({"channel": "level", "value": 0.5}))),
        AckMission => (Method::POST, "/api/missions/m-999/ack", None),
        ReadSessionLog => (Method::GET, "/api/sessions/none", None),
        RegisterDeviceConfig => (Method::PUT, "/api/robots/arm/config", Some(json!({}))),
        UpdateAnomalyRule => (Method::PUT, "/api/rules", Some(json!("not a list"))),
        ManageUsers => (Method::GET, "/api/users", None),
        ForceRelease => (Method::POST, "/api/robots/arm/release?force=true", None),
    }
}

#[tokio::test]
async fn every_role_action_pair_is_enforced() {
    let h = Harness::start().await;
    let _arm = h.connect_robot("arm", vec![0.0]).await;
    let _cam = h.connect_simple("cam", DeviceKind::Camera).await;
    let _light = h.connect_simple("light", DeviceKind::Actuator).await;
    let _temp = h.connect_simple("temp", DeviceKind::Sensor).await;
    let mut tokens = Vec::new();
    for (user, role) in USERS {
        tokens.push((role, h.login(user).await));
    }
    let mut checked = 0;
    for action in Action::ALL {
        let (method, path, body) = request_for(action);
        let (status, resp) = h.call(method.clone(), path, None, body.clone()).await;
        assert_eq!(status, StatusCode::UNAUTHORIZED, "{action:?} without token: {resp}");
        for (role, token) in &tokens {
            let (status, resp) = h.call(method.clone(), path, Some(token), body.clone()).await;
            if role_allows(*role, action) {
                assert!(
                    status != StatusCode::FORBIDDEN && status != StatusCode::UNAUTHORIZED,
                    "{role} {action:?} should pass authorization, got {status} {resp}"
                );
            } else {
                assert_eq!(status, StatusCode::FORBIDDEN, "{role} {action:?}: {resp}");
                assert_eq!(resp["error"], "forbidden");
            }
            checked += 1;
        }
    }
    assert_eq!(checked, Action::ALL.len() * USERS.len());
    h.shutdown().await;
}

#[tokio::test]
async fn admin_manages_users() {
    let h = Harness::start().await;
    let admin = h.login("admin").await;
    let (status, body) = h.post("/api/users", &admin, json!({"username": "newbie", "password": "pw-newbie-secret", "role": "viewer"})).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    let (status, _) = h.post("/api/users", &admin, json!({"username": "newbie", "password": "x-long-enough", "role": "viewer"})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let token = h.login("newbie").await;
    let (status, _) = h.post("/api/robots/arm/acquire", &token, json!({})).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let (status, body) = h.call(Method::PUT, "/api/users/newbie/role", Some(&admin), Some(json!({"role": "operator"}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let (status, _) = h.post("/api/robots/arm/acquire", &token, json!({})).await;
    assert_ne!(status, StatusCode::FORBIDDEN);
    let (_, users) = h.get("/api/users", &admin).await;
    assert!(users.as_array().unwrap().iter().all(|u| u.get("pass_hash").is_none()));
    assert_eq!(Role::ALL.len(), 4);
    h.shutdown().await;
}

#[tokio::test]
async fn bad_login_is_rejected() {
    let h = Harness::start().await;
    let (status, body) = h.call(Method::POST, "/api/login", None, Some(json!({"username": "oper", "password": "wrong"}))).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_eq!(body["error"], "invalid_credentials");
    let (status, _) = h.call(Method::POST, "/api/login", None, Some(json!({"username": "ghost", "password": "wrong"}))).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = h.get("/api/health", "").await;
    assert_eq!(status, StatusCode::OK);
    h.shutdown().await;
}
