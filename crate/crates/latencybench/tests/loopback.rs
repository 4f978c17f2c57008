use std::time::Duration;

use iohrt_core::auth::{HashCost, Role};
use iohrt_edgesim::config::{FleetConfig, SimRobotConfig};
use iohrt_edgesim::{run_fleet, GatewayEndpoints};
use iohrt_gateway::config::UserSeed;
use iohrt_gateway::{start, GatewayConfig, RunningGateway};
use iohrt_latencybench::{probe_datagram, probe_end_to_end, probe_stream, EndToEndTarget, ProbeOptions};
use serde_json::json;

async fn gateway() -> RunningGateway {
    let mut cfg = GatewayConfig::loopback();
    cfg.hash_cost = HashCost { memory_kib: 64, iterations: 1 };
    cfg.bootstrap_users = vec![
        UserSeed { username: "oper".into(), password: "oper-password".into(), role: Role::Operator },
        UserSeed { username: "viewer".into(), password: "viewer-password".into(), role: Role::Viewer },
    ];
    start(cfg).await.unwrap()
}

async fn login(gw: &RunningGateway, user: &str) -> String {
    let resp = reqwest::Client::new()
        .post(format!("{}/api/login", gw.base_url()))
        .json(&json!({"username": user, "password": format!("{user}-password")}))
        .send()
        .await
        .unwrap();
    let v: serde_json::Value = resp.json().await.unwrap();
    v["token"].as_str().unwrap().to_owned()
}

#[tokio::test]
async fn stream_and_datagram_paths_on_loopback() {
    let gw = gateway().await;
    let opts = ProbeOptions { n: 50, ..ProbeOptions::default() };
    let r = probe_stream(gw.device_addr, &opts).await;
    assert_eq!((r.n, r.losses), (50, 0), "{:?}", r.errors);
    assert!(r.errors.is_empty());
    let r = probe_datagram(gw.frame_addr, &opts).await;
    assert!(r.n >= 48, "{r:?}");
    assert_eq!(r.n + r.losses, 50);
    gw.shutdown().await.unwrap();
}

#[tokio::test]
async fn injected_datagram_loss_is_accounted() {
    let gw = gateway().await;
    let opts = ProbeOptions { n: 100, inject_loss: 0.1, seed: 7, ..ProbeOptions::default() };
    let r = probe_datagram(gw.frame_addr, &opts).await;
    assert!((4..=18).contains(&r.losses), "{} losses", r.losses);
    assert_eq!(r.n + r.losses, 100);
    assert_eq!(r.samples_ms.len(), r.n);
    gw.shutdown().await.unwrap();
}

#[tokio::test]
async fn dead_host_yields_empty_report_with_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let opts = ProbeOptions { n: 3, timeout: Duration::from_millis(500), ..ProbeOptions::default() };
    let r = probe_stream(addr, &opts).await;
    assert_eq!(r.n, 0);
    assert!(r.mean.is_none());
    assert_eq!(r.errors.len(), 1);
}

#[tokio::test]
async fn end_to_end_path_with_simulated_robot() {
    let gw = gateway().await;
    let fleet = FleetConfig { robots: vec![SimRobotConfig { id: "arm".into(), ..SimRobotConfig::default() }], ..FleetConfig::default() };
    let sim = run_fleet(fleet, GatewayEndpoints { device: gw.device_addr, frame: gw.frame_addr }).unwrap();
    let mut connected = false;
    for _ in 0..200 {
        if gw.state.registry.lookup(&"arm".parse().unwrap()).is_some_and(|r| r.is_connected()) {
            connected = true;
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    assert!(connected);
    let before = sim.robot_pose("arm").unwrap();

    let target = EndToEndTarget { base_url: gw.base_url(), token: login(&gw, "oper").await, robot_id: "arm".into() };
    let r = probe_end_to_end(&target, &ProbeOptions { n: 20, ..ProbeOptions::default() }).await;
    assert_eq!((r.n, r.losses), (20, 0), "{:?}", r.errors);
    assert!(r.errors.is_empty(), "{:?}", r.errors);
    assert_eq!(sim.robot_pose("arm").unwrap(), before);

    let viewer = EndToEndTarget { token: login(&gw, "viewer").await, ..target };
    let r = probe_end_to_end(&viewer, &ProbeOptions { n: 5, ..ProbeOptions::default() }).await;
    assert_eq!(r.n, 0);
    assert!(r.errors[0].contains("403"), "{:?}", r.errors);
    sim.stop().await;
    gw.shutdown().await.unwrap();
}
