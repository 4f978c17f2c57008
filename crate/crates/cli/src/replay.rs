//! Re-issues a logged session against a robot through the REST API.

use std::time::Duration;

use iohrt_core::store::SessionLogEntry;
use serde::Serialize;
use serde_json::json;

use crate::client::GatewayClient;
use crate::CliError;

/// Largest allowed gap between the replayed and logged final pose.
pub const REPLAY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Default)]
pub struct ReplayOptions {
    /// Sleep each entry's logged `dt` between commands.
    pub pacing: bool,
    /// Replay even if the robot does not start at the logged starting pose.
    pub allow_offset: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayOutcome {
    pub commands: usize,
    pub final_pose: Vec<f64>,
    pub logged_final: Option<Vec<f64>>,
    pub start_offset: f64,
    pub max_deviation: f64,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

async fn setpoint(client: &GatewayClient, robot: &str) -> Result<Vec<f64>, CliError> {
    let dev = client.get(&format!("/api/devices/{robot}")).await?;
    serde_json::from_value(dev["robot"]["setpoint"].clone())
        .map_err(|_| CliError::Runtime(format!("{robot} is not a connected robot")))
}

pub async fn replay(client: &GatewayClient, session: &str, robot: &str, opts: &ReplayOptions) -> Result<ReplayOutcome, CliError> {
    let log: Vec<SessionLogEntry> = serde_json::from_value(client.get(&format!("/api/sessions/{session}")).await?)
        .map_err(|e| CliError::Runtime(format!("malformed session log: {e}")))?;
    let entries: Vec<_> = log.into_iter().filter(|e| e.device_id.as_str() == robot).collect();
    let start = setpoint(client, robot).await?;
    let Some(first) = entries.first() else {
        return Ok(ReplayOutcome { commands: 0, final_pose: start, logged_final: None, start_offset: 0.0, max_deviation: 0.0 });
    };
    let start_offset = max_abs_diff(&start, &first.prev_pose);
    if start_offset > REPLAY_TOLERANCE && !opts.allow_offset {
        return Err(CliError::Runtime(format!(
            "robot {robot} is {start_offset:e} away from the session's starting pose; pass --allow-offset to replay anyway"
        )));
    }
    let grant = client.post(&format!("/api/robots/{robot}/acquire"), json!({})).await?;
    let acquired = grant["status"] == "granted";

    let result = async {
        let mut pose = start.clone();
        for (i, e) in entries.iter().enumerate() {
            if opts.pacing && i > 0 {
                tokio::time::sleep(Duration::from_secs_f64(e.dt.max(0.0))).await;
            }
            let out = client
                .post(
                    &format!("/api/robots/{robot}/command"),
                    json!({ "v_h": e.v_h, "v_r": e.v_r, "gamma": e.gamma, "m": e.m, "dt": e.dt }),
                )
                .await?;
            pose = serde_json::from_value(out["pose"].clone()).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        Ok::<_, CliError>(pose)
    }
    .await;
    if acquired {
        let _ = client.post(&format!("/api/robots/{robot}/release"), json!({})).await;
    }
    let final_pose = result?;
    let logged_final = entries.last().map(|e| e.pose.clone()).expect("non-empty");
    let max_deviation = max_abs_diff(&final_pose, &logged_final);
    let outcome =
        ReplayOutcome { commands: entries.len(), final_pose, logged_final: Some(logged_final), start_offset, max_deviation };
    if !opts.allow_offset && max_deviation > REPLAY_TOLERANCE {
        return Err(CliError::Runtime(format!("replay diverged from the log by {max_deviation:e}")));
    }
    Ok(outcome)
}
