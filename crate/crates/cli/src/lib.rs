//! The `iohrt` command line.

pub mod client;
pub mod replay;

use std::ffi::OsString;
use std::io::Write;
use std::net::{IpAddr, SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use iohrt_core::auth::{Auth, AuthConfig, Role};
use iohrt_edgesim::{run_fleet, FleetConfig, GatewayEndpoints};
use iohrt_gateway::config::UserSeed;
use iohrt_gateway::{GatewayConfig, RunningGateway, USERS_FILE};
use iohrt_latencybench::{
    probe_datagram, probe_end_to_end, probe_stream, render_csv, EndToEndTarget, LatencyReport, ProbeOptions,
};
use serde_json::json;
use thiserror::Error;

use crate::client::GatewayClient;
use crate::replay::{replay, ReplayOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("gateway answered {status} {code}: {message}")]
    Http { status: u16, code: String, message: String },
    #[error("cannot reach gateway: {0}")]
    Transport(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "iohrt", version, about = "Teleoperation gateway, device simulator and latency bench")]
pub struct Cli {
    /// Gateway configuration file (JSON). Flags override its values.
    #[arg(long, global = true, env = "IOHRT_CONFIG")]
    pub config: Option<PathBuf>,
    /// Log filter, e.g. `info` or `iohrt_gateway=debug`.
    #[arg(long, global = true, env = "IOHRT_LOG", default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the gateway.
    Serve(ServeArgs),
    /// Run a simulated device fleet against a gateway.
    Sim(SimArgs),
    /// Benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Manage user accounts.
    #[command(subcommand)]
    Admin(AdminCommand),
    /// Re-issue a logged session's commands to a robot.
    Replay(ReplayArgs),
    /// Run a gateway and the demo fleet in one process.
    Demo(DemoArgs),
}

#[derive(Debug, Clone, Args)]
pub struct PortArgs {
    #[arg(long, env = "IOHRT_HTTP_PORT")]
    pub http_port: Option<u16>,
    #[arg(long, env = "IOHRT_DEVICE_PORT")]
    pub device_port: Option<u16>,
    #[arg(long, env = "IOHRT_FRAME_PORT")]
    pub frame_port: Option<u16>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// Address for all three listeners.
    #[arg(long)]
    pub bind: Option<IpAddr>,
    #[command(flatten)]
    pub ports: PortArgs,
    /// Directory for the telemetry, session and user logs; in-memory when absent.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// fsync every append.
    #[arg(long)]
    pub sync_writes: bool,
    /// Creates an `admin` account with this password when the user database is empty.
    #[arg(long, env = "IOHRT_ADMIN_PASSWORD")]
    pub admin_password: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct TargetArgs {
    /// Gateway host.
    #[arg(long, env = "IOHRT_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[command(flatten)]
    pub ports: PortArgs,
}

impl TargetArgs {
    fn resolve(&self, port: u16) -> Result<SocketAddr, CliError> {
        (self.host.as_str(), port)
            .to_socket_addrs()
            .map_err(|e| CliError::Usage(format!("cannot resolve {}: {e}", self.host)))?
            .next()
            .ok_or_else(|| CliError::Usage(format!("{} has no address", self.host)))
    }

    pub fn device(&self) -> Result<SocketAddr, CliError> {
        self.resolve(self.ports.device_port.unwrap_or(DEFAULT_DEVICE_PORT))
    }

    pub fn frame(&self) -> Result<SocketAddr, CliError> {
        self.resolve(self.ports.frame_port.unwrap_or(DEFAULT_FRAME_PORT))
    }

    pub fn http_url(&self) -> String {
        let host = if self.host.contains(':') { format!("[{}]", self.host) } else { self.host.clone() };
        format!("http://{host}:{}", self.ports.http_port.unwrap_or(DEFAULT_HTTP_PORT))
    }
}

const DEFAULT_DEVICE_PORT: u16 = 7400;
const DEFAULT_FRAME_PORT: u16 = 7401;
const DEFAULT_HTTP_PORT: u16 = 8080;

#[derive(Debug, Clone, Args)]
pub struct Credentials {
    #[arg(long, env = "IOHRT_USER")]
    pub user: Option<String>,
    #[arg(long, env = "IOHRT_PASSWORD", hide_env_values = true)]
    pub password: Option<String>,
    /// Bearer token; used instead of logging in.
    #[arg(long, env = "IOHRT_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
}

impl Credentials {
    async fn client(&self, base: String) -> Result<GatewayClient, CliError> {
        let mut c = GatewayClient::new(base);
        match (&self.token, &self.user, &self.password) {
            (Some(t), _, _) => Ok(c.with_token(t.clone())),
            (None, Some(u), Some(p)) => {
                c.login(u, p).await?;
                Ok(c)
            }
            _ => Err(CliError::Usage("give --token, or --user and --password".into())),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimArgs {
    /// Fleet description (JSON); the demo fleet when absent.
    #[arg(long)]
    pub fleet: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop after this many seconds instead of waiting for Ctrl-C.
    #[arg(long)]
    pub duration: Option<f64>,
    #[command(flatten)]
    pub target: TargetArgs,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Round-trip latency over the stream, datagram and command paths.
    Latency(LatencyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchPath {
    Stream,
    Datagram,
    E2e,
    All,
}

#[derive(Debug, Clone, Args)]
pub struct LatencyArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub path: BenchPath,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
    pub n: u32,
    /// CSV report file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Robot used by the end-to-end path.
    #[arg(long, default_value = "robot-7dof")]
    pub robot: String,
    /// Fraction of datagram probes withheld to exercise loss accounting.
    #[arg(long, default_value_t = 0.0)]
    pub loss: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5000)]
    pub timeout_ms: u64,
    #[command(flatten)]
    pub target: TargetArgs,
    #[command(flatten)]
    pub creds: Credentials,
}

#[derive(Debug, Subcommand)]
pub enum AdminCommand {
    /// Create an account.
    AddUser(AddUserArgs),
    /// Change an account's role.
    SetRole(SetRoleArgs),
}

#[derive(Debug, Clone, Args)]
pub struct AdminTarget {
    /// Edit the user database in this data directory directly (gateway stopped).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[command(flatten)]
    pub target: TargetArgs,
    #[command(flatten)]
    pub creds: Credentials,
}

#[derive(Debug, Clone, Args)]
pub struct AddUserArgs {
    #[arg(long)]
    pub username: String,
    #[arg(long = "new-password", env = "IOHRT_NEW_PASSWORD", hide_env_values = true)]
    pub new_password: String,
    #[arg(long, value_parser = parse_role)]
    pub role: Role,
    #[command(flatten)]
    pub at: AdminTarget,
}

#[derive(Debug, Clone, Args)]
pub struct SetRoleArgs {
    #[arg(long)]
    pub username: String,
    #[arg(long, value_parser = parse_role)]
    pub role: Role,
    #[command(flatten)]
    pub at: AdminTarget,
}

fn parse_role(s: &str) -> Result<Role, String> {
    s.parse::<Role>().map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub session: String,
    #[arg(long)]
    pub robot: String,
    /// Send commands back to back instead of at the logged pacing.
    #[arg(long)]
    pub no_pacing: bool,
    /// Replay even if the robot is not at the session's starting pose.
    #[arg(long)]
    pub allow_offset: bool,
    #[command(flatten)]
    pub target: TargetArgs,
    #[command(flatten)]
    pub creds: Credentials,
}

#[derive(Debug, Clone, Args)]
pub struct DemoArgs {
    #[command(flatten)]
    pub serve: ServeArgs,
    /// Password for the demo accounts admin, operator and viewer.
    #[arg(long, env = "IOHRT_DEMO_PASSWORD", default_value = "demo-password")]
    pub demo_password: String,
    #[arg(long)]
    pub duration: Option<f64>,
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(&cli.log);
    let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("iohrt: cannot start runtime: {e}");
            return EXIT_RUNTIME;
        }
    };
    match rt.block_on(execute(cli)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("iohrt: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(filter: &str) {
    let filter = tracing_subscriber::EnvFilter::try_new(filter).unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

pub async fn execute(cli: Cli) -> Result<(), CliError> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Serve(a) => serve(config, &a).await,
        Command::Sim(a) => sim(&a).await,
        Command::Bench(BenchCommand::Latency(a)) => bench_latency(&a).await,
        Command::Admin(a) => admin(a).await,
        Command::Replay(a) => replay_cmd(&a).await,
        Command::Demo(a) => demo(config, &a).await,
    }
}

/// Loads the config file (if any) and applies command-line overrides.
pub fn gateway_config(file: Option<&Path>, a: &ServeArgs) -> Result<GatewayConfig, CliError> {
    let mut cfg = match file {
        Some(p) => GatewayConfig::from_file(p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => GatewayConfig::default(),
    };
    if let Some(ip) = a.bind {
        cfg.device_addr.set_ip(ip);
        cfg.frame_addr.set_ip(ip);
        cfg.http_addr.set_ip(ip);
    }
    if let Some(p) = a.ports.device_port {
        cfg.device_addr.set_port(p);
    }
    if let Some(p) = a.ports.frame_port {
        cfg.frame_addr.set_port(p);
    }
    if let Some(p) = a.ports.http_port {
        cfg.http_addr.set_port(p);
    }
    if a.data_dir.is_some() {
        cfg.data_dir = a.data_dir.clone();
    }
    cfg.sync_writes |= a.sync_writes;
    if let Some(pw) = &a.admin_password {
        cfg.bootstrap_users.push(UserSeed { username: "admin".into(), password: pw.clone(), role: Role::Admin });
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

async fn start_gateway(cfg: GatewayConfig) -> Result<RunningGateway, CliError> {
    let gw = iohrt_gateway::start(cfg).await.map_err(runtime)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "listening device={} frame={} http={}", gw.device_addr, gw.frame_addr, gw.http_addr)?;
    out.flush()?;
    Ok(gw)
}

/// Resolves on Ctrl-C, SIGTERM, or after `duration` seconds.
async fn wait_for_stop(duration: Option<f64>) {
    let timer = async {
        match duration {
            Some(s) => tokio::time::sleep(Duration::from_secs_f64(s.max(0.0))).await,
            None => std::future::pending().await,
        }
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = term => {}
        _ = timer => {}
    }
}

async fn serve(config: Option<&Path>, a: &ServeArgs) -> Result<(), CliError> {
    let gw = start_gateway(gateway_config(config, a)?).await?;
    wait_for_stop(None).await;
    gw.shutdown().await.map_err(runtime)
}

fn fleet_config(a: &SimArgs) -> Result<FleetConfig, CliError> {
    let mut fleet = match &a.fleet {
        Some(p) => FleetConfig::from_file(p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => FleetConfig::demo(),
    };
    if let Some(s) = a.seed {
        fleet.seed = s;
    }
    fleet.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(fleet)
}

async fn sim(a: &SimArgs) -> Result<(), CliError> {
    let fleet = fleet_config(a)?;
    let n = fleet.device_count();
    let ep = GatewayEndpoints { device: a.target.device()?, frame: a.target.frame()? };
    let handle = run_fleet(fleet, ep).map_err(runtime)?;
    println!("simulating {n} devices against device={} frame={}", ep.device, ep.frame);
    wait_for_stop(a.duration).await;
    handle.stop().await;
    Ok(())
}

fn summary_line(r: &LatencyReport) -> String {
    let f = |v: Option<f64>| v.map_or("-".to_owned(), |x| format!("{x:.3}"));
    format!(
        "{:<10} n={:<4} mean={} ms max={} ms p50={} p95={} p99={} losses={} (round trip)",
        r.path.as_str(),
        r.n,
        f(r.mean),
        f(r.max),
        f(r.p50),
        f(r.p95),
        f(r.p99),
        r.losses
    )
}

async fn bench_latency(a: &LatencyArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.loss) {
        return Err(CliError::Usage("--loss must be within [0, 1]".into()));
    }
    let opts = ProbeOptions {
        n: a.n as usize,
        timeout: Duration::from_millis(a.timeout_ms),
        inject_loss: a.loss,
        seed: a.seed,
        ..ProbeOptions::default()
    };
    let want = |p: BenchPath| a.path == BenchPath::All || a.path == p;
    let mut reports = Vec::new();
    if want(BenchPath::Stream) {
        reports.push(probe_stream(a.target.device()?, &opts).await);
    }
    if want(BenchPath::Datagram) {
        reports.push(probe_datagram(a.target.frame()?, &opts).await);
    }
    if want(BenchPath::E2e) {
        let client = a.creds.client(a.target.http_url()).await?;
        let target = EndToEndTarget {
            base_url: client.base_url().to_owned(),
            token: client.token().unwrap_or_default().to_owned(),
            robot_id: a.robot.clone(),
        };
        reports.push(probe_end_to_end(&target, &opts).await);
    }
    let csv = render_csv(&reports);
    match &a.out {
        Some(p) => std::fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(p) = &a.json {
        std::fs::write(p, serde_json::to_vec_pretty(&reports).map_err(runtime)?)?;
    }
    for r in &reports {
        eprintln!("{}", summary_line(r));
        for e in &r.errors {
            eprintln!("  {}: {e}", r.path);
        }
    }
    match reports.iter().find(|r| r.n == 0) {
        Some(r) => Err(CliError::Runtime(format!("{} path produced no samples", r.path))),
        None => Ok(()),
    }
}

fn offline_auth(dir: &Path) -> Result<Auth, CliError> {
    let cfg = AuthConfig { users_file: Some(dir.join(USERS_FILE)), ..AuthConfig::default() };
    Auth::open(cfg).map_err(runtime)
}

async fn admin(cmd: AdminCommand) -> Result<(), CliError> {
    match cmd {
        AdminCommand::AddUser(a) => match &a.at.data_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let auth = offline_auth(dir)?;
                let u = auth.insert_user(&a.username, &a.new_password, a.role, iohrt_core::time::now_ms()).map_err(runtime)?;
                println!("created {} ({})", u.username, u.role);
                Ok(())
            }
            None => {
                let client = a.at.creds.client(a.at.target.http_url()).await?;
                let body = json!({ "username": a.username, "password": a.new_password, "role": a.role });
                let v = client.post("/api/users", body).await?;
                println!("created {} ({})", v["username"].as_str().unwrap_or_default(), v["role"].as_str().unwrap_or_default());
                Ok(())
            }
        },
        AdminCommand::SetRole(a) => match &a.at.data_dir {
            Some(dir) => {
                let auth = offline_auth(dir)?;
                let u = auth.assign_role(&a.username, a.role).map_err(runtime)?;
                println!("{} is now {}", u.username, u.role);
                Ok(())
            }
            None => {
                let client = a.at.creds.client(a.at.target.http_url()).await?;
                let v = client.put(&format!("/api/users/{}/role", a.username), json!({ "role": a.role })).await?;
                println!("{} is now {}", v["username"].as_str().unwrap_or_default(), v["role"].as_str().unwrap_or_default());
                Ok(())
            }
        },
    }
}

async fn replay_cmd(a: &ReplayArgs) -> Result<(), CliError> {
    let client = a.creds.client(a.target.http_url()).await?;
    let opts = ReplayOptions { pacing: !a.no_pacing, allow_offset: a.allow_offset };
    let out = replay(&client, &a.session, &a.robot, &opts).await?;
    println!("{}", serde_json::to_string(&out).map_err(runtime)?);
    Ok(())
}

async fn demo(config: Option<&Path>, a: &DemoArgs) -> Result<(), CliError> {
    let mut cfg = gateway_config(config, &a.serve)?;
    for (user, role) in [("admin", Role::Admin), ("operator", Role::Operator), ("viewer", Role::Viewer)] {
        cfg.bootstrap_users.push(UserSeed { username: user.into(), password: a.demo_password.clone(), role });
    }
    let gw = start_gateway(cfg).await?;
    let loopback = |addr: SocketAddr| if addr.ip().is_unspecified() { SocketAddr::from(([127, 0, 0, 1], addr.port())) } else { addr };
    let ep = GatewayEndpoints { device: loopback(gw.device_addr), frame: loopback(gw.frame_addr) };
    let fleet = run_fleet(FleetConfig::demo(), ep).map_err(runtime)?;
    println!("demo accounts admin / operator / viewer, password {:?}", a.demo_password);
    wait_for_stop(a.duration).await;
    fleet.stop().await;
    gw.shutdown().await.map_err(runtime)
}
