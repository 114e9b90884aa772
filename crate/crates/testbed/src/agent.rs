//! The per-machine node agent: REST control on the management address,
//! UDP echo (and optionally the impairment relay) on the application address.

use std::collections::BTreeMap;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use fogbed_core::app::ContainerLimit;
use fogbed_core::netem::{render_shaper_script, AgentNetworkConfig, ScriptOptions};
use fogbed_core::NodeId;
use serde::{Deserialize, Serialize};
use tokio::net::{TcpListener, UdpSocket};
use tokio::sync::oneshot;

use crate::proxy::{spawn_relay, ProxyTable, Relay, RelayStats};
use crate::runtime::ContainerRuntime;

pub const DEFAULT_AGENT_PORT: u16 = 3100;
pub const DEFAULT_ECHO_PORT: u16 = 3101;
pub const DEFAULT_RELAY_PORT: u16 = 3102;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    /// Render and execute `tc` scripts. Linux only, needs privileges.
    CommandScript,
    /// Shape in the built-in user-space relay.
    #[default]
    Proxy,
    /// Record scripts without applying anything.
    Noop,
}

pub trait ShaperBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    /// Replaces every active rule with `config`. Returns once active.
    fn apply(&self, config: &AgentNetworkConfig) -> Result<(), String>;
}

/// Writes each script to disk, then runs it with `sh -e`.
#[derive(Debug, Clone)]
pub struct CommandScriptBackend {
    pub options: ScriptOptions,
    pub script_dir: PathBuf,
}

impl ShaperBackend for CommandScriptBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::CommandScript
    }

    fn apply(&self, config: &AgentNetworkConfig) -> Result<(), String> {
        let script = render_shaper_script(config, &self.options).to_text();
        std::fs::create_dir_all(&self.script_dir).map_err(|e| e.to_string())?;
        let path = self.script_dir.join(format!("network-{:06}.sh", config.revision));
        std::fs::write(&path, &script).map_err(|e| e.to_string())?;
        let out = std::process::Command::new("sh").arg("-e").arg(&path).output().map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(format!("{} failed: {}", path.display(), String::from_utf8_lossy(&out.stderr).trim()))
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProxyBackend {
    pub table: ProxyTable,
}

impl ShaperBackend for ProxyBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Proxy
    }

    fn apply(&self, config: &AgentNetworkConfig) -> Result<(), String> {
        self.table.replace(config);
        Ok(())
    }
}

/// Dry run: keeps every rendered script.
#[derive(Debug, Default)]
pub struct NoopBackend {
    pub options: ScriptOptions,
    pub scripts: Mutex<Vec<String>>,
}

impl ShaperBackend for NoopBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Noop
    }

    fn apply(&self, config: &AgentNetworkConfig) -> Result<(), String> {
        let script = render_shaper_script(config, &self.options).to_text();
        self.scripts.lock().expect("scripts lock").push(script);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentStatus {
    pub agent: NodeId,
    pub pid: u32,
    pub uptime_s: f64,
    pub applied_revision: u64,
    pub shaper_backend: BackendKind,
    pub rules: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relay: Option<RelayStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub revision: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PingRequest {
    pub targets: Vec<IpAddr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<u32>,
    /// Echo port on the targets; defaults to this agent's own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub port: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PingResult {
    pub target: IpAddr,
    pub samples: u32,
    pub received: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtt_avg_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtt_stddev_ms: Option<f64>,
    pub loss_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PingReport {
    pub targets: Vec<PingResult>,
}

pub const DEFAULT_PING_SAMPLES: u32 = 10;
const PING_TIMEOUT: Duration = Duration::from_millis(300);

#[derive(Debug, Clone)]
pub struct AgentOptions {
    pub id: NodeId,
    /// REST endpoint, on the management network.
    pub listen: SocketAddr,
    pub app_address: IpAddr,
    pub echo_port: u16,
    pub relay_port: u16,
    pub backend: BackendKind,
    /// Where scripts and logs go.
    pub root: PathBuf,
    pub device: String,
}

#[derive(Debug)]
struct Snapshot {
    config: AgentNetworkConfig,
    warnings: Vec<String>,
}

struct AgentState {
    id: NodeId,
    started: Instant,
    echo_port: u16,
    app_address: IpAddr,
    backend: Arc<dyn ShaperBackend>,
    runtime: Option<Arc<dyn ContainerRuntime>>,
    relay: Option<Relay>,
    snapshot: RwLock<Snapshot>,
    apply_lock: tokio::sync::Mutex<()>,
}

type Shared = Arc<AgentState>;

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

async fn status(State(s): State<Shared>) -> Json<AgentStatus> {
    let snap = s.snapshot.read().expect("snapshot lock");
    Json(AgentStatus {
        agent: s.id.clone(),
        pid: std::process::id(),
        uptime_s: s.started.elapsed().as_secs_f64(),
        applied_revision: snap.config.revision,
        shaper_backend: s.backend.kind(),
        rules: snap.config.entries.len(),
        warnings: snap.warnings.clone(),
        relay: s.relay.as_ref().map(Relay::stats),
    })
}

async fn get_network(State(s): State<Shared>) -> Json<AgentNetworkConfig> {
    Json(s.snapshot.read().expect("snapshot lock").config.clone())
}

async fn put_network(State(s): State<Shared>, Json(config): Json<AgentNetworkConfig>) -> Response {
    let _serial = s.apply_lock.lock().await;
    let current = s.snapshot.read().expect("snapshot lock").config.clone();
    if config.agent != s.id {
        return error(StatusCode::BAD_REQUEST, format!("config is for `{}`, this is `{}`", config.agent, s.id));
    }
    if config.revision <= current.revision {
        return error(
            StatusCode::CONFLICT,
            format!("stale revision {} (applied: {})", config.revision, current.revision),
        );
    }
    let backend = s.backend.clone();
    let next = config.clone();
    let result = tokio::task::spawn_blocking(move || backend.apply(&next)).await.unwrap_or_else(|e| Err(e.to_string()));
    match result {
        Ok(()) => {
            let mut snap = s.snapshot.write().expect("snapshot lock");
            snap.config = config;
            Json(Ack { revision: snap.config.revision, warnings: Vec::new() }).into_response()
        }
        Err(e) => {
            let backend = s.backend.clone();
            let prev = current.clone();
            let restored = tokio::task::spawn_blocking(move || backend.apply(&prev)).await.map_or(false, |r| r.is_ok());
            let msg = format!(
                "revision {} failed: {e}; {} revision {}",
                config.revision,
                if restored { "restored" } else { "could not restore" },
                current.revision
            );
            tracing::warn!("{msg}");
            s.snapshot.write().expect("snapshot lock").warnings.push(msg.clone());
            error(StatusCode::INTERNAL_SERVER_ERROR, msg)
        }
    }
}

async fn put_limits(State(s): State<Shared>, Json(limits): Json<Vec<ContainerLimit>>) -> Response {
    let _serial = s.apply_lock.lock().await;
    let Some(rt) = s.runtime.clone() else {
        return error(StatusCode::NOT_IMPLEMENTED, "this agent manages no containers");
    };
    if let Some(bad) = limits.iter().find(|l| l.cpu.0 == 0 || l.memory_bytes == 0) {
        return error(StatusCode::BAD_REQUEST, format!("limits for `{}` must be positive", bad.container));
    }
    let known = match rt.limits() {
        Ok(l) => l,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    if let Some(unknown) = limits.iter().find(|l| !known.contains_key(&l.container)) {
        return error(StatusCode::NOT_FOUND, format!("unknown container `{}`", unknown.container));
    }
    let result = tokio::task::spawn_blocking(move || {
        for l in &limits {
            rt.update_limit(l)?;
        }
        rt.limits()
    })
    .await;
    match result {
        Ok(Ok(all)) => Json(all).into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn get_limits(State(s): State<Shared>) -> Response {
    match s.runtime.as_ref().map(|rt| rt.limits()) {
        None => Json(BTreeMap::<String, ContainerLimit>::new()).into_response(),
        Some(Ok(l)) => Json(l).into_response(),
        Some(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn ping(State(s): State<Shared>, Json(req): Json<PingRequest>) -> Response {
    if req.targets.is_empty() {
        return error(StatusCode::BAD_REQUEST, "no ping targets");
    }
    let port = req.port.unwrap_or(s.echo_port);
    let samples = req.samples.unwrap_or(DEFAULT_PING_SAMPLES).max(1);
    let probes = req.targets.iter().map(|t| measure(s.app_address, SocketAddr::new(*t, port), samples));
    let targets = futures::future::join_all(probes).await;
    Json(PingReport { targets }).into_response()
}

/// `samples` sequential UDP echo round trips from `from` to `target`.
pub async fn measure(from: IpAddr, target: SocketAddr, samples: u32) -> PingResult {
    let mut rtts = Vec::new();
    if let Ok(sock) = UdpSocket::bind(SocketAddr::new(from, 0)).await {
        let mut buf = [0u8; 64];
        for seq in 0..samples {
            let start = Instant::now();
            if sock.send_to(&seq.to_be_bytes(), target).await.is_err() {
                continue;
            }
            let reply = tokio::time::timeout(PING_TIMEOUT, async {
                loop {
                    match sock.recv_from(&mut buf).await {
                        Ok((4, _)) if buf[..4] == seq.to_be_bytes() => return true,
                        Ok(_) => continue,
                        Err(_) => return false,
                    }
                }
            })
            .await;
            if matches!(reply, Ok(true)) {
                rtts.push(start.elapsed().as_secs_f64() * 1e3);
            }
        }
    }
    let received = rtts.len() as u32;
    let (avg, sd) = if rtts.is_empty() {
        (None, None)
    } else {
        let n = rtts.len() as f64;
        let mean = rtts.iter().sum::<f64>() / n;
        let var = rtts.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        (Some(mean), Some(var.sqrt()))
    };
    PingResult {
        target: target.ip(),
        samples,
        received,
        rtt_avg_ms: avg,
        rtt_stddev_ms: sd,
        loss_fraction: 1.0 - f64::from(received) / f64::from(samples),
    }
}

/// Answers every datagram with itself.
pub async fn spawn_echo(bind: SocketAddr) -> std::io::Result<SocketAddr> {
    let sock = UdpSocket::bind(bind).await?;
    let addr = sock.local_addr()?;
    tokio::spawn(async move {
        let mut buf = vec![0u8; 2048];
        loop {
            if let Ok((n, from)) = sock.recv_from(&mut buf).await {
                let _ = sock.send_to(&buf[..n], from).await;
            }
        }
    });
    Ok(addr)
}

fn router(state: Shared) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/ping", axum::routing::post(ping))
        .route("/network", get(get_network).put(put_network))
        .route("/limits", get(get_limits).put(put_limits))
        .with_state(state)
}

/// Handle to an agent running inside the current process.
pub struct RunningAgent {
    pub rest: SocketAddr,
    pub echo: SocketAddr,
    pub relay: Option<Relay>,
    shutdown: Option<oneshot::Sender<()>>,
    server: tokio::task::JoinHandle<()>,
}

impl RunningAgent {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.rest)
    }

    pub async fn stop(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.server).await;
    }

    /// Serves until `signal` resolves or the server fails.
    pub async fn serve_until(mut self, signal: impl std::future::Future<Output = ()>) {
        tokio::select! {
            _ = signal => self.stop().await,
            _ = &mut self.server => {}
        }
    }
}

/// Starts an agent with an explicit backend (tests inject failing ones).
pub async fn start_agent_with(
    opts: &AgentOptions,
    backend: Arc<dyn ShaperBackend>,
    relay: Option<Relay>,
    runtime: Option<Arc<dyn ContainerRuntime>>,
) -> std::io::Result<RunningAgent> {
    let echo = spawn_echo(SocketAddr::new(opts.app_address, opts.echo_port)).await?;
    let state = Arc::new(AgentState {
        id: opts.id.clone(),
        started: Instant::now(),
        echo_port: echo.port(),
        app_address: opts.app_address,
        backend,
        runtime,
        relay: relay.clone(),
        snapshot: RwLock::new(Snapshot { config: AgentNetworkConfig::empty(opts.id.clone()), warnings: Vec::new() }),
        apply_lock: tokio::sync::Mutex::new(()),
    });
    let listener = TcpListener::bind(opts.listen).await?;
    let rest = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(state);
    let server = tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async move {
                let _ = rx.await;
            })
            .await;
    });
    Ok(RunningAgent { rest, echo, relay, shutdown: Some(tx), server })
}

/// Starts an agent with the backend named in `opts`.
pub async fn start_agent(opts: &AgentOptions, runtime: Option<Arc<dyn ContainerRuntime>>) -> std::io::Result<RunningAgent> {
    let script_options = ScriptOptions { device: opts.device.clone(), protected: vec![opts.listen.ip()] };
    let (backend, relay): (Arc<dyn ShaperBackend>, Option<Relay>) = match opts.backend {
        BackendKind::CommandScript => (
            Arc::new(CommandScriptBackend { options: script_options, script_dir: opts.root.join("scripts") }),
            None,
        ),
        BackendKind::Noop => (Arc::new(NoopBackend { options: script_options, ..Default::default() }), None),
        BackendKind::Proxy => {
            let table = ProxyTable::default();
            let seed = opts.id.as_str().bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b)));
            let relay = spawn_relay(SocketAddr::new(opts.app_address, opts.relay_port), table.clone(), seed).await?;
            (Arc::new(ProxyBackend { table }), Some(relay))
        }
    };
    start_agent_with(opts, backend, relay, runtime).await
}
