//! Stand-in application component for the local runtime.
//!
//! Sends numbered UDP messages to its peers, logs what it receives, and
//! reports events to the node manager while it keeps getting input.

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::extract::State;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::io::AsyncWriteExt;
use tokio::net::UdpSocket;
use tokio::sync::mpsc;

use crate::proxy::encode_envelope;

#[derive(Debug, Clone, clap::Args)]
pub struct MockAppArgs {
    /// UDP port to receive on.
    #[arg(long)]
    pub listen: Option<u16>,
    /// JSONL log, as a path inside the container filesystem.
    #[arg(long)]
    pub output: Option<String>,
    /// Peers as `host[,host...]:port`. Repeatable.
    #[arg(long = "to")]
    pub to: Vec<String>,
    #[arg(long, value_parser = humantime::parse_duration, default_value = "1s")]
    pub every: Duration,
    /// Event name reported to the manager.
    #[arg(long)]
    pub emit: Option<String>,
    #[arg(long, value_parser = humantime::parse_duration, default_value = "1s")]
    pub emit_every: Duration,
    /// Only emit while input arrived within this window.
    #[arg(long, value_parser = humantime::parse_duration)]
    pub require_input: Option<Duration>,
}

/// Settings the runtime passes through the environment.
#[derive(Debug, Clone, Default)]
pub struct MockEnv {
    pub container: String,
    pub fs_root: Option<PathBuf>,
    pub bind: Option<IpAddr>,
    pub relay: Option<SocketAddr>,
    pub events_url: Option<String>,
    pub control_port: Option<u16>,
}

impl MockEnv {
    pub fn from_env() -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        MockEnv {
            container: var("FOGBED_CONTAINER").unwrap_or_else(|| "mock-app".into()),
            fs_root: var("FOGBED_FS_ROOT").map(PathBuf::from),
            bind: var("FOGBED_BIND").and_then(|v| v.parse().ok()),
            relay: var("FOGBED_RELAY").and_then(|v| v.parse().ok()),
            events_url: var("FOGBED_EVENTS_URL"),
            control_port: var("FOGBED_CONTROL_PORT").and_then(|v| v.parse().ok()),
        }
    }
}

/// Expands `a,b:port` into one address per host.
pub fn parse_peers(spec: &str) -> Result<Vec<SocketAddr>, String> {
    let (hosts, port) = spec.rsplit_once(':').ok_or_else(|| format!("`{spec}` lacks a port"))?;
    let port: u16 = port.parse().map_err(|_| format!("bad port in `{spec}`"))?;
    hosts
        .split(',')
        .filter(|h| !h.is_empty())
        .map(|h| h.parse::<IpAddr>().map(|ip| SocketAddr::new(ip, port)).map_err(|_| format!("bad host `{h}` in `{spec}`")))
        .collect()
}

fn unix_us() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_micros() as u64)
}

#[derive(Debug, Default)]
struct Shared {
    seq: u64,
    sent: u64,
    received: u64,
    emitted: u64,
    muted: bool,
    last_input: Option<Instant>,
    state: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MockStatus {
    pub container: String,
    pub sent: u64,
    pub received: u64,
    pub emitted: u64,
    pub muted: bool,
    pub state: Option<String>,
}

#[derive(Clone)]
struct Ctx {
    container: String,
    shared: Arc<Mutex<Shared>>,
    log: mpsc::UnboundedSender<Value>,
}

async fn command(State(c): State<Ctx>, Json(body): Json<Value>) -> Json<Value> {
    {
        let mut s = c.shared.lock().expect("mock state");
        if body.get("restart_sequence").and_then(Value::as_bool) == Some(true) {
            s.seq = 0;
        }
        if let Some(m) = body.get("mute").and_then(Value::as_bool) {
            s.muted = m;
        }
    }
    let _ = c.log.send(json!({"at_us": unix_us(), "command": body}));
    Json(json!({"ok": true}))
}

async fn state_change(State(c): State<Ctx>, Json(body): Json<Value>) -> Json<Value> {
    let name = body.get("state").and_then(Value::as_str).map(str::to_string);
    c.shared.lock().expect("mock state").state = name;
    let _ = c.log.send(json!({"at_us": unix_us(), "broadcast": body}));
    Json(json!({"ok": true}))
}

async fn status(State(c): State<Ctx>) -> Json<MockStatus> {
    let s = c.shared.lock().expect("mock state");
    Json(MockStatus {
        container: c.container.clone(),
        sent: s.sent,
        received: s.received,
        emitted: s.emitted,
        muted: s.muted,
        state: s.state.clone(),
    })
}

/// Runs until SIGTERM or Ctrl-C.
pub async fn run(args: MockAppArgs, env: MockEnv) -> anyhow::Result<()> {
    let bind = env.bind.unwrap_or(IpAddr::from([127, 0, 0, 1]));
    let peers: Vec<SocketAddr> =
        args.to.iter().map(|s| parse_peers(s)).collect::<Result<Vec<_>, _>>().map_err(anyhow::Error::msg)?.concat();
    let shared = Arc::new(Mutex::new(Shared::default()));
    let (log_tx, mut log_rx) = mpsc::unbounded_channel::<Value>();

    let output = args.output.as_ref().map(|o| {
        let rel = o.trim_start_matches('/');
        match &env.fs_root {
            Some(root) => root.join(rel),
            None => PathBuf::from(o),
        }
    });
    let writer = tokio::spawn(async move {
        let mut file = match output {
            Some(path) => {
                if let Some(dir) = path.parent() {
                    let _ = tokio::fs::create_dir_all(dir).await;
                }
                tokio::fs::OpenOptions::new().create(true).append(true).open(path).await.ok()
            }
            None => None,
        };
        while let Some(line) = log_rx.recv().await {
            if let Some(f) = file.as_mut() {
                let _ = f.write_all(format!("{line}\n").as_bytes()).await;
            }
        }
        if let Some(f) = file.as_mut() {
            let _ = f.flush().await;
        }
    });

    let send_sock = Arc::new(UdpSocket::bind(SocketAddr::new(bind, 0)).await?);
    let mut tasks = Vec::new();

    if let Some(port) = args.listen {
        let sock = UdpSocket::bind(SocketAddr::new(bind, port)).await?;
        let (shared, log) = (shared.clone(), log_tx.clone());
        tasks.push(tokio::spawn(async move {
            let mut buf = vec![0u8; 2048];
            loop {
                let Ok((n, from)) = sock.recv_from(&mut buf).await else { continue };
                let now = unix_us();
                let msg: Value = serde_json::from_slice(&buf[..n]).unwrap_or(Value::Null);
                {
                    let mut s = shared.lock().expect("mock state");
                    s.received += 1;
                    s.last_input = Some(Instant::now());
                }
                let latency_ms = msg.get("sent_us").and_then(Value::as_u64).map(|t| now.saturating_sub(t) as f64 / 1e3);
                let _ = log.send(json!({
                    "at_us": now,
                    "recv_from": msg.get("from").cloned().unwrap_or_else(|| Value::String(from.to_string())),
                    "seq": msg.get("seq"),
                    "latency_ms": latency_ms,
                    "bytes": n,
                }));
            }
        }));
    }

    if !peers.is_empty() {
        let (shared, sock, container) = (shared.clone(), send_sock.clone(), env.container.clone());
        let relay = env.relay;
        let every = args.every;
        tasks.push(tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            loop {
                tick.tick().await;
                let seq = {
                    let mut s = shared.lock().expect("mock state");
                    s.seq += 1;
                    s.sent += peers.len() as u64;
                    s.seq
                };
                for p in &peers {
                    let payload = serde_json::to_vec(&json!({"from": container, "seq": seq, "sent_us": unix_us()})).expect("json");
                    let _ = match relay {
                        Some(r) => sock.send_to(&encode_envelope(*p, &payload), r).await,
                        None => sock.send_to(&payload, *p).await,
                    };
                }
            }
        }));
    }

    if let (Some(name), Some(url)) = (args.emit.clone(), env.events_url.clone()) {
        let (shared, container, log) = (shared.clone(), env.container.clone(), log_tx.clone());
        let window = args.require_input;
        let http = reqwest::Client::builder().timeout(Duration::from_secs(2)).no_proxy().build()?;
        let every = args.emit_every;
        tasks.push(tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            tick.tick().await;
            loop {
                tick.tick().await;
                let due = {
                    let s = shared.lock().expect("mock state");
                    !s.muted && window.is_none_or(|w| s.last_input.is_some_and(|t| t.elapsed() <= w))
                };
                if !due {
                    continue;
                }
                let sent = http.post(&url).json(&json!({"name": name, "source": container})).send().await;
                if sent.is_ok_and(|r| r.status().is_success()) {
                    shared.lock().expect("mock state").emitted += 1;
                    let _ = log.send(json!({"at_us": unix_us(), "emitted": name}));
                }
            }
        }));
    }

    if let Some(port) = env.control_port {
        let ctx = Ctx { container: env.container.clone(), shared: shared.clone(), log: log_tx.clone() };
        let app = Router::new()
            .route("/command", post(command))
            .route("/state", post(state_change))
            .route("/status", get(status))
            .with_state(ctx);
        let listener = tokio::net::TcpListener::bind(SocketAddr::new(bind, port)).await?;
        tasks.push(tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        }));
    }

    let _ = log_tx.send(json!({"at_us": unix_us(), "started": env.container}));
    shutdown_signal().await;
    for t in &tasks {
        t.abort();
    }
    for t in tasks {
        let _ = t.await;
    }
    let _ = log_tx.send(json!({"at_us": unix_us(), "stopped": env.container}));
    drop(log_tx);
    let _ = writer.await;
    Ok(())
}

/// Resolves on SIGTERM or Ctrl-C.
pub async fn shutdown_signal() {
    use tokio::signal::unix::{signal, SignalKind};
    let mut term = signal(SignalKind::terminate()).expect("signal handler");
    tokio::select! {
        _ = term.recv() => {}
        _ = tokio::signal::ctrl_c() => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peer_lists() {
        assert_eq!(parse_peers("10.0.0.1:5003").unwrap(), vec!["10.0.0.1:5003".parse().unwrap()]);
        assert_eq!(
            parse_peers("10.0.0.1,10.0.0.3:5003").unwrap(),
            vec!["10.0.0.1:5003".parse().unwrap(), "10.0.0.3:5003".parse::<SocketAddr>().unwrap()]
        );
        assert!(parse_peers("10.0.0.1").is_err());
        assert!(parse_peers("x:1").is_err());
    }
}
