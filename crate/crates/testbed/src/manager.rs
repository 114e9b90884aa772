//! Node-manager side of the network and the orchestration run.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use fogbed_core::app::{control_endpoints, launch_plan, AppSpec, ContainerLimit, ControlEndpoint};
use fogbed_core::infra::{InfraOverlay, InfraUpdate};
use fogbed_core::netem::{build_agent_configs, AgentNetworkConfig, BaselineMeasurement};
use fogbed_core::schedule::{
    run_schedule, ActionError, AppCommand, Clock, CommandTarget, DeliveryReport, EventSource, ExperimentTrace, IncomingEvent,
    Schedule, ScheduleDriver, WaitResult,
};
use fogbed_core::units::Micros;
use fogbed_core::{InfrastructureModel, NodeId};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use crate::provider::{Lifecycle, TestbedState};

#[derive(Debug, thiserror::Error)]
pub enum ManagerError {
    #[error("{}", .0.iter().map(|(m, e)| format!("{m}: {e}")).collect::<Vec<_>>().join("; "))]
    Agents(Vec<(NodeId, String)>),
    #[error("no baseline between {0} and {1}: every probe was lost")]
    NoBaseline(NodeId, NodeId),
    #[error("invalid infrastructure update: {0}")]
    InvalidUpdate(String),
    #[error(transparent)]
    Provider(#[from] crate::provider::ProviderError),
    #[error("{0}")]
    Other(String),
}

pub const BASELINE_SAMPLES: u32 = 10;

/// Round trips between every machine pair, measured by the lower-id agent.
pub async fn measure_baselines(state: &TestbedState, samples: u32) -> Result<Vec<BaselineMeasurement>, ManagerError> {
    let ids: Vec<&NodeId> = state.handles.keys().collect();
    let probes = ids.iter().enumerate().filter(|(i, _)| *i + 1 < ids.len()).map(|(i, id)| {
        let h = &state.handles[*id];
        let peers: Vec<&NodeId> = ids[i + 1..].to_vec();
        let targets = peers.iter().map(|p| state.handles[*p].app_address).collect();
        async move { ((*id).clone(), peers, h.client().ping(targets, Some(samples)).await) }
    });
    let mut out = Vec::new();
    let mut failed = Vec::new();
    for (id, peers, result) in futures::future::join_all(probes).await {
        match result {
            Ok(report) => {
                for (peer, r) in peers.into_iter().zip(report.targets) {
                    let Some(avg) = r.rtt_avg_ms else {
                        return Err(ManagerError::NoBaseline(id, peer.clone()));
                    };
                    out.push(BaselineMeasurement { a: id.clone(), b: peer.clone(), rtt: Micros::from_millis_f64(avg) });
                }
            }
            Err(e) => failed.push((id, e.to_string())),
        }
    }
    if failed.is_empty() { Ok(out) } else { Err(ManagerError::Agents(failed)) }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ApplyReport {
    pub revision: u64,
    pub acknowledged: Vec<NodeId>,
    pub warnings: Vec<String>,
    /// Containers whose limits were pushed.
    pub limits: Vec<ContainerLimit>,
}

fn overlay_of(updates: &[InfraUpdate]) -> InfraOverlay {
    let mut overlay = InfraOverlay::default();
    for u in updates {
        overlay.apply(u);
    }
    overlay
}

/// The model with every recorded update applied.
pub fn current_model(state: &TestbedState) -> Result<InfrastructureModel, ManagerError> {
    overlay_of(&state.network.updates).materialize(&state.model).map_err(|e| ManagerError::InvalidUpdate(e.to_string()))
}

/// Adjacency lists for the current overlay, without sending them.
pub fn plan_configs(state: &TestbedState, revision: u64) -> Result<(Vec<AgentNetworkConfig>, Vec<String>), ManagerError> {
    let overlay = overlay_of(&state.network.updates);
    let model = overlay.materialize(&state.model).map_err(|e| ManagerError::InvalidUpdate(e.to_string()))?;
    let partitions: Vec<_> = overlay.partitions().cloned().collect();
    let plan = build_agent_configs(&model, &state.app_addresses(), &state.network.baselines, &partitions, revision)
        .map_err(|e| ManagerError::InvalidUpdate(e.to_string()))?;
    Ok((plan.configs, plan.warnings))
}

/// Measures baselines once, before any impairment is active.
pub async fn ensure_baselines(state: &mut TestbedState) -> Result<(), ManagerError> {
    if !state.network.baselines.is_empty() {
        return Ok(());
    }
    if state.network.revision > 0 {
        // clear whatever is active so the probes see the bare network
        let saved = std::mem::take(&mut state.network.updates);
        push_configs(state).await?;
        state.network.updates = saved;
    }
    state.network.baselines = measure_baselines(state, BASELINE_SAMPLES).await?;
    Ok(())
}

async fn push_configs(state: &mut TestbedState) -> Result<ApplyReport, ManagerError> {
    let revision = state.network.revision + 1;
    let (configs, warnings) = plan_configs(state, revision)?;
    state.network.revision = revision;
    let sends = configs.iter().map(|c| {
        let h = &state.handles[&c.agent];
        async move { (c.agent.clone(), h.client().apply_network(c).await) }
    });
    let mut report = ApplyReport { revision, warnings, ..Default::default() };
    let mut failed = Vec::new();
    for (id, r) in futures::future::join_all(sends).await {
        match r {
            Ok(ack) => {
                report.warnings.extend(ack.warnings);
                report.acknowledged.push(id);
            }
            Err(e) => failed.push((id, e.to_string())),
        }
    }
    if failed.is_empty() { Ok(report) } else { Err(ManagerError::Agents(failed)) }
}

/// Pushes the configs of the current model to every agent, measuring
/// baselines first if needed. Used after agents are (re)started.
pub async fn sync_network(state: &mut TestbedState) -> Result<ApplyReport, ManagerError> {
    state.require(Lifecycle::AgentsInstalled)?;
    ensure_baselines(state).await?;
    push_configs(state).await
}

/// Records `update`, pushes new adjacency lists to every agent and, with a
/// deployed application, the container limits of the manipulated model.
/// Returns after every agent acknowledged.
pub async fn apply_update(state: &mut TestbedState, update: &InfraUpdate) -> Result<ApplyReport, ManagerError> {
    state.require(Lifecycle::AgentsInstalled)?;
    let problems = update.check(&state.model);
    if !problems.is_empty() {
        let text: Vec<String> = problems.iter().map(ToString::to_string).collect();
        return Err(ManagerError::InvalidUpdate(text.join("; ")));
    }
    ensure_baselines(state).await?;
    let previous = state.network.updates.clone();
    if update.reset {
        state.network.updates.clear();
    }
    state.network.updates.push(update.clone());
    if let Err(e) = current_model(state) {
        state.network.updates = previous;
        return Err(e);
    }
    let mut report = push_configs(state).await?;
    if state.lifecycle == Lifecycle::Deployed {
        report.limits = push_limits(state).await?;
    }
    Ok(report)
}

async fn push_limits(state: &TestbedState) -> Result<Vec<ContainerLimit>, ManagerError> {
    let Some(doc) = state.app.clone() else { return Ok(Vec::new()) };
    let app = AppSpec::from_document(doc, &state.model).map_err(|e| ManagerError::Other(e.to_string()))?;
    let model = current_model(state)?;
    let plan = launch_plan(&app, &model, &state.app_addresses()).map_err(|e| ManagerError::Other(e.to_string()))?;
    let sends = plan.machines.iter().map(|(m, launches)| {
        let limits: Vec<ContainerLimit> = launches.iter().map(|l| l.limit.clone()).collect();
        let h = &state.handles[m];
        async move { (m.clone(), h.client().set_limits(&limits).await.map(|_| limits)) }
    });
    let mut out = Vec::new();
    let mut failed = Vec::new();
    for (m, r) in futures::future::join_all(sends).await {
        match r {
            Ok(l) => out.extend(l),
            Err(e) => failed.push((m, e.to_string())),
        }
    }
    if failed.is_empty() { Ok(out) } else { Err(ManagerError::Agents(failed)) }
}

/// Run clock anchored at construction.
#[derive(Debug, Clone, Copy)]
pub struct WallClock {
    start: Instant,
}

impl WallClock {
    pub fn start() -> Self {
        WallClock { start: Instant::now() }
    }
}

impl Clock for WallClock {
    fn now(&self) -> Duration {
        self.start.elapsed()
    }

    fn sleep_until(&self, t: Duration) {
        if let Some(d) = t.checked_sub(self.now()) {
            std::thread::sleep(d);
        }
    }
}

/// Body of `POST /events`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventPost {
    pub name: String,
    #[serde(default)]
    pub source: String,
}

/// Events queued by the HTTP server, in arrival order.
pub struct ChannelEvents {
    rx: mpsc::Receiver<IncomingEvent>,
}

impl EventSource for ChannelEvents {
    fn wait(&mut self, clock: &dyn Clock, deadline: Duration) -> WaitResult {
        let timeout = deadline.saturating_sub(clock.now());
        match self.rx.recv_timeout(timeout) {
            Ok(ev) => WaitResult::Event(ev),
            Err(mpsc::RecvTimeoutError::Timeout) => WaitResult::Deadline,
            Err(mpsc::RecvTimeoutError::Disconnected) => WaitResult::Closed,
        }
    }
}

#[derive(Clone)]
struct EventsState {
    tx: mpsc::Sender<IncomingEvent>,
    clock: WallClock,
}

async fn post_event(State(s): State<EventsState>, Json(ev): Json<EventPost>) -> StatusCode {
    let ev = IncomingEvent { name: ev.name, source: ev.source, at: s.clock.now() };
    match s.tx.send(ev) {
        Ok(()) => StatusCode::ACCEPTED,
        Err(_) => StatusCode::SERVICE_UNAVAILABLE,
    }
}

pub struct EventsServer {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<()>,
}

impl EventsServer {
    pub async fn stop(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.task).await;
    }
}

/// Serves `POST /events` on `bind`.
pub async fn serve_events(bind: SocketAddr, clock: WallClock) -> std::io::Result<(EventsServer, ChannelEvents)> {
    let (tx, rx) = mpsc::channel();
    let listener = tokio::net::TcpListener::bind(bind).await?;
    let addr = listener.local_addr()?;
    let app = Router::new().route("/events", post(post_event)).with_state(EventsState { tx, clock });
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async move {
                let _ = stop_rx.await;
            })
            .await;
    });
    Ok((EventsServer { addr, shutdown: Some(stop_tx), task }, ChannelEvents { rx }))
}

/// Drives a real testbed. Calls block on the given runtime handle, so the
/// run must happen off the async workers.
pub struct TestbedDriver {
    pub state: TestbedState,
    endpoints: Vec<ControlEndpoint>,
    http: reqwest::Client,
    rt: tokio::runtime::Handle,
    pub apply_reports: Vec<ApplyReport>,
}

impl TestbedDriver {
    pub fn new(state: TestbedState, rt: tokio::runtime::Handle) -> Result<Self, ManagerError> {
        let endpoints = match &state.app {
            Some(doc) => {
                let app = AppSpec::from_document(doc.clone(), &state.model).map_err(|e| ManagerError::Other(e.to_string()))?;
                control_endpoints(&app, &state.app_addresses())
            }
            None => Vec::new(),
        };
        let http = reqwest::Client::builder().timeout(Duration::from_secs(3)).no_proxy().build().expect("http client");
        Ok(TestbedDriver { state, endpoints, http, rt, apply_reports: Vec::new() })
    }

    pub fn recipients(&self) -> Vec<String> {
        self.endpoints.iter().map(label).collect()
    }

    fn deliver(&self, targets: &[(&ControlEndpoint, &'static str, &serde_json::Value)]) -> DeliveryReport {
        let sends = targets.iter().map(|(ep, path, body)| {
            let url = format!("http://{}/{path}", SocketAddr::new(ep.address, ep.port));
            let req = self.http.post(url).json(body);
            async move {
                let r = match req.send().await {
                    Ok(resp) if resp.status().is_success() => Ok(()),
                    Ok(resp) => Err(resp.status().to_string()),
                    Err(e) => Err(e.to_string()),
                };
                (label(ep), r)
            }
        });
        let mut report = DeliveryReport::default();
        for (who, r) in self.rt.block_on(futures::future::join_all(sends)) {
            match r {
                Ok(()) => report.delivered.push(who),
                Err(e) => {
                    report.failed.insert(who, e);
                }
            }
        }
        report
    }
}

fn label(ep: &ControlEndpoint) -> String {
    format!("{}@{}", ep.container, ep.machine)
}

impl ScheduleDriver for TestbedDriver {
    fn update_infrastructure(&mut self, _state: &str, update: &InfraUpdate) -> Result<Vec<String>, ActionError> {
        let report = self.rt.block_on(apply_update(&mut self.state, update)).map_err(|e| ActionError(e.to_string()))?;
        for w in &report.warnings {
            tracing::warn!("{w}");
        }
        let acks = report.acknowledged.iter().map(|a| a.to_string()).collect();
        self.apply_reports.push(report);
        Ok(acks)
    }

    fn issue_commands(&mut self, _state: &str, commands: &[AppCommand]) -> Result<DeliveryReport, ActionError> {
        let mut targets = Vec::new();
        for c in commands {
            let matching: Vec<&ControlEndpoint> = self
                .endpoints
                .iter()
                .filter(|ep| match &c.target {
                    CommandTarget::Container(name) => &ep.container == name,
                    CommandTarget::Machine(m) => ep.machine.as_str() == m,
                })
                .collect();
            if matching.is_empty() {
                return Err(ActionError(format!("no control endpoint for {}", c.target)));
            }
            targets.extend(matching.into_iter().map(|ep| (ep, "command", &c.payload)));
        }
        let report = self.deliver(&targets);
        if report.failed.is_empty() {
            Ok(report)
        } else {
            let text: Vec<String> = report.failed.iter().map(|(k, v)| format!("{k}: {v}")).collect();
            Err(ActionError(format!("command delivery failed: {}", text.join("; "))))
        }
    }

    fn broadcast(&mut self, _state: &str, message: &serde_json::Value) -> DeliveryReport {
        let targets: Vec<_> = self.endpoints.iter().map(|ep| (ep, "state", message)).collect();
        self.deliver(&targets)
    }
}

/// Runs `schedule` against the testbed in `state` with events taken from
/// `POST /events` on the manager address.
pub async fn orchestrate(state: TestbedState, schedule: Schedule) -> Result<(ExperimentTrace, TestbedState, Vec<ApplyReport>), ManagerError> {
    state.require(Lifecycle::AgentsInstalled)?;
    let clock = WallClock::start();
    let (server, mut events) =
        serve_events(state.events_addr(), clock).await.map_err(|e| ManagerError::Other(format!("events server: {e}")))?;
    let mut driver = TestbedDriver::new(state, tokio::runtime::Handle::current())?;
    let (trace, driver) = tokio::task::spawn_blocking(move || {
        let trace = run_schedule(&schedule, &mut driver, &clock, &mut events);
        (trace, driver)
    })
    .await
    .map_err(|e| ManagerError::Other(e.to_string()))?;
    server.stop().await;
    Ok((trace, driver.state, driver.apply_reports))
}

/// Per-agent network configs currently applied, keyed by machine.
pub async fn read_configs(state: &TestbedState) -> BTreeMap<NodeId, Result<AgentNetworkConfig, String>> {
    let reads = state.handles.values().map(|h| async move { (h.machine.clone(), h.client().network().await.map_err(|e| e.to_string())) });
    futures::future::join_all(reads).await.into_iter().collect()
}
