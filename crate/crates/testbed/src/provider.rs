//! Provisioning of the emulated machine fleet.

use std::collections::{BTreeMap, BTreeSet};
use std::future::Future;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use fogbed_core::app::AppDocument;
use fogbed_core::infra::{map_machine_to_type, CatalogError, InfraUpdate, MachineCatalogEntry, Resources};
use fogbed_core::netem::BaselineMeasurement;
use fogbed_core::{InfrastructureModel, NodeId};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{BackendKind, DEFAULT_AGENT_PORT, DEFAULT_ECHO_PORT, DEFAULT_RELAY_PORT};
use crate::client::AgentClient;
use crate::procs;
use crate::runtime::{ContainerRuntime, LocalProcessRuntime};

pub const DEFAULT_EVENTS_PORT: u16 = 3200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderDescriptor {
    pub name: String,
    pub catalog: Vec<MachineCatalogEntry>,
    pub supports_real_shaping: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineHandle {
    pub machine: NodeId,
    pub app_address: IpAddr,
    pub management_address: IpAddr,
    pub agent_port: u16,
    /// Where the access credentials live; deleted on destroy.
    pub credentials: PathBuf,
    pub type_name: String,
    /// What the machine type provides beyond the model.
    pub surplus: Resources,
}

impl MachineHandle {
    pub fn agent_addr(&self) -> SocketAddr {
        SocketAddr::new(self.management_address, self.agent_port)
    }

    pub fn client(&self) -> AgentClient {
        AgentClient::new(self.agent_addr())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lifecycle {
    Bootstrapped,
    AgentsInstalled,
    Deployed,
    Destroyed,
}

/// Network bookkeeping of the node manager.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    /// Last revision sent to the agents.
    pub revision: u64,
    /// Updates applied since the last reset, in order.
    pub updates: Vec<InfraUpdate>,
    pub baselines: Vec<BaselineMeasurement>,
}

/// Everything later CLI invocations need to find the testbed again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestbedState {
    pub provider: String,
    pub root: PathBuf,
    pub model_hash: String,
    pub model: InfrastructureModel,
    /// Where the node manager listens for events.
    pub manager_address: IpAddr,
    pub events_port: u16,
    pub handles: BTreeMap<NodeId, MachineHandle>,
    pub lifecycle: Lifecycle,
    #[serde(default)]
    pub backend: BackendKind,
    #[serde(default)]
    pub agents: BTreeMap<NodeId, u32>,
    #[serde(default)]
    pub network: NetworkState,
    /// The deployed application, with absolute local paths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app: Option<AppDocument>,
}

impl TestbedState {
    pub fn load(path: &Path) -> Result<Option<Self>, ProviderError> {
        match std::fs::read_to_string(path) {
            Ok(s) => serde_json::from_str(&s)
                .map(Some)
                .map_err(|e| ProviderError::StateFile(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes through a temporary file so readers never see half a state.
    pub fn save(&self, path: &Path) -> Result<(), ProviderError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self).expect("state serializes"))?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn require(&self, at_least: Lifecycle) -> Result<(), ProviderError> {
        if self.lifecycle == Lifecycle::Destroyed || self.lifecycle < at_least {
            Err(ProviderError::Lifecycle { need: at_least, have: self.lifecycle })
        } else {
            Ok(())
        }
    }

    /// Moves forward; never backwards.
    pub fn advance(&mut self, to: Lifecycle) {
        if to > self.lifecycle {
            self.lifecycle = to;
        }
    }

    pub fn app_addresses(&self) -> BTreeMap<NodeId, IpAddr> {
        self.handles.iter().map(|(id, h)| (id.clone(), h.app_address)).collect()
    }

    pub fn events_addr(&self) -> SocketAddr {
        SocketAddr::new(self.manager_address, self.events_port)
    }
}

pub fn model_hash(model: &InfrastructureModel) -> String {
    hex::encode(Sha256::digest(model.to_json().as_bytes()))
}

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("the infrastructure model has no machines")]
    EmptyModel,
    #[error("testbed is already bootstrapped with a different model; destroy it first")]
    ModelMismatch,
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("{machines} machines do not fit into one local address block (max 254)")]
    AddressExhausted { machines: usize },
    #[error("testbed is {have:?}, needs at least {need:?}")]
    Lifecycle { need: Lifecycle, have: Lifecycle },
    #[error("agents failed on {}", .0.iter().map(|(m, e)| format!("{m} ({e})")).collect::<Vec<_>>().join(", "))]
    AgentsFailed(Vec<(NodeId, String)>),
    #[error("unknown machine `{0}`")]
    UnknownMachine(NodeId),
    #[error("bad state file {0}")]
    StateFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DestroyReport {
    pub stopped_agents: usize,
    pub stopped_containers: usize,
    pub errors: Vec<String>,
}

/// Contract every provider fulfils. Only the local provider exists; a cloud
/// provider would implement the same operations and pass [`conformance`].
pub trait Provider {
    fn descriptor(&self) -> ProviderDescriptor;
    /// One machine per model machine, none for routers. Idempotent for the
    /// same model.
    fn bootstrap(&self, model: &InfrastructureModel, existing: Option<TestbedState>) -> Result<TestbedState, ProviderError>;
    /// (Re)installs every agent and waits until each answers `/status`.
    fn install_agents(&self, state: &mut TestbedState) -> impl Future<Output = Result<(), ProviderError>> + Send;
    /// Restarts agents that died. Returns the machines that were restarted.
    fn respawn_agents(&self, state: &mut TestbedState) -> impl Future<Output = Result<Vec<NodeId>, ProviderError>> + Send;
    fn runtime(&self, state: &TestbedState, machine: &NodeId) -> Result<Arc<dyn ContainerRuntime>, ProviderError>;
    /// Releases everything. Idempotent and best effort.
    fn destroy(&self, state: &mut TestbedState) -> DestroyReport;
    /// Resources still held for `state` (processes, sockets, ...). Empty after destroy.
    fn audit(&self, state: &TestbedState) -> Vec<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalPorts {
    pub agent: u16,
    pub echo: u16,
    pub relay: u16,
    pub events: u16,
}

impl Default for LocalPorts {
    fn default() -> Self {
        LocalPorts { agent: DEFAULT_AGENT_PORT, echo: DEFAULT_ECHO_PORT, relay: DEFAULT_RELAY_PORT, events: DEFAULT_EVENTS_PORT }
    }
}

impl LocalPorts {
    /// Defaults, overridden by `FOGBED_{AGENT,ECHO,RELAY,EVENTS}_PORT`.
    pub fn from_env() -> Self {
        let get = |var: &str, default: u16| std::env::var(var).ok().and_then(|v| v.parse().ok()).unwrap_or(default);
        let d = Self::default();
        LocalPorts {
            agent: get("FOGBED_AGENT_PORT", d.agent),
            echo: get("FOGBED_ECHO_PORT", d.echo),
            relay: get("FOGBED_RELAY_PORT", d.relay),
            events: get("FOGBED_EVENTS_PORT", d.events),
        }
    }
}

/// Machines are agent processes on this host. Machine `i` (in id order)
/// gets application address `127.B.1.i` and management address `127.B.2.i`;
/// the manager uses `127.B.0.1`.
#[derive(Debug, Clone)]
pub struct LocalProvider {
    pub root: PathBuf,
    /// Executable with the `agent` and `mock-app` subcommands.
    pub program: PathBuf,
    pub block: u8,
    pub ports: LocalPorts,
    pub backend: BackendKind,
    pub startup_timeout: Duration,
}

impl LocalProvider {
    pub fn new(root: impl Into<PathBuf>, program: impl Into<PathBuf>) -> Self {
        let root = root.into();
        let block = std::env::var("FOGBED_LOCAL_BLOCK").ok().and_then(|b| b.parse().ok()).unwrap_or_else(|| default_block(&root));
        LocalProvider {
            root,
            program: program.into(),
            block,
            ports: LocalPorts::from_env(),
            backend: BackendKind::Proxy,
            startup_timeout: Duration::from_secs(10),
        }
    }

    pub fn catalog() -> Vec<MachineCatalogEntry> {
        vec![
            MachineCatalogEntry::new("local.small", 1.0, 1024, 10_240, 1),
            MachineCatalogEntry::new("local.medium", 2.0, 4096, 20_480, 2),
            MachineCatalogEntry::new("local.large", 4.0, 16_384, 51_200, 3),
            MachineCatalogEntry::new("local.xlarge", 16.0, 131_072, 204_800, 4),
        ]
    }

    fn machine_root(&self, machine: &NodeId) -> PathBuf {
        self.root.join("machines").join(machine.as_str())
    }

    fn local_runtime(&self, state: &TestbedState, h: &MachineHandle) -> LocalProcessRuntime {
        LocalProcessRuntime {
            root: self.machine_root(&h.machine),
            machine: h.machine.clone(),
            bind: h.app_address,
            relay: (self.backend == BackendKind::Proxy).then(|| SocketAddr::new(h.app_address, self.ports.relay)),
            events_url: Some(format!("http://{}/events", state.events_addr())),
            program: self.program.clone(),
        }
    }

    fn spawn_agent(&self, h: &MachineHandle) -> std::io::Result<u32> {
        let root = self.machine_root(&h.machine);
        let mut cmd = Command::new(&self.program);
        cmd.arg("agent")
            .arg("--id")
            .arg(h.machine.as_str())
            .arg("--port")
            .arg(h.agent_port.to_string())
            .arg("--listen-address")
            .arg(h.management_address.to_string())
            .arg("--app-address")
            .arg(h.app_address.to_string())
            .arg("--echo-port")
            .arg(self.ports.echo.to_string())
            .arg("--relay-port")
            .arg(self.ports.relay.to_string())
            .arg("--backend")
            .arg(match self.backend {
                BackendKind::CommandScript => "command-script",
                BackendKind::Proxy => "proxy",
                BackendKind::Noop => "noop",
            })
            .arg("--root")
            .arg(&root)
            .arg("--local-runtime")
            .env_remove("FOGBED_AGENT_PORT");
        procs::spawn_detached(cmd, &root.join("agent.log"))
    }

    /// Polls `/status` until it answers, the process dies or time runs out.
    async fn probe(&self, h: &MachineHandle, pid: u32) -> Result<(), String> {
        let client = AgentClient::with_timeout(h.agent_addr(), Duration::from_secs(2));
        let deadline = Instant::now() + self.startup_timeout;
        loop {
            match client.status().await {
                Ok(s) if s.agent == h.machine && s.pid == pid => return Ok(()),
                Ok(s) => return Err(format!("port already served by agent `{}` (pid {})", s.agent, s.pid)),
                Err(e) => {
                    if !procs::is_alive(pid) {
                        let log = std::fs::read_to_string(self.machine_root(&h.machine).join("agent.log")).unwrap_or_default();
                        let last = log.lines().last().unwrap_or("no output").to_string();
                        return Err(format!("agent exited: {last}"));
                    }
                    if Instant::now() >= deadline {
                        return Err(e.to_string());
                    }
                }
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
    }

    async fn start_agents(&self, state: &mut TestbedState, which: &[NodeId]) -> Result<(), ProviderError> {
        let mut failed = Vec::new();
        let mut started = Vec::new();
        for id in which {
            let h = &state.handles[id];
            if let Some(old) = state.agents.remove(id) {
                procs::terminate(old, Duration::from_secs(2));
            }
            match self.spawn_agent(h) {
                Ok(pid) => {
                    state.agents.insert(id.clone(), pid);
                    started.push((h.clone(), pid));
                }
                Err(e) => failed.push((id.clone(), e.to_string())),
            }
        }
        let probes = started.iter().map(|(h, pid)| async move { (h.machine.clone(), self.probe(h, *pid).await) });
        for (id, result) in futures::future::join_all(probes).await {
            if let Err(e) = result {
                failed.push((id, e));
            }
        }
        if failed.is_empty() {
            Ok(())
        } else {
            failed.sort();
            Err(ProviderError::AgentsFailed(failed))
        }
    }
}

fn default_block(root: &Path) -> u8 {
    let digest = Sha256::digest(root.to_string_lossy().as_bytes());
    10 + digest[0] % 240
}

impl Provider for LocalProvider {
    fn descriptor(&self) -> ProviderDescriptor {
        ProviderDescriptor {
            name: "local".into(),
            catalog: Self::catalog(),
            supports_real_shaping: self.backend == BackendKind::CommandScript,
        }
    }

    fn bootstrap(&self, model: &InfrastructureModel, existing: Option<TestbedState>) -> Result<TestbedState, ProviderError> {
        let machines = model.machine_ids();
        if machines.is_empty() {
            return Err(ProviderError::EmptyModel);
        }
        if machines.len() > 254 {
            return Err(ProviderError::AddressExhausted { machines: machines.len() });
        }
        let hash = model_hash(model);
        if let Some(prev) = existing.filter(|s| s.lifecycle != Lifecycle::Destroyed) {
            return if prev.model_hash == hash { Ok(prev) } else { Err(ProviderError::ModelMismatch) };
        }

        let catalog = Self::catalog();
        let mut selections = Vec::with_capacity(machines.len());
        for id in &machines {
            let spec = model.require_machine(id).map_err(|_| ProviderError::UnknownMachine(id.clone()))?;
            selections.push(map_machine_to_type(spec, &catalog)?);
        }

        let created = self.root.join("machines");
        let result = (|| {
            let mut handles = BTreeMap::new();
            for (i, (id, sel)) in machines.iter().zip(selections).enumerate() {
                let host = (i + 1) as u8;
                std::fs::create_dir_all(self.machine_root(id))?;
                let credentials = self.root.join("credentials").join(format!("{id}.token"));
                std::fs::create_dir_all(credentials.parent().expect("has parent"))?;
                std::fs::write(&credentials, hex::encode(rand::random::<[u8; 16]>()))?;
                handles.insert(
                    id.clone(),
                    MachineHandle {
                        machine: id.clone(),
                        app_address: Ipv4Addr::new(127, self.block, 1, host).into(),
                        management_address: Ipv4Addr::new(127, self.block, 2, host).into(),
                        agent_port: self.ports.agent,
                        credentials,
                        type_name: sel.entry.type_name,
                        surplus: sel.surplus,
                    },
                );
            }
            Ok::<_, ProviderError>(handles)
        })();
        let handles = match result {
            Ok(h) => h,
            Err(e) => {
                let _ = std::fs::remove_dir_all(&created);
                let _ = std::fs::remove_dir_all(self.root.join("credentials"));
                return Err(e);
            }
        };
        Ok(TestbedState {
            provider: "local".into(),
            root: self.root.clone(),
            model_hash: hash,
            model: model.clone(),
            manager_address: Ipv4Addr::new(127, self.block, 0, 1).into(),
            events_port: self.ports.events,
            handles,
            lifecycle: Lifecycle::Bootstrapped,
            backend: self.backend,
            agents: BTreeMap::new(),
            network: NetworkState::default(),
            app: None,
        })
    }

    async fn install_agents(&self, state: &mut TestbedState) -> Result<(), ProviderError> {
        state.require(Lifecycle::Bootstrapped)?;
        let all: Vec<NodeId> = state.handles.keys().cloned().collect();
        // fresh agents start at revision 0
        state.network.revision = 0;
        state.network.updates.clear();
        match self.start_agents(state, &all).await {
            Ok(()) => {
                state.advance(Lifecycle::AgentsInstalled);
                Ok(())
            }
            Err(e) => {
                state.lifecycle = Lifecycle::Bootstrapped;
                Err(e)
            }
        }
    }

    async fn respawn_agents(&self, state: &mut TestbedState) -> Result<Vec<NodeId>, ProviderError> {
        state.require(Lifecycle::AgentsInstalled)?;
        let dead: Vec<NodeId> = state
            .handles
            .keys()
            .filter(|id| state.agents.get(*id).is_none_or(|pid| !procs::is_alive(*pid)))
            .cloned()
            .collect();
        if !dead.is_empty() {
            self.start_agents(state, &dead).await?;
        }
        Ok(dead)
    }

    fn runtime(&self, state: &TestbedState, machine: &NodeId) -> Result<Arc<dyn ContainerRuntime>, ProviderError> {
        let h = state.handles.get(machine).ok_or_else(|| ProviderError::UnknownMachine(machine.clone()))?;
        Ok(Arc::new(self.local_runtime(state, h)))
    }

    fn destroy(&self, state: &mut TestbedState) -> DestroyReport {
        let mut report = DestroyReport::default();
        for h in state.handles.values() {
            let rt = self.local_runtime(state, h);
            report.stopped_containers += rt.running_pids().len();
            for c in rt.containers() {
                if let Err(e) = rt.stop(&c) {
                    report.errors.push(format!("{}: {c}: {e}", h.machine));
                }
            }
        }
        for (_, pid) in std::mem::take(&mut state.agents) {
            if procs::is_alive(pid) {
                report.stopped_agents += 1;
            }
            procs::terminate(pid, Duration::from_secs(2));
        }
        for dir in [self.root.join("machines"), self.root.join("credentials")] {
            if let Err(e) = std::fs::remove_dir_all(&dir) {
                if e.kind() != std::io::ErrorKind::NotFound {
                    report.errors.push(format!("{}: {e}", dir.display()));
                }
            }
        }
        state.lifecycle = Lifecycle::Destroyed;
        state.network = NetworkState::default();
        state.app = None;
        report
    }

    fn audit(&self, state: &TestbedState) -> Vec<String> {
        let mut out = Vec::new();
        let marker = self.root.to_string_lossy().into_owned();
        for pid in processes_mentioning(&marker) {
            out.push(format!("process {pid} still running"));
        }
        let ours: BTreeSet<IpAddr> = state
            .handles
            .values()
            .flat_map(|h| [h.app_address, h.management_address])
            .chain([state.manager_address])
            .collect();
        for s in bound_sockets() {
            if ours.contains(&s.addr.ip()) {
                out.push(format!("{} socket bound on {}", s.proto, s.addr));
            }
        }
        out
    }
}

/// Live processes (other than this one) whose command line or environment
/// contains `needle`.
pub fn processes_mentioning(needle: &str) -> Vec<u32> {
    let me = std::process::id();
    let Ok(dir) = std::fs::read_dir("/proc") else { return Vec::new() };
    let mut out: Vec<u32> = dir
        .filter_map(|e| e.ok()?.file_name().to_str()?.parse::<u32>().ok())
        .filter(|pid| *pid != me)
        .filter(|pid| {
            let hit = |f: &str| {
                std::fs::read(format!("/proc/{pid}/{f}"))
                    .map(|b| b.split(|c| *c == 0).any(|part| String::from_utf8_lossy(part).contains(needle)))
                    .unwrap_or(false)
            };
            (hit("cmdline") || hit("environ")) && procs::is_alive(*pid)
        })
        .collect();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundSocket {
    pub proto: &'static str,
    pub addr: SocketAddr,
}

/// Listening TCP and bound UDP IPv4 sockets from `/proc/net`.
pub fn bound_sockets() -> Vec<BoundSocket> {
    let mut out = Vec::new();
    for (proto, file, listen_only) in [("tcp", "/proc/net/tcp", true), ("udp", "/proc/net/udp", false)] {
        let Ok(text) = std::fs::read_to_string(file) else { continue };
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() < 4 || (listen_only && cols[3] != "0A") {
                continue;
            }
            if let Some(addr) = parse_proc_addr(cols[1]) {
                out.push(BoundSocket { proto, addr });
            }
        }
    }
    out
}

fn parse_proc_addr(s: &str) -> Option<SocketAddr> {
    let (ip, port) = s.split_once(':')?;
    let ip = u32::from_str_radix(ip, 16).ok()?;
    let port = u16::from_str_radix(port, 16).ok()?;
    Some(SocketAddr::new(Ipv4Addr::from(ip.to_le_bytes()).into(), port))
}

/// Provider-independent checks. Each returns a description of the first
/// broken expectation.
pub mod conformance {
    use super::*;

    pub async fn lifecycle<P: Provider>(provider: &P, model: &InfrastructureModel) -> Result<(), String> {
        let mut state = provider.bootstrap(model, None).map_err(|e| e.to_string())?;
        let again = provider.bootstrap(model, Some(state.clone())).map_err(|e| e.to_string())?;
        if again != state {
            return Err("second bootstrap changed the state".into());
        }
        if state.handles.len() != model.machine_ids().len() {
            return Err(format!("{} handles for {} machines", state.handles.len(), model.machine_ids().len()));
        }
        let mut addrs = BTreeSet::new();
        for h in state.handles.values() {
            if h.app_address == h.management_address {
                return Err(format!("{} shares its application and management address", h.machine));
            }
            if !addrs.insert(h.app_address) || !addrs.insert(h.management_address) {
                return Err(format!("{} reuses an address", h.machine));
            }
        }
        if provider.bootstrap(&InfrastructureModel::new(vec![], vec![]).map_err(|e| e.to_string())?, None).is_ok() {
            return Err("empty model was accepted".into());
        }
        provider.install_agents(&mut state).await.map_err(|e| e.to_string())?;
        for h in state.handles.values() {
            let st = h.client().status().await.map_err(|e| e.to_string())?;
            if st.agent != h.machine || st.applied_revision != 0 {
                return Err(format!("{} reports {:?}", h.machine, st));
            }
        }
        provider.install_agents(&mut state).await.map_err(|e| format!("reinstall: {e}"))?;
        if state.lifecycle != Lifecycle::AgentsInstalled {
            return Err(format!("lifecycle {:?} after install", state.lifecycle));
        }
        let report = provider.destroy(&mut state);
        if !report.errors.is_empty() {
            return Err(format!("destroy errors: {:?}", report.errors));
        }
        let leaks = provider.audit(&state);
        if !leaks.is_empty() {
            return Err(format!("leaked after destroy: {leaks:?}"));
        }
        provider.destroy(&mut state);
        if state.lifecycle != Lifecycle::Destroyed {
            return Err("double destroy changed lifecycle".into());
        }
        Ok(())
    }
}
