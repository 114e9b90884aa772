//! Command-line front end of the node manager.

use std::ffi::OsString;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fogbed_core::app::{AppDocument, AppSpec};
use fogbed_core::infra::{effective_properties, InfraOverlay, InfraUpdate};
use fogbed_core::netem::render_impairment_table;
use fogbed_core::schedule::{check_references, validate_schedule, Schedule};
use fogbed_core::{InfrastructureModel, NodeId};
use serde_json::{json, Value};

use crate::agent::{start_agent, AgentOptions, BackendKind};
use crate::appmgr::{self, AppReport, Runtimes};
use crate::manager;
use crate::mockapp::{self, MockAppArgs, MockEnv};
use crate::provider::{Lifecycle, LocalProvider, Provider, TestbedState};
use crate::runtime::{ContainerRuntime, LocalProcessRuntime};

#[derive(Debug, Parser)]
#[command(name = "fogbed", version, about = "Emulated fog testbeds: provision, manipulate, orchestrate")]
pub struct Cli {
    /// Infrastructure model (JSON).
    #[arg(long, global = true)]
    pub infra: Option<PathBuf>,
    /// Containers and deployment (JSON).
    #[arg(long, global = true)]
    pub app: Option<PathBuf>,
    /// Orchestration schedule (JSON).
    #[arg(long, global = true)]
    pub schedule: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "local")]
    pub provider: ProviderKind,
    /// Testbed state file shared between invocations.
    #[arg(long, global = true, env = "FOGBED_STATE", default_value = ".fogbed/state.json")]
    pub state: PathBuf,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    Local,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Provision one machine per model machine.
    Bootstrap {
        /// Working directory of the local provider. Defaults next to the state file.
        #[arg(long)]
        root: Option<PathBuf>,
        /// Shaper backend of the agents.
        #[arg(long, value_enum, default_value = "proxy")]
        backend: BackendKind,
    },
    /// Node agents.
    #[command(subcommand)]
    Agents(AgentsCommand),
    /// Application-network manipulation.
    #[command(subcommand)]
    Network(NetworkCommand),
    /// Release every resource of the testbed.
    Destroy,
    /// Application lifecycle.
    #[command(subcommand)]
    App(AppCommand),
    /// Experiment orchestration.
    #[command(subcommand)]
    Orchestrate(OrchestrateCommand),
    /// Effective path properties.
    #[command(subcommand)]
    Paths(PathsCommand),
    /// Schedule checks.
    #[command(subcommand)]
    Schedule(ScheduleCommand),
    #[command(hide = true)]
    Agent(AgentArgs),
    #[command(hide = true, name = "mock-app")]
    MockApp(MockAppArgs),
}

#[derive(Debug, Subcommand)]
pub enum AgentsCommand {
    /// (Re)install the agent on every machine.
    Install,
    /// Restart agents that are no longer running.
    Respawn,
}

#[derive(Debug, Subcommand)]
pub enum NetworkCommand {
    /// Apply an infrastructure update on top of earlier ones.
    Modify {
        /// Update document (JSON).
        #[arg(long, required_unless_present = "reset")]
        update: Option<PathBuf>,
        /// Drop every manipulation.
        #[arg(long)]
        reset: bool,
    },
    /// Print the adjacency list of every agent.
    Show,
}

#[derive(Debug, Subcommand)]
pub enum AppCommand {
    Prepare,
    Start,
    Stop,
    Collect {
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum OrchestrateCommand {
    Run {
        /// Where to write the JSONL trace. Defaults next to the state file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum PathsCommand {
    Show {
        from: String,
        to: String,
        /// Update documents to apply first, in order.
        #[arg(long)]
        update: Vec<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ScheduleCommand {
    Validate,
}

#[derive(Debug, Clone, Args)]
pub struct AgentArgs {
    #[arg(long)]
    pub id: String,
    #[arg(long, env = "FOGBED_AGENT_PORT", default_value_t = crate::agent::DEFAULT_AGENT_PORT)]
    pub port: u16,
    /// Management address the REST endpoint binds to.
    #[arg(long, default_value = "127.0.0.1")]
    pub listen_address: IpAddr,
    /// Application address used for echo, relay and pings.
    #[arg(long, default_value = "127.0.0.1")]
    pub app_address: IpAddr,
    #[arg(long, env = "FOGBED_ECHO_PORT", default_value_t = crate::agent::DEFAULT_ECHO_PORT)]
    pub echo_port: u16,
    #[arg(long, env = "FOGBED_RELAY_PORT", default_value_t = crate::agent::DEFAULT_RELAY_PORT)]
    pub relay_port: u16,
    #[arg(long, value_enum, default_value = "proxy")]
    pub backend: BackendKind,
    #[arg(long, default_value = ".")]
    pub root: PathBuf,
    /// Application-network interface for the command-script backend.
    #[arg(long, default_value = "eth0")]
    pub device: String,
    /// Manage containers of the local process runtime below `--root`.
    #[arg(long)]
    pub local_runtime: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

fn fail(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

/// Result of one verb: human text plus a JSON value, and whether it fully
/// succeeded.
#[derive(Debug, Clone)]
pub struct Output {
    pub ok: bool,
    pub text: String,
    pub json: Value,
}

impl Output {
    fn ok(text: impl Into<String>, json: Value) -> Self {
        Output { ok: true, text: text.into(), json }
    }
}

fn require<'a>(flag: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, CliError> {
    flag.as_deref().ok_or_else(|| CliError::Usage(format!("missing required flag --{name} <file>")))
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| fail(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<InfrastructureModel, CliError> {
    InfrastructureModel::parse(&read(path)?).map_err(|e| fail(format!("{}: {e}", path.display())))
}

/// Reads an app document and makes its local paths absolute, relative to the
/// document's directory.
pub fn load_app_document(path: &Path) -> Result<AppDocument, CliError> {
    let mut doc: AppDocument = serde_json::from_str(&read(path)?).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let base = std::fs::canonicalize(&base).unwrap_or(base);
    for c in &mut doc.containers {
        for d in &mut c.copy_dirs {
            if d.local.is_relative() {
                d.local = base.join(&d.local);
            }
        }
    }
    Ok(doc)
}

fn load_update(path: &Path) -> Result<InfraUpdate, CliError> {
    serde_json::from_str(&read(path)?).map_err(|e| fail(format!("{}: {e}", path.display())))
}

fn load_state(cli: &Cli) -> Result<TestbedState, CliError> {
    TestbedState::load(&cli.state)
        .map_err(fail)?
        .ok_or_else(|| fail(format!("no testbed at {}; run `fogbed bootstrap` first", cli.state.display())))
}

fn save_state(cli: &Cli, state: &TestbedState) -> Result<(), CliError> {
    state.save(&cli.state).map_err(fail)
}

fn program() -> PathBuf {
    std::env::current_exe().unwrap_or_else(|_| PathBuf::from("fogbed"))
}

fn provider_for(state: &TestbedState) -> LocalProvider {
    let mut p = LocalProvider::new(&state.root, program());
    if let IpAddr::V4(v4) = state.manager_address {
        p.block = v4.octets()[1];
    }
    if let Some(h) = state.handles.values().next() {
        p.ports.agent = h.agent_port;
    }
    p.ports.events = state.events_port;
    p.backend = state.backend;
    p
}

fn runtimes(provider: &LocalProvider, state: &TestbedState) -> Result<Runtimes, CliError> {
    state
        .handles
        .keys()
        .map(|m| provider.runtime(state, m).map(|rt| (m.clone(), rt)).map_err(fail))
        .collect()
}

fn app_spec(state: &TestbedState) -> Result<AppSpec, CliError> {
    let doc = state.app.clone().ok_or_else(|| fail("no application prepared; run `fogbed app prepare --app <file>`"))?;
    AppSpec::from_document(doc, &state.model).map_err(fail)
}

fn app_output(verb: &str, report: AppReport) -> Output {
    let mut text = String::new();
    for m in &report.machines {
        text.push_str(&format!("{:<24} {}\n", m.machine.as_str(), m.done.join(", ")));
        for e in &m.errors {
            text.push_str(&format!("{:<24} error: {e}\n", ""));
        }
    }
    for w in &report.warnings {
        text.push_str(&format!("warning: {w}\n"));
    }
    if report.is_success() {
        text.push_str(&format!("{verb}: ok\n"));
    } else {
        text.push_str(&format!("{verb}: {} error(s)\n", report.errors().len()));
    }
    Output { ok: report.is_success(), text, json: serde_json::to_value(&report).expect("report serializes") }
}

fn fmt_rate(bps: Option<u64>) -> String {
    match bps {
        None => "unbounded".into(),
        Some(b) => format!("{} Mbit/s", b as f64 / 1e6),
    }
}

fn paths_show(cli: &Cli, from: &str, to: &str, updates: &[PathBuf]) -> Result<Output, CliError> {
    let base = load_model(require(&cli.infra, "infra")?)?;
    let mut overlay = InfraOverlay::default();
    for u in updates {
        let update = load_update(u)?;
        let problems = update.check(&base);
        if !problems.is_empty() {
            let text: Vec<String> = problems.iter().map(ToString::to_string).collect();
            return Err(fail(format!("{}: {}", u.display(), text.join("; "))));
        }
        overlay.apply(&update);
    }
    let model = overlay.materialize(&base).map_err(fail)?;
    let (a, b) = (NodeId::from(from), NodeId::from(to));
    let eff = effective_properties(&model, &a, &b).map_err(fail)?;
    let blocked = overlay.partitions().any(|p| p.separates(&a, &b));
    let loss = if blocked { 1.0 } else { eff.loss.value() };
    let path: Vec<&str> = eff.path.iter().map(NodeId::as_str).collect();
    let text = format!(
        "{from} -> {to}\n  path        {}\n  delay       {} ms\n  dispersion  {} ms\n  rate        {}\n  loss        {:.4} %\n  corruption  {:.4} %\n  reorder     {:.4} %\n  duplicate   {:.4} %\n{}",
        path.join(" -> "),
        eff.delay.as_millis_f64(),
        eff.dispersion.as_millis_f64(),
        fmt_rate(eff.rate_bps),
        loss * 100.0,
        eff.corruption.as_percent(),
        eff.reorder.as_percent(),
        eff.duplicate.as_percent(),
        if blocked { "  partitioned\n" } else { "" },
    );
    let json = json!({
        "from": from,
        "to": to,
        "path": path,
        "delay_ms": eff.delay.as_millis_f64(),
        "dispersion_ms": eff.dispersion.as_millis_f64(),
        "rate_bps": eff.rate_bps,
        "loss": loss,
        "corruption": eff.corruption.value(),
        "reorder": eff.reorder.value(),
        "duplicate": eff.duplicate.value(),
        "partitioned": blocked,
    });
    Ok(Output::ok(text, json))
}

fn schedule_validate(cli: &Cli) -> Result<Output, CliError> {
    let path = require(&cli.schedule, "schedule")?;
    let schedule = Schedule::parse(&read(path)?).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    let report = validate_schedule(&schedule);
    let mut violations: Vec<String> = report.violations.iter().map(ToString::to_string).collect();
    if let Some(infra) = &cli.infra {
        let model = load_model(infra)?;
        let app = match &cli.app {
            Some(a) => Some(AppSpec::from_document(load_app_document(a)?, &model).map_err(fail)?),
            None => None,
        };
        violations.extend(check_references(&schedule, &model, app.as_ref()).iter().map(ToString::to_string));
    }
    let mut text = String::new();
    for v in &violations {
        text.push_str(&format!("error: {v}\n"));
    }
    for w in &report.warnings {
        text.push_str(&format!("warning: {w}\n"));
    }
    let ok = violations.is_empty();
    text.push_str(&format!("{} states, {}\n", schedule.states.len(), if ok { "valid" } else { "invalid" }));
    Ok(Output {
        ok,
        text,
        json: json!({"valid": ok, "states": schedule.states.len(), "violations": violations, "warnings": report.warnings}),
    })
}

async fn bootstrap(cli: &Cli, root: &Option<PathBuf>, backend: BackendKind) -> Result<Output, CliError> {
    let model = load_model(require(&cli.infra, "infra")?)?;
    let existing = TestbedState::load(&cli.state).map_err(fail)?;
    let root = match (root, &existing) {
        (Some(r), _) => r.clone(),
        (None, Some(s)) if s.lifecycle != Lifecycle::Destroyed => s.root.clone(),
        _ => cli.state.parent().unwrap_or(Path::new(".")).join("testbed"),
    };
    let root = if root.is_relative() { std::env::current_dir().map_err(fail)?.join(root) } else { root };
    let mut provider = LocalProvider::new(&root, program());
    provider.backend = backend;
    let state = provider.bootstrap(&model, existing).map_err(fail)?;
    save_state(cli, &state)?;
    let mut text = String::new();
    for h in state.handles.values() {
        text.push_str(&format!(
            "{:<24} {:<14} app {:<15} mgmt {:<15}\n",
            h.machine.as_str(),
            h.type_name,
            h.app_address,
            h.management_address
        ));
    }
    text.push_str(&format!("bootstrapped {} machines\n", state.handles.len()));
    Ok(Output::ok(text, serde_json::to_value(&state.handles).expect("handles serialize")))
}

async fn agents(cli: &Cli, cmd: &AgentsCommand) -> Result<Output, CliError> {
    let mut state = load_state(cli)?;
    let provider = provider_for(&state);
    let result = match cmd {
        AgentsCommand::Install => provider.install_agents(&mut state).await.map(|()| state.handles.keys().cloned().collect()),
        AgentsCommand::Respawn => provider.respawn_agents(&mut state).await,
    };
    let restarted = match result {
        Ok(r) => r,
        Err(e) => {
            save_state(cli, &state)?;
            return Err(fail(e));
        }
    };
    if matches!(cmd, AgentsCommand::Install) {
        state.network.baselines.clear();
    }
    if !restarted.is_empty() {
        if let Err(e) = manager::sync_network(&mut state).await {
            save_state(cli, &state)?;
            return Err(fail(format!("network setup: {e}")));
        }
    }
    save_state(cli, &state)?;
    let names: Vec<&str> = restarted.iter().map(NodeId::as_str).collect();
    Ok(Output::ok(
        format!("agents running on {} machine(s): {}\n", names.len(), names.join(", ")),
        json!({"agents": names, "baselines": state.network.baselines}),
    ))
}

async fn network(cli: &Cli, cmd: &NetworkCommand) -> Result<Output, CliError> {
    let mut state = load_state(cli)?;
    match cmd {
        NetworkCommand::Modify { update, reset } => {
            let mut u = match update {
                Some(p) => load_update(p)?,
                None => InfraUpdate::default(),
            };
            u.reset |= *reset;
            let result = manager::apply_update(&mut state, &u).await;
            save_state(cli, &state)?;
            let report = result.map_err(fail)?;
            let mut text = format!("revision {} acknowledged by {} agent(s)\n", report.revision, report.acknowledged.len());
            for w in &report.warnings {
                text.push_str(&format!("warning: {w}\n"));
            }
            Ok(Output::ok(text, serde_json::to_value(&report).expect("report serializes")))
        }
        NetworkCommand::Show => {
            let configs = manager::read_configs(&state).await;
            let mut text = String::new();
            let mut json = serde_json::Map::new();
            let mut ok = true;
            for (m, c) in configs {
                match c {
                    Ok(c) => {
                        text.push_str(&format!("{m} (revision {})\n{}\n", c.revision, render_impairment_table(&c)));
                        json.insert(m.to_string(), serde_json::to_value(&c).expect("config serializes"));
                    }
                    Err(e) => {
                        ok = false;
                        text.push_str(&format!("{m}: {e}\n"));
                    }
                }
            }
            Ok(Output { ok, text, json: Value::Object(json) })
        }
    }
}

async fn destroy(cli: &Cli) -> Result<Output, CliError> {
    let Some(mut state) = TestbedState::load(&cli.state).map_err(fail)? else {
        return Ok(Output::ok("nothing to destroy\n", json!({"destroyed": false})));
    };
    let provider = provider_for(&state);
    let report = provider.destroy(&mut state);
    save_state(cli, &state)?;
    let leaks = provider.audit(&state);
    let mut text = format!("stopped {} agent(s), {} container(s)\n", report.stopped_agents, report.stopped_containers);
    for e in report.errors.iter().chain(&leaks) {
        text.push_str(&format!("error: {e}\n"));
    }
    Ok(Output {
        ok: report.errors.is_empty() && leaks.is_empty(),
        text,
        json: json!({"report": report, "leaks": leaks}),
    })
}

async fn app(cli: &Cli, cmd: &AppCommand) -> Result<Output, CliError> {
    let mut state = load_state(cli)?;
    state.require(Lifecycle::AgentsInstalled).map_err(fail)?;
    if let Some(path) = &cli.app {
        let doc = load_app_document(path)?;
        AppSpec::from_document(doc.clone(), &state.model).map_err(fail)?;
        state.app = Some(doc);
    } else if matches!(cmd, AppCommand::Prepare) {
        return Err(CliError::Usage("missing required flag --app <file>".into()));
    }
    let app = app_spec(&state)?;
    let provider = provider_for(&state);
    let rts = runtimes(&provider, &state)?;
    let out = match cmd {
        AppCommand::Prepare => app_output("prepare", appmgr::prepare(&app, &rts).map_err(fail)?),
        AppCommand::Start => {
            let model = manager::current_model(&state).map_err(fail)?;
            let report = appmgr::start(&app, &model, &state.app_addresses(), &rts).map_err(fail)?;
            if report.is_success() {
                state.advance(Lifecycle::Deployed);
            }
            app_output("start", report)
        }
        AppCommand::Stop => app_output("stop", appmgr::stop(&app, &rts).map_err(fail)?),
        AppCommand::Collect { out } => app_output("collect", appmgr::collect(&app, &rts, out).map_err(fail)?),
    };
    save_state(cli, &state)?;
    Ok(out)
}

async fn orchestrate(cli: &Cli, trace: &Option<PathBuf>) -> Result<Output, CliError> {
    let path = require(&cli.schedule, "schedule")?;
    let state = load_state(cli)?;
    let schedule = Schedule::parse(&read(path)?).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    let report = validate_schedule(&schedule);
    let app = state.app.clone().map(|d| AppSpec::from_document(d, &state.model)).transpose().map_err(fail)?;
    let mut violations: Vec<String> = report.violations.iter().map(ToString::to_string).collect();
    violations.extend(check_references(&schedule, &state.model, app.as_ref()).iter().map(ToString::to_string));
    if !violations.is_empty() {
        return Err(fail(format!("invalid schedule:\n  {}", violations.join("\n  "))));
    }
    let (trace_data, state, _) = manager::orchestrate(state, schedule).await.map_err(fail)?;
    save_state(cli, &state)?;
    let trace_path = trace.clone().unwrap_or_else(|| cli.state.with_file_name("trace.jsonl"));
    std::fs::write(&trace_path, trace_data.to_jsonl()).map_err(fail)?;
    let mut text = String::new();
    for v in &trace_data.visits {
        let dwell = v.dwell().map(|d| format!("{:.1}s", d.as_secs_f64())).unwrap_or_else(|| "-".into());
        text.push_str(&format!("{:<24} dwell {:>8}  events {}\n", v.state, dwell, v.events.len()));
    }
    text.push_str(&format!("outcome: {:?}\ntrace: {}\n", trace_data.outcome, trace_path.display()));
    Ok(Output {
        ok: trace_data.completed(),
        text,
        json: json!({"states": trace_data.states(), "outcome": trace_data.outcome, "trace": trace_path}),
    })
}

async fn agent(args: AgentArgs) -> Result<Output, CliError> {
    let opts = AgentOptions {
        id: NodeId::new(args.id.clone()),
        listen: SocketAddr::new(args.listen_address, args.port),
        app_address: args.app_address,
        echo_port: args.echo_port,
        relay_port: args.relay_port,
        backend: args.backend,
        root: args.root.clone(),
        device: args.device.clone(),
    };
    let runtime: Option<Arc<dyn ContainerRuntime>> = args.local_runtime.then(|| {
        Arc::new(LocalProcessRuntime {
            root: args.root.clone(),
            machine: opts.id.clone(),
            bind: args.app_address,
            relay: None,
            events_url: None,
            program: program(),
        }) as Arc<dyn ContainerRuntime>
    });
    let running = start_agent(&opts, runtime).await.map_err(|e| fail(format!("agent {}: {e}", opts.listen)))?;
    tracing::info!(agent = %opts.id, rest = %running.rest, "agent listening");
    running.serve_until(mockapp::shutdown_signal()).await;
    Ok(Output::ok("", Value::Null))
}

pub async fn dispatch(cli: Cli) -> Result<Output, CliError> {
    match &cli.command {
        Command::Bootstrap { root, backend } => bootstrap(&cli, root, *backend).await,
        Command::Agents(c) => agents(&cli, c).await,
        Command::Network(c) => network(&cli, c).await,
        Command::Destroy => destroy(&cli).await,
        Command::App(c) => app(&cli, c).await,
        Command::Orchestrate(OrchestrateCommand::Run { trace }) => orchestrate(&cli, trace).await,
        Command::Paths(PathsCommand::Show { from, to, update }) => paths_show(&cli, from, to, update),
        Command::Schedule(ScheduleCommand::Validate) => schedule_validate(&cli),
        Command::Agent(a) => agent(a.clone()).await,
        Command::MockApp(a) => {
            mockapp::run(a.clone(), MockEnv::from_env()).await.map_err(fail)?;
            Ok(Output::ok("", Value::Null))
        }
    }
}

/// Parses `argv`, runs the verb and returns the process exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let default_level = if matches!(cli.command, Command::Agent(_)) { "info" } else { "warn" };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .with_writer(std::io::stderr)
        .try_init();
    let json = cli.json;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("tokio runtime");
    let result = rt.block_on(dispatch(cli));
    rt.shutdown_timeout(std::time::Duration::from_secs(1));
    match result {
        Ok(out) => {
            if json {
                if !out.json.is_null() {
                    println!("{}", serde_json::to_string_pretty(&out.json).expect("json"));
                }
            } else {
                print!("{}", out.text);
            }
            if out.ok { 0 } else { 1 }
        }
        Err(e) => {
            if json {
                println!("{}", json!({"error": e.to_string()}));
            }
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
