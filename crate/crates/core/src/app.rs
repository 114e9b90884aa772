//! Container configurations and where they run.

use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::infra::{display_list, InfrastructureModel, NodeId};
use crate::units::{mib_to_bytes, Millicores};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IpOf {
    #[serde(rename = "$ip_of")]
    pub machine: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IpsOfContainer {
    #[serde(rename = "$ips_of_container")]
    pub container: String,
}

/// An environment value: a literal, or a function resolved on the manager
/// before the container starts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvValue {
    Literal(String),
    IpOf(IpOf),
    IpsOfContainer(IpsOfContainer),
}

impl EnvValue {
    pub fn ip_of(machine: &str) -> Self {
        EnvValue::IpOf(IpOf { machine: machine.to_string() })
    }

    pub fn ips_of_container(container: &str) -> Self {
        EnvValue::IpsOfContainer(IpsOfContainer { container: container.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopyDir {
    pub local: PathBuf,
    /// Absolute path on the machine.
    pub remote: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerConfig {
    pub name: String,
    pub image: String,
    #[serde(default)]
    pub copy_dirs: Vec<CopyDir>,
    #[serde(default)]
    pub env: BTreeMap<String, EnvValue>,
    #[serde(default)]
    pub args: Vec<String>,
    /// Port on which the container accepts commands and state broadcasts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_port: Option<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitDoc {
    pub cpu_cores: f64,
    pub memory_mb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploymentEntry {
    pub container: String,
    pub machines: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits: Option<LimitDoc>,
    /// Per-machine limits; take precedence over `limits`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub machine_limits: BTreeMap<String, LimitDoc>,
}

/// JSON shape of the container + deployment file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppDocument {
    #[serde(default)]
    pub containers: Vec<ContainerConfig>,
    #[serde(default)]
    pub deployment: Vec<DeploymentEntry>,
}

/// Resource cap for one container, as sent to agents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerLimit {
    pub container: String,
    #[serde(rename = "cpu_millicores")]
    pub cpu: Millicores,
    pub memory_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LimitSpec {
    pub cpu: Millicores,
    pub memory_bytes: u64,
}

impl From<LimitDoc> for LimitSpec {
    fn from(d: LimitDoc) -> Self {
        LimitSpec { cpu: Millicores::from_cores_f64(d.cpu_cores), memory_bytes: mib_to_bytes(d.memory_mb) }
    }
}

/// Container name -> hosting machines, plus optional limits.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeploymentMapping {
    entries: BTreeMap<String, Vec<NodeId>>,
    limits: BTreeMap<(String, NodeId), LimitSpec>,
}

impl DeploymentMapping {
    /// Hosting machines of `container`, sorted by id.
    pub fn machines_of(&self, container: &str) -> Option<&[NodeId]> {
        self.entries.get(container).map(Vec::as_slice)
    }

    pub fn containers_on<'a>(&'a self, machine: &'a NodeId) -> impl Iterator<Item = &'a str> + 'a {
        self.entries.iter().filter(move |(_, ms)| ms.contains(machine)).map(|(c, _)| c.as_str())
    }

    /// Every machine that hosts at least one container.
    pub fn machines(&self) -> BTreeSet<&NodeId> {
        self.entries.values().flatten().collect()
    }

    pub fn limit(&self, container: &str, machine: &NodeId) -> Option<LimitSpec> {
        self.limits.get(&(container.to_string(), machine.clone())).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AppError {
    #[error("malformed application document: {0}")]
    Syntax(String),
    #[error("invalid application document:\n{}", display_list(.0))]
    Invalid(Vec<String>),
    #[error("unknown machine `{0}`")]
    UnknownMachine(String),
    #[error("unknown container `{0}`")]
    UnknownContainer(String),
    #[error("container `{0}` is not deployed on any machine")]
    NotDeployed(String),
}

/// Validated container configurations and their deployment.
#[derive(Debug, Clone, PartialEq)]
pub struct AppSpec {
    pub containers: Vec<ContainerConfig>,
    pub mapping: DeploymentMapping,
}

impl AppSpec {
    pub fn parse(json: &str, model: &InfrastructureModel) -> Result<Self, AppError> {
        let doc: AppDocument = serde_json::from_str(json).map_err(|e| AppError::Syntax(e.to_string()))?;
        Self::from_document(doc, model)
    }

    /// Validates names, paths, resolver references and the mapping. All
    /// problems are reported together.
    pub fn from_document(doc: AppDocument, model: &InfrastructureModel) -> Result<Self, AppError> {
        let mut problems = Vec::new();
        let mut names = BTreeSet::new();
        for c in &doc.containers {
            if c.name.is_empty() {
                problems.push("container name must not be empty".to_string());
            }
            if !names.insert(c.name.as_str()) {
                problems.push(format!("duplicate container name `{}`", c.name));
            }
            for d in &c.copy_dirs {
                if !d.remote.starts_with('/') {
                    problems.push(format!("container `{}`: remote path `{}` is not absolute", c.name, d.remote));
                }
            }
        }
        let deployed: BTreeSet<&str> = doc.deployment.iter().map(|d| d.container.as_str()).collect();
        for c in &doc.containers {
            for (var, value) in &c.env {
                match value {
                    EnvValue::Literal(_) => {}
                    EnvValue::IpOf(IpOf { machine }) => {
                        if model.require_machine(&NodeId::new(machine.clone())).is_err() {
                            problems.push(format!("container `{}` env {var}: unknown machine `{machine}`", c.name));
                        }
                    }
                    EnvValue::IpsOfContainer(IpsOfContainer { container }) => {
                        if !names.contains(container.as_str()) {
                            problems.push(format!("container `{}` env {var}: unknown container `{container}`", c.name));
                        } else if !deployed.contains(container.as_str()) {
                            problems.push(format!("container `{}` env {var}: `{container}` is deployed nowhere", c.name));
                        }
                    }
                }
            }
        }

        let mut mapping = DeploymentMapping::default();
        for d in &doc.deployment {
            if !names.contains(d.container.as_str()) {
                problems.push(format!("deployment references unknown container `{}`", d.container));
            }
            let mut hosts = Vec::new();
            for m in &d.machines {
                let id = NodeId::new(m.clone());
                match model.node(&id) {
                    None => problems.push(format!("deployment of `{}`: unknown machine `{m}`", d.container)),
                    Some(n) if !n.is_machine() => {
                        problems.push(format!("deployment of `{}`: `{m}` is a router", d.container))
                    }
                    Some(_) => hosts.push(id),
                }
            }
            for m in d.machine_limits.keys() {
                if !d.machines.contains(m) {
                    problems.push(format!("deployment of `{}`: limits for `{m}`, which does not host it", d.container));
                }
            }
            for limit in d.limits.iter().chain(d.machine_limits.values()) {
                if !(limit.cpu_cores > 0.0 && limit.memory_mb > 0.0) {
                    problems.push(format!("deployment of `{}`: limits must be positive", d.container));
                }
            }
            for host in &hosts {
                let limit = d.machine_limits.get(host.as_str()).or(d.limits.as_ref());
                if let Some(l) = limit {
                    mapping.limits.insert((d.container.clone(), host.clone()), (*l).into());
                }
            }
            let slot = mapping.entries.entry(d.container.clone()).or_default();
            slot.extend(hosts);
            slot.sort();
            slot.dedup();
        }

        if problems.is_empty() {
            Ok(AppSpec { containers: doc.containers, mapping })
        } else {
            Err(AppError::Invalid(problems))
        }
    }

    pub fn container(&self, name: &str) -> Option<&ContainerConfig> {
        self.containers.iter().find(|c| c.name == name)
    }
}

/// Resolves every env value of `config` to a literal string.
///
/// `$ips_of_container` yields the comma-joined addresses of all hosting
/// machines, ordered by machine id.
pub fn resolve_env(
    config: &ContainerConfig,
    mapping: &DeploymentMapping,
    addresses: &BTreeMap<NodeId, IpAddr>,
) -> Result<BTreeMap<String, String>, AppError> {
    let lookup = |id: &NodeId| addresses.get(id).ok_or_else(|| AppError::UnknownMachine(id.0.clone()));
    config
        .env
        .iter()
        .map(|(name, value)| {
            let resolved = match value {
                EnvValue::Literal(s) => s.clone(),
                EnvValue::IpOf(IpOf { machine }) => lookup(&NodeId::new(machine.clone()))?.to_string(),
                EnvValue::IpsOfContainer(IpsOfContainer { container }) => {
                    let hosts = mapping.machines_of(container).ok_or_else(|| AppError::UnknownContainer(container.clone()))?;
                    if hosts.is_empty() {
                        return Err(AppError::NotDeployed(container.clone()));
                    }
                    hosts.iter().map(|h| lookup(h).map(ToString::to_string)).collect::<Result<Vec<_>, _>>()?.join(",")
                }
            };
            Ok((name.clone(), resolved))
        })
        .collect()
}

/// One directory to copy onto a machine.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Upload {
    pub local: PathBuf,
    pub remote: String,
}

/// Per-machine uploads: the union of the copy dirs of every container mapped
/// to that machine. Hosting machines without uploads get an empty entry.
pub fn upload_manifest(app: &AppSpec) -> BTreeMap<NodeId, BTreeSet<Upload>> {
    let mut out: BTreeMap<NodeId, BTreeSet<Upload>> = BTreeMap::new();
    for c in &app.containers {
        for machine in app.mapping.machines_of(&c.name).unwrap_or(&[]) {
            let slot = out.entry(machine.clone()).or_default();
            slot.extend(c.copy_dirs.iter().map(|d| Upload { local: d.local.clone(), remote: d.remote.clone() }));
        }
    }
    out
}

/// Everything a runtime needs to start one container on one machine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerLaunch {
    pub name: String,
    pub image: String,
    pub env: BTreeMap<String, String>,
    pub args: Vec<String>,
    pub limit: ContainerLimit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_port: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LaunchPlan {
    /// Launches per machine, in config order.
    pub machines: BTreeMap<NodeId, Vec<ContainerLaunch>>,
    pub warnings: Vec<String>,
}

/// Resolves env and limits for every deployed container.
///
/// A container without an explicit limit is capped at its machine's modeled
/// capacity, and explicit limits are clamped to it. This hides whatever
/// surplus the provisioned machine type has.
pub fn launch_plan(
    app: &AppSpec,
    model: &InfrastructureModel,
    addresses: &BTreeMap<NodeId, IpAddr>,
) -> Result<LaunchPlan, AppError> {
    let mut plan = LaunchPlan::default();
    for c in &app.containers {
        let hosts = app.mapping.machines_of(&c.name).unwrap_or(&[]);
        if hosts.is_empty() {
            continue;
        }
        let env = resolve_env(c, &app.mapping, addresses)?;
        for host in hosts {
            let spec = model.require_machine(host).map_err(|_| AppError::UnknownMachine(host.0.clone()))?;
            let cap = LimitSpec { cpu: spec.cpu, memory_bytes: spec.memory_bytes };
            let wanted = app.mapping.limit(&c.name, host).unwrap_or(cap);
            if wanted.cpu > cap.cpu || wanted.memory_bytes > cap.memory_bytes {
                plan.warnings.push(format!(
                    "limit of `{}` on `{host}` exceeds the modeled machine; clamped to {} cores / {} bytes",
                    c.name, cap.cpu, cap.memory_bytes
                ));
            }
            plan.machines.entry(host.clone()).or_default().push(ContainerLaunch {
                name: c.name.clone(),
                image: c.image.clone(),
                env: env.clone(),
                args: c.args.clone(),
                limit: ContainerLimit {
                    container: c.name.clone(),
                    cpu: wanted.cpu.min(cap.cpu),
                    memory_bytes: wanted.memory_bytes.min(cap.memory_bytes),
                },
                control_port: c.control_port,
            });
        }
    }
    Ok(plan)
}

/// Deterministic location of collected files: `<root>/<machine>/<container>/`.
pub fn result_dir(root: &Path, machine: &NodeId, container: &str) -> PathBuf {
    root.join(machine.as_str()).join(container)
}

/// A control endpoint of one container instance.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct ControlEndpoint {
    pub container: String,
    pub machine: NodeId,
    pub address: IpAddr,
    pub port: u16,
}

/// All container instances that declared a control port, sorted by machine
/// then container.
pub fn control_endpoints(app: &AppSpec, addresses: &BTreeMap<NodeId, IpAddr>) -> Vec<ControlEndpoint> {
    let mut out = Vec::new();
    for c in &app.containers {
        let Some(port) = c.control_port else { continue };
        for m in app.mapping.machines_of(&c.name).unwrap_or(&[]) {
            if let Some(addr) = addresses.get(m) {
                out.push(ControlEndpoint { container: c.name.clone(), machine: m.clone(), address: *addr, port });
            }
        }
    }
    out.sort_by(|a, b| (&a.machine, &a.container).cmp(&(&b.machine, &b.container)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    fn model() -> InfrastructureModel {
        InfrastructureModel::parse(
            r#"{"machines":[{"id":"cell-tower-2","cpu_cores":2,"memory_mb":2048},
                            {"id":"M1","cpu_cores":1,"memory_mb":1024},{"id":"M3","cpu_cores":1,"memory_mb":1024}],
                "routers":[{"id":"R"}],
                "connections":[{"from":"M1","to":"R"},{"from":"M3","to":"R"},{"from":"cell-tower-2","to":"R"}]}"#,
        )
        .unwrap()
    }

    fn addrs() -> BTreeMap<NodeId, IpAddr> {
        [("M1", 1), ("M3", 3), ("cell-tower-2", 20)]
            .into_iter()
            .map(|(m, i)| (NodeId::from(m), IpAddr::V4(Ipv4Addr::new(10, 0, 0, i))))
            .collect()
    }

    const CAMERA: &str = r#"{
        "containers":[{"name":"camera","image":"dockerhub/camera",
                       "copy_dirs":[{"local":"appdata/camera","remote":"/camera"}],
                       "env":{"SERVER_IP":{"$ip_of":"cell-tower-2"},"SERVER_PORT":"1883",
                              "PEERS":{"$ips_of_container":"camera"}},
                       "args":["--output","/camera/recording.mp4"]},
                      {"name":"broker","image":"eclipse-mosquitto"}],
        "deployment":[{"container":"camera","machines":["M3","M1"],"limits":{"cpu_cores":0.5,"memory_mb":256}},
                      {"container":"broker","machines":["M1"]}]}"#;

    #[test]
    fn resolves_all_env_kinds() {
        let app = AppSpec::parse(CAMERA, &model()).unwrap();
        let env = resolve_env(app.container("camera").unwrap(), &app.mapping, &addrs()).unwrap();
        assert_eq!(env["SERVER_IP"], "10.0.0.20");
        assert_eq!(env["SERVER_PORT"], "1883");
        assert_eq!(env["PEERS"], "10.0.0.1,10.0.0.3");
    }

    #[test]
    fn resolution_errors() {
        let app = AppSpec::parse(CAMERA, &model()).unwrap();
        let mut c = app.container("camera").unwrap().clone();
        c.env.insert("X".into(), EnvValue::ips_of_container("ghost"));
        assert_eq!(resolve_env(&c, &app.mapping, &addrs()), Err(AppError::UnknownContainer("ghost".into())));
        c.env.insert("X".into(), EnvValue::ip_of("nowhere"));
        assert_eq!(resolve_env(&c, &app.mapping, &addrs()), Err(AppError::UnknownMachine("nowhere".into())));
    }

    #[test]
    fn validation_collects_problems() {
        let doc = r#"{"containers":[{"name":"a","image":"x","copy_dirs":[{"local":"d","remote":"rel"}],
                                     "env":{"E":{"$ip_of":"R"},"F":{"$ips_of_container":"b"}}},
                                    {"name":"a","image":"y"},{"name":"b","image":"z"}],
                      "deployment":[{"container":"a","machines":["R","M9"]},{"container":"c","machines":["M1"]}]}"#;
        let AppError::Invalid(p) = AppSpec::parse(doc, &model()).unwrap_err() else { panic!() };
        let all = p.join("\n");
        for needle in ["duplicate container", "not absolute", "unknown machine `R`", "deployed nowhere", "is a router", "`M9`", "unknown container `c`"] {
            assert!(all.contains(needle), "missing {needle}: {all}");
        }
    }

    #[test]
    fn malformed_resolver_rejected() {
        let doc = r#"{"containers":[{"name":"a","image":"x","env":{"E":{"$ip_off":"M1"}}}]}"#;
        assert!(matches!(AppSpec::parse(doc, &model()), Err(AppError::Syntax(_))));
    }

    #[test]
    fn manifest_union_per_machine() {
        let doc = r#"{"containers":[{"name":"a","image":"x","copy_dirs":[{"local":"shared","remote":"/s"}]},
                                    {"name":"b","image":"y","copy_dirs":[{"local":"shared","remote":"/s"},{"local":"b","remote":"/b"}]},
                                    {"name":"c","image":"z"}],
                      "deployment":[{"container":"a","machines":["M1"]},{"container":"b","machines":["M1"]},
                                    {"container":"c","machines":["M3"]}]}"#;
        let app = AppSpec::parse(doc, &model()).unwrap();
        let manifest = upload_manifest(&app);
        assert_eq!(manifest[&NodeId::from("M1")].len(), 2);
        assert!(manifest[&NodeId::from("M3")].is_empty());
    }

    #[test]
    fn launch_plan_applies_and_hides_limits() {
        let app = AppSpec::parse(CAMERA, &model()).unwrap();
        let plan = launch_plan(&app, &model(), &addrs()).unwrap();
        let m1 = &plan.machines[&NodeId::from("M1")];
        let names: Vec<_> = m1.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names, ["camera", "broker"]);
        assert_eq!(m1[0].limit.cpu, Millicores(500));
        // no explicit limit: capped at the machine model
        assert_eq!(m1[1].limit.cpu, Millicores(1000));
        assert_eq!(m1[1].limit.memory_bytes, mib_to_bytes(1024.0));
        assert!(plan.warnings.is_empty());
    }

    #[test]
    fn oversized_limit_clamped() {
        let doc = r#"{"containers":[{"name":"a","image":"x"}],
                      "deployment":[{"container":"a","machines":["M1"],"limits":{"cpu_cores":4,"memory_mb":100}}]}"#;
        let app = AppSpec::parse(doc, &model()).unwrap();
        let plan = launch_plan(&app, &model(), &addrs()).unwrap();
        assert_eq!(plan.machines[&NodeId::from("M1")][0].limit.cpu, Millicores(1000));
        assert_eq!(plan.warnings.len(), 1);
    }

    #[test]
    fn control_endpoints_sorted() {
        let doc = r#"{"containers":[{"name":"z","image":"x","control_port":7000},{"name":"a","image":"x","control_port":7001},
                                    {"name":"quiet","image":"x"}],
                      "deployment":[{"container":"z","machines":["M3","M1"]},{"container":"a","machines":["M1"]},
                                    {"container":"quiet","machines":["M1"]}]}"#;
        let app = AppSpec::parse(doc, &model()).unwrap();
        let eps: Vec<_> = control_endpoints(&app, &addrs()).into_iter().map(|e| format!("{}/{}", e.machine, e.container)).collect();
        assert_eq!(eps, ["M1/a", "M1/z", "M3/z"]);
    }

    #[test]
    fn result_layout() {
        assert_eq!(result_dir(Path::new("results"), &"M1".into(), "camera"), PathBuf::from("results/M1/camera"));
    }
}
