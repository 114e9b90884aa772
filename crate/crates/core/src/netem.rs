//! Per-agent impairment planning.
//!
//! Every agent shapes its own egress traffic, keyed by destination address.
//! For each ordered machine pair `(a, b)` agent `a` carries one entry that
//! realizes the effective `a -> b` properties of the model, minus whatever
//! latency the underlying network already adds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::infra::{effective_properties, InfrastructureModel, NodeId, PartitionSpec, PathError};
use crate::units::{Micros, Probability};

/// How agent traffic towards one peer must be impaired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpairmentSpec {
    pub target: NodeId,
    pub target_address: IpAddr,
    /// Delay to add on egress after baseline compensation.
    #[serde(rename = "injected_delay_us")]
    pub injected_delay: Micros,
    #[serde(rename = "dispersion_us")]
    pub dispersion: Micros,
    /// `None` leaves the rate unshaped.
    pub rate_bps: Option<u64>,
    pub loss: Probability,
    pub corruption: Probability,
    pub reorder: Probability,
    pub duplicate: Probability,
}

impl ImpairmentSpec {
    /// An entry that lets traffic through untouched.
    pub fn passthrough(target: NodeId, target_address: IpAddr) -> Self {
        ImpairmentSpec {
            target,
            target_address,
            injected_delay: Micros::ZERO,
            dispersion: Micros::ZERO,
            rate_bps: None,
            loss: Probability::ZERO,
            corruption: Probability::ZERO,
            reorder: Probability::ZERO,
            duplicate: Probability::ZERO,
        }
    }

    /// An entry that drops everything.
    pub fn blocked(target: NodeId, target_address: IpAddr) -> Self {
        ImpairmentSpec { loss: Probability::CERTAIN, ..Self::passthrough(target, target_address) }
    }

    pub fn is_blocked(&self) -> bool {
        self.loss == Probability::CERTAIN
    }
}

/// The full adjacency list one agent applies at once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentNetworkConfig {
    pub agent: NodeId,
    pub revision: u64,
    pub entries: Vec<ImpairmentSpec>,
}

impl AgentNetworkConfig {
    pub fn empty(agent: NodeId) -> Self {
        AgentNetworkConfig { agent, revision: 0, entries: Vec::new() }
    }

    pub fn entry(&self, target: &NodeId) -> Option<&ImpairmentSpec> {
        self.entries.iter().find(|e| &e.target == target)
    }
}

/// Measured round-trip time between two machines on the application network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineMeasurement {
    pub a: NodeId,
    pub b: NodeId,
    #[serde(rename = "rtt_us")]
    pub rtt: Micros,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Compensation {
    pub injected: Micros,
    /// Set when the baseline already exceeds the target.
    pub warning: Option<String>,
}

/// Delay to inject so that `injected + baseline == target`, clamped at zero.
pub fn compensate_delay(target_oneway: Micros, baseline_oneway: Micros) -> Compensation {
    if baseline_oneway > target_oneway {
        Compensation {
            injected: Micros::ZERO,
            warning: Some(format!(
                "target one-way delay {target_oneway} is below the measured baseline {baseline_oneway}; \
                 the testbed cannot reach it"
            )),
        }
    } else {
        Compensation { injected: target_oneway - baseline_oneway, warning: None }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NetemError {
    #[error("no address known for machine `{0}`")]
    MissingAddress(NodeId),
    #[error("partition references unknown machine `{0}`")]
    UnknownPartitionMachine(NodeId),
    #[error(transparent)]
    Path(#[from] PathError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentPlan {
    /// One config per machine, sorted by agent id.
    pub configs: Vec<AgentNetworkConfig>,
    pub warnings: Vec<String>,
}

impl AgentPlan {
    pub fn config(&self, agent: &NodeId) -> Option<&AgentNetworkConfig> {
        self.configs.iter().find(|c| &c.agent == agent)
    }
}

fn baseline_rtt(baselines: &[BaselineMeasurement], a: &NodeId, b: &NodeId) -> Option<Micros> {
    baselines.iter().find(|m| (&m.a == a && &m.b == b) || (&m.a == b && &m.b == a)).map(|m| m.rtt)
}

/// Builds the adjacency list of every agent.
///
/// Baseline one-way latency is estimated as half the measured RTT. Pairs
/// without a measurement use zero and produce a warning. Partitioned or
/// unreachable pairs get a blocking entry regardless of their other values.
pub fn build_agent_configs(
    model: &InfrastructureModel,
    addresses: &BTreeMap<NodeId, IpAddr>,
    baselines: &[BaselineMeasurement],
    partitions: &[PartitionSpec],
    revision: u64,
) -> Result<AgentPlan, NetemError> {
    let machines = model.machine_ids();
    for id in &machines {
        if !addresses.contains_key(id) {
            return Err(NetemError::MissingAddress(id.clone()));
        }
    }
    for p in partitions {
        let ids: Vec<&NodeId> = match p {
            PartitionSpec::Machine(m) => vec![m],
            PartitionSpec::Pair([a, b]) => vec![a, b],
        };
        for id in ids {
            if model.require_machine(id).is_err() {
                return Err(NetemError::UnknownPartitionMachine(id.clone()));
            }
        }
    }

    let mut warnings = Vec::new();
    let mut configs = Vec::with_capacity(machines.len());
    for agent in &machines {
        let mut entries = Vec::with_capacity(machines.len().saturating_sub(1));
        for peer in machines.iter().filter(|m| *m != agent) {
            let address = addresses[peer];
            if partitions.iter().any(|p| p.separates(agent, peer)) {
                entries.push(ImpairmentSpec::blocked(peer.clone(), address));
                continue;
            }
            let eff = match effective_properties(model, agent, peer) {
                Ok(eff) => eff,
                Err(PathError::Unreachable { .. }) => {
                    entries.push(ImpairmentSpec::blocked(peer.clone(), address));
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let baseline = match baseline_rtt(baselines, agent, peer) {
                Some(rtt) => rtt.half(),
                None => {
                    warnings.push(format!("no baseline measurement for {agent} -> {peer}; assuming 0"));
                    Micros::ZERO
                }
            };
            let comp = compensate_delay(eff.delay, baseline);
            if let Some(w) = comp.warning {
                warnings.push(format!("{agent} -> {peer}: {w}"));
            }
            entries.push(ImpairmentSpec {
                target: peer.clone(),
                target_address: address,
                injected_delay: comp.injected,
                dispersion: eff.dispersion,
                rate_bps: eff.rate_bps,
                loss: eff.loss,
                corruption: eff.corruption,
                reorder: eff.reorder,
                duplicate: eff.duplicate,
            });
        }
        configs.push(AgentNetworkConfig { agent: agent.clone(), revision, entries });
    }
    Ok(AgentPlan { configs, warnings })
}

/// Rendering parameters for the traffic-control backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptOptions {
    /// Application-network interface.
    pub device: String,
    /// Addresses that must never be matched by a rule (the management network).
    pub protected: Vec<IpAddr>,
}

impl Default for ScriptOptions {
    fn default() -> Self {
        ScriptOptions { device: "eth0".to_string(), protected: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShaperRule {
    pub target: NodeId,
    pub commands: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShaperScript {
    pub preamble: Vec<String>,
    pub rules: Vec<ShaperRule>,
    /// Entries dropped because their address is protected.
    pub skipped: Vec<NodeId>,
}

impl ShaperScript {
    pub fn lines(&self) -> impl Iterator<Item = &str> {
        self.preamble.iter().chain(self.rules.iter().flat_map(|r| r.commands.iter())).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for line in self.lines() {
            out.push_str(line);
            out.push('\n');
        }
        out
    }
}

const UNSHAPED_RATE: &str = "10gbit";
const FIRST_CLASS_MINOR: usize = 0x10;

fn netem_args(e: &ImpairmentSpec) -> String {
    let mut s = format!("delay {}us", e.injected_delay.0);
    if e.dispersion.0 > 0 {
        let _ = write!(s, " {}us distribution normal", e.dispersion.0);
    }
    for (kw, p) in [("loss", e.loss), ("corrupt", e.corruption), ("duplicate", e.duplicate), ("reorder", e.reorder)] {
        if p.value() > 0.0 {
            let _ = write!(s, " {kw} {}%", p.as_percent());
        }
    }
    s
}

/// Renders `tc` commands for one config: an HTB root whose default class is
/// unshaped, plus one class/netem/filter triple per peer, ordered by peer id.
/// Output is a pure function of the input.
pub fn render_shaper_script(config: &AgentNetworkConfig, opts: &ScriptOptions) -> ShaperScript {
    let dev = &opts.device;
    let preamble = vec![
        format!("tc qdisc del dev {dev} root 2>/dev/null || true"),
        format!("tc qdisc add dev {dev} root handle 1: htb default 1"),
        format!("tc class add dev {dev} parent 1: classid 1:1 htb rate {UNSHAPED_RATE}"),
    ];
    let mut entries: Vec<&ImpairmentSpec> = config.entries.iter().collect();
    entries.sort_by(|a, b| a.target.cmp(&b.target));

    let mut rules = Vec::new();
    let mut skipped = Vec::new();
    for e in entries {
        if opts.protected.contains(&e.target_address) {
            skipped.push(e.target.clone());
            continue;
        }
        let minor = format!("{:x}", FIRST_CLASS_MINOR + rules.len());
        let rate = e.rate_bps.map(|r| format!("{r}bit")).unwrap_or_else(|| UNSHAPED_RATE.to_string());
        let (proto, prefix) = match e.target_address {
            IpAddr::V4(_) => ("ip", "ip dst"),
            IpAddr::V6(_) => ("ipv6", "ip6 dst"),
        };
        let host_len = if e.target_address.is_ipv4() { 32 } else { 128 };
        rules.push(ShaperRule {
            target: e.target.clone(),
            commands: vec![
                format!("tc class add dev {dev} parent 1: classid 1:{minor} htb rate {rate}"),
                format!("tc qdisc add dev {dev} parent 1:{minor} handle {minor}: netem {}", netem_args(e)),
                format!(
                    "tc filter add dev {dev} protocol {proto} parent 1: prio 1 u32 match {prefix} {}/{host_len} flowid 1:{minor}",
                    e.target_address
                ),
            ],
        });
    }
    ShaperScript { preamble, rules, skipped }
}

/// Neutral JSON form of a config, consumed by the in-process proxy.
pub fn render_impairment_table(config: &AgentNetworkConfig) -> String {
    let mut sorted = config.clone();
    sorted.entries.sort_by(|a, b| a.target.cmp(&b.target));
    serde_json::to_string_pretty(&sorted).expect("config serializes")
}
