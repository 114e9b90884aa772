//! Infrastructure graph: machines, routers and the links between them.
//!
//! The on-disk form is [`InfraDocument`] (JSON). [`InfrastructureModel`] is
//! the validated, normalized graph that the rest of the crate works on.

mod catalog;
mod document;
mod overlay;
mod paths;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::units::{Micros, Millicores, Probability};

pub use catalog::{map_machine_to_type, CatalogError, Dimension, MachineCatalogEntry, Resources, TypeSelection};
pub use document::{ConnectionDoc, InfraDocument, MachineDoc, RouterDoc};
pub use overlay::{InfraOverlay, InfraUpdate, LinkOverride, MachineOverride, PartitionSpec};
pub use paths::{effective_properties, EffectivePathProperties, PathError};

/// Name of a machine or router.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Machine,
    Router,
}

/// A vertex of the graph. Routers carry zeroed compute fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineSpec {
    pub id: NodeId,
    pub kind: NodeKind,
    pub cpu: Millicores,
    pub memory_bytes: u64,
    pub storage_bytes: u64,
}

impl MachineSpec {
    pub fn machine(id: impl Into<String>, cpu: Millicores, memory_bytes: u64, storage_bytes: u64) -> Self {
        MachineSpec { id: NodeId::new(id), kind: NodeKind::Machine, cpu, memory_bytes, storage_bytes }
    }

    pub fn router(id: impl Into<String>) -> Self {
        MachineSpec { id: NodeId::new(id), kind: NodeKind::Router, cpu: Millicores(0), memory_bytes: 0, storage_bytes: 0 }
    }

    pub fn is_machine(&self) -> bool {
        self.kind == NodeKind::Machine
    }

    pub fn resources(&self) -> Resources {
        Resources { cpu: self.cpu, memory_bytes: self.memory_bytes, storage_bytes: self.storage_bytes }
    }
}

/// Per-link network characteristics. Applied identically in both directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConnectionProperties {
    pub rate_bps: u64,
    /// One-way delay.
    pub delay: Micros,
    /// Standard deviation around `delay`.
    pub dispersion: Micros,
    pub loss: Probability,
    pub corruption: Probability,
    pub reorder: Probability,
    pub duplicate: Probability,
}

pub const DEFAULT_RATE_BPS: u64 = 1_000_000_000;

impl Default for ConnectionProperties {
    fn default() -> Self {
        ConnectionProperties {
            rate_bps: DEFAULT_RATE_BPS,
            delay: Micros::ZERO,
            dispersion: Micros::ZERO,
            loss: Probability::ZERO,
            corruption: Probability::ZERO,
            reorder: Probability::ZERO,
            duplicate: Probability::ZERO,
        }
    }
}

impl ConnectionProperties {
    pub fn with_delay_ms(delay_ms: f64) -> Self {
        ConnectionProperties { delay: Micros::from_millis_f64(delay_ms), ..Default::default() }
    }
}

/// Unordered endpoint pair; always stored with `a <= b`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkKey {
    pub a: NodeId,
    pub b: NodeId,
}

impl LinkKey {
    pub fn new(x: NodeId, y: NodeId) -> Self {
        if x <= y {
            LinkKey { a: x, b: y }
        } else {
            LinkKey { a: y, b: x }
        }
    }

    pub fn other(&self, end: &NodeId) -> &NodeId {
        if &self.a == end {
            &self.b
        } else {
            &self.a
        }
    }
}

impl fmt::Display for LinkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}<->{}", self.a, self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Connection {
    pub endpoint_a: NodeId,
    pub endpoint_b: NodeId,
    pub properties: ConnectionProperties,
}

/// A single problem found while validating an infrastructure document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateId(String),
    UnknownEndpoint { connection: usize, id: String },
    SelfLoop { connection: usize, id: String },
    DuplicateConnection { a: String, b: String },
    OutOfRange { context: String, field: &'static str, value: String },
    Disconnected { machines: Vec<String> },
    EmptyId,
    UnknownReference(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId(id) => write!(f, "duplicate node id `{id}`"),
            Violation::UnknownEndpoint { connection, id } => {
                write!(f, "connection #{connection} references unknown node `{id}`")
            }
            Violation::SelfLoop { connection, id } => write!(f, "connection #{connection} connects `{id}` to itself"),
            Violation::DuplicateConnection { a, b } => write!(f, "more than one connection between `{a}` and `{b}`"),
            Violation::OutOfRange { context, field, value } => write!(f, "{context}: `{field}` out of range ({value})"),
            Violation::Disconnected { machines } => {
                write!(f, "machines not reachable from the rest of the graph: {}", machines.join(", "))
            }
            Violation::EmptyId => write!(f, "node id must not be empty"),
            Violation::UnknownReference(what) => write!(f, "unknown machine or link `{what}`"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum InfraError {
    #[error("malformed infrastructure document: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("invalid infrastructure model:\n{}", display_list(.0))]
    Invalid(Vec<Violation>),
    #[error("unknown machine `{0}`")]
    UnknownMachine(String),
    #[error("`{0}` is a router, not a machine")]
    NotAMachine(String),
}

impl From<InfrastructureModel> for InfraDocument {
    fn from(model: InfrastructureModel) -> Self {
        InfraDocument::from_model(&model)
    }
}

impl TryFrom<InfraDocument> for InfrastructureModel {
    type Error = InfraError;

    fn try_from(doc: InfraDocument) -> Result<Self, InfraError> {
        doc.into_model()
    }
}

pub(crate) fn display_list<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n")
}

/// Validated infrastructure graph. Serializes as an [`InfraDocument`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "InfraDocument", try_from = "InfraDocument")]
pub struct InfrastructureModel {
    nodes: BTreeMap<NodeId, MachineSpec>,
    links: BTreeMap<LinkKey, ConnectionProperties>,
}

impl InfrastructureModel {
    /// Builds and validates a model. Every violation is reported, not just the
    /// first one.
    pub fn new(nodes: Vec<MachineSpec>, connections: Vec<Connection>) -> Result<Self, InfraError> {
        let mut violations = Vec::new();
        let mut map = BTreeMap::new();
        for node in nodes {
            if node.id.0.is_empty() {
                violations.push(Violation::EmptyId);
                continue;
            }
            if node.is_machine() {
                if node.cpu.0 == 0 {
                    violations.push(Violation::OutOfRange {
                        context: format!("machine `{}`", node.id),
                        field: "cpu_cores",
                        value: "must be > 0".into(),
                    });
                }
                if node.memory_bytes == 0 {
                    violations.push(Violation::OutOfRange {
                        context: format!("machine `{}`", node.id),
                        field: "memory_mb",
                        value: "must be > 0".into(),
                    });
                }
            }
            if map.contains_key(&node.id) {
                violations.push(Violation::DuplicateId(node.id.0.clone()));
                continue;
            }
            map.insert(node.id.clone(), node);
        }

        let mut links = BTreeMap::new();
        for (idx, conn) in connections.into_iter().enumerate() {
            let mut ok = true;
            for end in [&conn.endpoint_a, &conn.endpoint_b] {
                if !map.contains_key(end) {
                    violations.push(Violation::UnknownEndpoint { connection: idx, id: end.0.clone() });
                    ok = false;
                }
            }
            if conn.endpoint_a == conn.endpoint_b {
                violations.push(Violation::SelfLoop { connection: idx, id: conn.endpoint_a.0.clone() });
                ok = false;
            }
            if conn.properties.rate_bps == 0 {
                violations.push(Violation::OutOfRange {
                    context: format!("connection #{idx}"),
                    field: "rate_mbit",
                    value: "must be > 0".into(),
                });
            }
            if !ok {
                continue;
            }
            let key = LinkKey::new(conn.endpoint_a, conn.endpoint_b);
            if links.contains_key(&key) {
                violations.push(Violation::DuplicateConnection { a: key.a.0.clone(), b: key.b.0.clone() });
                continue;
            }
            links.insert(key, conn.properties);
        }

        let model = InfrastructureModel { nodes: map, links };
        if violations.is_empty() {
            let stranded = model.stranded_machines();
            if !stranded.is_empty() {
                violations.push(Violation::Disconnected { machines: stranded });
            }
        }
        if violations.is_empty() {
            Ok(model)
        } else {
            Err(InfraError::Invalid(violations))
        }
    }

    /// Parses and validates a JSON infrastructure document.
    pub fn parse(json: &str) -> Result<Self, InfraError> {
        let doc: InfraDocument = serde_json::from_str(json)?;
        doc.into_model()
    }

    pub fn to_document(&self) -> InfraDocument {
        InfraDocument::from_model(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("document serializes")
    }

    pub fn node(&self, id: &NodeId) -> Option<&MachineSpec> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &MachineSpec> {
        self.nodes.values()
    }

    /// Machines (not routers), sorted by id.
    pub fn machines(&self) -> impl Iterator<Item = &MachineSpec> {
        self.nodes.values().filter(|n| n.is_machine())
    }

    pub fn machine_ids(&self) -> Vec<NodeId> {
        self.machines().map(|m| m.id.clone()).collect()
    }

    pub fn routers(&self) -> impl Iterator<Item = &MachineSpec> {
        self.nodes.values().filter(|n| !n.is_machine())
    }

    pub fn links(&self) -> impl Iterator<Item = (&LinkKey, &ConnectionProperties)> {
        self.links.iter()
    }

    pub fn link(&self, a: &NodeId, b: &NodeId) -> Option<&ConnectionProperties> {
        self.links.get(&LinkKey::new(a.clone(), b.clone()))
    }

    pub(crate) fn link_mut(&mut self, key: &LinkKey) -> Option<&mut ConnectionProperties> {
        self.links.get_mut(key)
    }

    pub(crate) fn remove_link(&mut self, key: &LinkKey) -> bool {
        self.links.remove(key).is_some()
    }

    pub(crate) fn node_mut(&mut self, id: &NodeId) -> Option<&mut MachineSpec> {
        self.nodes.get_mut(id)
    }

    /// Sorted neighbour list with link properties.
    pub fn neighbours<'a>(&'a self, id: &'a NodeId) -> impl Iterator<Item = (&'a NodeId, &'a ConnectionProperties)> + 'a {
        self.links
            .iter()
            .filter(move |(k, _)| &k.a == id || &k.b == id)
            .map(move |(k, p)| (k.other(id), p))
    }

    pub fn require_machine(&self, id: &NodeId) -> Result<&MachineSpec, InfraError> {
        match self.nodes.get(id) {
            None => Err(InfraError::UnknownMachine(id.0.clone())),
            Some(n) if !n.is_machine() => Err(InfraError::NotAMachine(id.0.clone())),
            Some(n) => Ok(n),
        }
    }

    /// Machines that cannot reach the first machine (in id order).
    fn stranded_machines(&self) -> Vec<String> {
        let Some(start) = self.machines().next().map(|m| m.id.clone()) else {
            return Vec::new();
        };
        let mut adjacency: BTreeMap<&NodeId, Vec<&NodeId>> = BTreeMap::new();
        for key in self.links.keys() {
            adjacency.entry(&key.a).or_default().push(&key.b);
            adjacency.entry(&key.b).or_default().push(&key.a);
        }
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([&start]);
        seen.insert(&start);
        while let Some(n) = queue.pop_front() {
            for next in adjacency.get(n).into_iter().flatten() {
                if seen.insert(*next) {
                    queue.push_back(*next);
                }
            }
        }
        self.machines().filter(|m| !seen.contains(&m.id)).map(|m| m.id.0.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(id: &str) -> MachineSpec {
        MachineSpec::machine(id, Millicores(1000), 1 << 30, 0)
    }

    fn conn(a: &str, b: &str, ms: f64) -> Connection {
        Connection { endpoint_a: a.into(), endpoint_b: b.into(), properties: ConnectionProperties::with_delay_ms(ms) }
    }

    #[test]
    fn singleton_is_valid() {
        let model = InfrastructureModel::new(vec![m("solo")], vec![]).unwrap();
        assert_eq!(model.machine_ids(), vec![NodeId::from("solo")]);
    }

    #[test]
    fn reports_every_violation() {
        let err = InfrastructureModel::new(
            vec![m("A"), m("A"), m("B")],
            vec![conn("A", "M9", 1.0), conn("B", "B", 1.0), conn("A", "B", 1.0), conn("B", "A", 2.0)],
        )
        .unwrap_err();
        let InfraError::Invalid(v) = err else { panic!("expected violations") };
        assert!(v.contains(&Violation::DuplicateId("A".into())));
        assert!(v.contains(&Violation::UnknownEndpoint { connection: 0, id: "M9".into() }));
        assert!(v.contains(&Violation::SelfLoop { connection: 1, id: "B".into() }));
        assert!(v.contains(&Violation::DuplicateConnection { a: "A".into(), b: "B".into() }));
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn unknown_endpoint_named_in_message() {
        let err = InfrastructureModel::new(vec![m("M1")], vec![conn("M1", "M9", 1.0)]).unwrap_err();
        assert!(err.to_string().contains("M9"));
    }

    #[test]
    fn disconnected_machine_rejected() {
        let err = InfrastructureModel::new(vec![m("A"), m("B"), m("C")], vec![conn("A", "B", 1.0)]).unwrap_err();
        let InfraError::Invalid(v) = err else { panic!() };
        assert_eq!(v, vec![Violation::Disconnected { machines: vec!["C".into()] }]);
    }

    #[test]
    fn dangling_router_is_fine() {
        let model =
            InfrastructureModel::new(vec![m("A"), m("B"), MachineSpec::router("R")], vec![conn("A", "B", 1.0)]).unwrap();
        assert_eq!(model.routers().count(), 1);
    }

    #[test]
    fn machine_needs_compute() {
        let zero = MachineSpec::machine("Z", Millicores(0), 0, 0);
        let InfraError::Invalid(v) = InfrastructureModel::new(vec![zero], vec![]).unwrap_err() else { panic!() };
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn neighbours_sorted() {
        let model = InfrastructureModel::new(
            vec![m("b"), m("a"), m("c")],
            vec![conn("b", "c", 1.0), conn("a", "b", 1.0)],
        )
        .unwrap();
        let b = NodeId::from("b");
        let ns: Vec<_> = model.neighbours(&b).map(|(n, _)| n.0.clone()).collect();
        assert_eq!(ns, vec!["a", "c"]);
    }
}
