//! Runtime manipulations layered on top of the pristine model.
//!
//! Updates accumulate until a `reset` clears them, so a state that only
//! touches one link keeps whatever earlier states changed elsewhere.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{InfraError, InfrastructureModel, LinkKey, NodeId, Violation};
use crate::units::{mib_to_bytes, Micros, Millicores, Probability};

/// Partial override for one link. Absent fields keep their current value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkOverride {
    pub from: String,
    pub to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_mbit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms_oneway: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dispersion_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reorder_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_pct: Option<f64>,
    /// Takes the link out of the graph entirely.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub down: bool,
}

/// Partial override for one machine, or for every machine with id `"*"`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineOverride {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_cores: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_mb: Option<f64>,
    /// Multiplies the (possibly overridden) memory, e.g. `0.8` for -20 %.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_scale: Option<f64>,
}

pub const ALL_MACHINES: &str = "*";

/// A single machine cut off from everyone, or one pair cut off from each other.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PartitionSpec {
    Machine(NodeId),
    Pair([NodeId; 2]),
}

impl PartitionSpec {
    fn normalized(self) -> Self {
        match self {
            PartitionSpec::Pair([a, b]) if a > b => PartitionSpec::Pair([b, a]),
            other => other,
        }
    }

    /// True when traffic between `a` and `b` is blocked by this partition.
    pub fn separates(&self, a: &NodeId, b: &NodeId) -> bool {
        match self {
            PartitionSpec::Machine(m) => m == a || m == b,
            PartitionSpec::Pair([x, y]) => (x == a && y == b) || (x == b && y == a),
        }
    }

    fn machines(&self) -> Vec<&NodeId> {
        match self {
            PartitionSpec::Machine(m) => vec![m],
            PartitionSpec::Pair([a, b]) => vec![a, b],
        }
    }
}

/// The infrastructure action of one orchestration state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfraUpdate {
    /// Drop every earlier manipulation before applying the rest of this update.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub reset: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<LinkOverride>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub machines: Vec<MachineOverride>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub partitions: Vec<PartitionSpec>,
}

impl InfraUpdate {
    pub fn is_empty(&self) -> bool {
        !self.reset && self.links.is_empty() && self.machines.is_empty() && self.partitions.is_empty()
    }

    /// Checks references and value ranges against `model`.
    pub fn check(&self, model: &InfrastructureModel) -> Vec<Violation> {
        let mut out = Vec::new();
        for (i, l) in self.links.iter().enumerate() {
            let (a, b) = (NodeId::new(l.from.clone()), NodeId::new(l.to.clone()));
            if model.link(&a, &b).is_none() {
                out.push(Violation::UnknownReference(format!("link {}<->{}", l.from, l.to)));
            }
            let mut bad = |field: &'static str, v: Option<f64>, ok: fn(f64) -> bool| {
                if let Some(v) = v.filter(|v| !ok(*v)) {
                    out.push(Violation::OutOfRange { context: format!("link override #{i}"), field, value: v.to_string() });
                }
            };
            bad("rate_mbit", l.rate_mbit, |v| v.is_finite() && v > 0.0);
            bad("delay_ms_oneway", l.delay_ms_oneway, |v| v.is_finite() && v >= 0.0);
            bad("dispersion_ms", l.dispersion_ms, |v| v.is_finite() && v >= 0.0);
            for (field, v) in [
                ("loss_pct", l.loss_pct),
                ("corruption_pct", l.corruption_pct),
                ("reorder_pct", l.reorder_pct),
                ("duplicate_pct", l.duplicate_pct),
            ] {
                bad(field, v, |v| Probability::from_percent(v).is_some());
            }
        }
        for m in &self.machines {
            if m.id != ALL_MACHINES && model.require_machine(&NodeId::new(m.id.clone())).is_err() {
                out.push(Violation::UnknownReference(m.id.clone()));
            }
            for (field, v) in [("cpu_cores", m.cpu_cores), ("memory_mb", m.memory_mb), ("memory_scale", m.memory_scale)] {
                if let Some(v) = v.filter(|v| !(v.is_finite() && *v > 0.0)) {
                    out.push(Violation::OutOfRange { context: format!("machine override `{}`", m.id), field, value: v.to_string() });
                }
            }
        }
        for p in &self.partitions {
            for id in p.machines() {
                if model.require_machine(id).is_err() {
                    out.push(Violation::UnknownReference(id.0.clone()));
                }
            }
        }
        out
    }
}

/// Accumulated manipulations. `Default` is the pristine state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InfraOverlay {
    links: BTreeMap<LinkKey, LinkOverride>,
    machines: BTreeMap<String, MachineOverride>,
    partitions: BTreeSet<PartitionSpec>,
}

fn merge<T: Clone>(dst: &mut Option<T>, src: &Option<T>) {
    if src.is_some() {
        dst.clone_from(src);
    }
}

impl InfraOverlay {
    pub fn is_pristine(&self) -> bool {
        self.links.is_empty() && self.machines.is_empty() && self.partitions.is_empty()
    }

    pub fn apply(&mut self, update: &InfraUpdate) {
        if update.reset {
            *self = InfraOverlay::default();
        }
        for l in &update.links {
            let key = LinkKey::new(NodeId::new(l.from.clone()), NodeId::new(l.to.clone()));
            let slot = self.links.entry(key).or_insert_with(|| LinkOverride {
                from: l.from.clone(),
                to: l.to.clone(),
                ..Default::default()
            });
            merge(&mut slot.rate_mbit, &l.rate_mbit);
            merge(&mut slot.delay_ms_oneway, &l.delay_ms_oneway);
            merge(&mut slot.dispersion_ms, &l.dispersion_ms);
            merge(&mut slot.loss_pct, &l.loss_pct);
            merge(&mut slot.corruption_pct, &l.corruption_pct);
            merge(&mut slot.reorder_pct, &l.reorder_pct);
            merge(&mut slot.duplicate_pct, &l.duplicate_pct);
            slot.down = l.down;
        }
        for m in &update.machines {
            let slot = self
                .machines
                .entry(m.id.clone())
                .or_insert_with(|| MachineOverride { id: m.id.clone(), ..Default::default() });
            merge(&mut slot.cpu_cores, &m.cpu_cores);
            merge(&mut slot.memory_mb, &m.memory_mb);
            merge(&mut slot.memory_scale, &m.memory_scale);
        }
        self.partitions.extend(update.partitions.iter().cloned().map(PartitionSpec::normalized));
    }

    pub fn partitions(&self) -> impl Iterator<Item = &PartitionSpec> {
        self.partitions.iter()
    }

    /// The model as currently manipulated. Unlike [`InfrastructureModel::new`]
    /// this does not require connectivity: taking links down may strand
    /// machines, which then show up as unreachable.
    pub fn materialize(&self, base: &InfrastructureModel) -> Result<InfrastructureModel, InfraError> {
        let mut model = base.clone();
        let mut violations = Vec::new();
        for (key, o) in &self.links {
            if o.down {
                if !model.remove_link(key) {
                    violations.push(Violation::UnknownReference(key.to_string()));
                }
                continue;
            }
            let Some(p) = model.link_mut(key) else {
                violations.push(Violation::UnknownReference(key.to_string()));
                continue;
            };
            if let Some(v) = o.rate_mbit {
                p.rate_bps = (v * 1e6).round().max(1.0) as u64;
            }
            if let Some(v) = o.delay_ms_oneway {
                p.delay = Micros::from_millis_f64(v);
            }
            if let Some(v) = o.dispersion_ms {
                p.dispersion = Micros::from_millis_f64(v);
            }
            let pct = |v: Option<f64>, cur: Probability| v.and_then(Probability::from_percent).unwrap_or(cur);
            p.loss = pct(o.loss_pct, p.loss);
            p.corruption = pct(o.corruption_pct, p.corruption);
            p.reorder = pct(o.reorder_pct, p.reorder);
            p.duplicate = pct(o.duplicate_pct, p.duplicate);
        }

        let ids = model.machine_ids();
        // "*" sorts before any alphanumeric id, so explicit overrides win
        for (target, o) in &self.machines {
            let targets: Vec<NodeId> =
                if target == ALL_MACHINES { ids.clone() } else { vec![NodeId::new(target.clone())] };
            for id in targets {
                let Some(spec) = model.node_mut(&id).filter(|n| n.is_machine()) else {
                    violations.push(Violation::UnknownReference(id.0.clone()));
                    continue;
                };
                if let Some(c) = o.cpu_cores {
                    spec.cpu = Millicores::from_cores_f64(c);
                }
                if let Some(mb) = o.memory_mb {
                    spec.memory_bytes = mib_to_bytes(mb);
                }
                if let Some(scale) = o.memory_scale {
                    spec.memory_bytes = (spec.memory_bytes as f64 * scale).round() as u64;
                }
            }
        }
        if violations.is_empty() {
            Ok(model)
        } else {
            Err(InfraError::Invalid(violations))
        }
    }
}
