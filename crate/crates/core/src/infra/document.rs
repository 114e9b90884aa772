use serde::{Deserialize, Serialize};

use super::{
    Connection, ConnectionProperties, InfraError, InfrastructureModel, MachineSpec, NodeId, Violation,
    DEFAULT_RATE_BPS,
};
use crate::units::{bytes_to_mib, mib_to_bytes, round9, Micros, Millicores, Probability};

/// JSON shape of an infrastructure file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfraDocument {
    #[serde(default)]
    pub machines: Vec<MachineDoc>,
    #[serde(default)]
    pub routers: Vec<RouterDoc>,
    #[serde(default)]
    pub connections: Vec<ConnectionDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineDoc {
    pub id: String,
    pub cpu_cores: f64,
    pub memory_mb: f64,
    #[serde(default)]
    pub storage_mb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterDoc {
    pub id: String,
}

fn default_rate_mbit() -> f64 {
    DEFAULT_RATE_BPS as f64 / 1e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectionDoc {
    pub from: String,
    pub to: String,
    #[serde(default = "default_rate_mbit")]
    pub rate_mbit: f64,
    /// One-way delay. Round-trip figures must be halved before they go here.
    #[serde(default)]
    pub delay_ms_oneway: f64,
    #[serde(default)]
    pub dispersion_ms: f64,
    #[serde(default)]
    pub loss_pct: f64,
    #[serde(default)]
    pub corruption_pct: f64,
    #[serde(default)]
    pub reorder_pct: f64,
    #[serde(default)]
    pub duplicate_pct: f64,
}

impl ConnectionDoc {
    pub(crate) fn properties(&self, context: &str, violations: &mut Vec<Violation>) -> ConnectionProperties {
        let mut range = |field: &'static str, value: f64, ok: bool| {
            if !ok {
                violations.push(Violation::OutOfRange { context: context.to_string(), field, value: value.to_string() });
            }
        };
        range("rate_mbit", self.rate_mbit, self.rate_mbit.is_finite() && self.rate_mbit > 0.0);
        range("delay_ms_oneway", self.delay_ms_oneway, self.delay_ms_oneway.is_finite() && self.delay_ms_oneway >= 0.0);
        range("dispersion_ms", self.dispersion_ms, self.dispersion_ms.is_finite() && self.dispersion_ms >= 0.0);
        let mut pct = |field: &'static str, value: f64| -> Probability {
            match Probability::from_percent(value) {
                Some(p) => p,
                None => {
                    range(field, value, false);
                    Probability::ZERO
                }
            }
        };
        let loss = pct("loss_pct", self.loss_pct);
        let corruption = pct("corruption_pct", self.corruption_pct);
        let reorder = pct("reorder_pct", self.reorder_pct);
        let duplicate = pct("duplicate_pct", self.duplicate_pct);
        ConnectionProperties {
            rate_bps: if self.rate_mbit > 0.0 { (self.rate_mbit * 1e6).round() as u64 } else { 0 },
            delay: Micros::from_millis_f64(self.delay_ms_oneway),
            dispersion: Micros::from_millis_f64(self.dispersion_ms),
            loss,
            corruption,
            reorder,
            duplicate,
        }
    }

    fn from_properties(from: &NodeId, to: &NodeId, p: &ConnectionProperties) -> Self {
        ConnectionDoc {
            from: from.0.clone(),
            to: to.0.clone(),
            rate_mbit: round9(p.rate_bps as f64 / 1e6),
            delay_ms_oneway: p.delay.as_millis_f64(),
            dispersion_ms: p.dispersion.as_millis_f64(),
            loss_pct: p.loss.as_percent(),
            corruption_pct: p.corruption.as_percent(),
            reorder_pct: p.reorder.as_percent(),
            duplicate_pct: p.duplicate.as_percent(),
        }
    }
}

impl InfraDocument {
    /// Validates the document. All violations (document-level ranges and
    /// graph-level structure) are collected before returning.
    pub fn into_model(self) -> Result<InfrastructureModel, InfraError> {
        let mut violations = Vec::new();
        let mut nodes = Vec::with_capacity(self.machines.len() + self.routers.len());
        for m in &self.machines {
            for (field, v) in [("cpu_cores", m.cpu_cores), ("memory_mb", m.memory_mb)] {
                if !(v.is_finite() && v > 0.0) {
                    violations.push(Violation::OutOfRange {
                        context: format!("machine `{}`", m.id),
                        field,
                        value: v.to_string(),
                    });
                }
            }
            if !(m.storage_mb.is_finite() && m.storage_mb >= 0.0) {
                violations.push(Violation::OutOfRange {
                    context: format!("machine `{}`", m.id),
                    field: "storage_mb",
                    value: m.storage_mb.to_string(),
                });
            }
            nodes.push(MachineSpec::machine(
                m.id.clone(),
                Millicores::from_cores_f64(m.cpu_cores).max(Millicores(u64::from(m.cpu_cores > 0.0))),
                mib_to_bytes(m.memory_mb).max(u64::from(m.memory_mb > 0.0)),
                mib_to_bytes(m.storage_mb),
            ));
        }
        nodes.extend(self.routers.iter().map(|r| MachineSpec::router(r.id.clone())));

        let connections = self
            .connections
            .iter()
            .enumerate()
            .map(|(i, c)| Connection {
                endpoint_a: NodeId::new(c.from.clone()),
                endpoint_b: NodeId::new(c.to.clone()),
                properties: c.properties(&format!("connection #{i} ({} - {})", c.from, c.to), &mut violations),
            })
            .collect();

        match InfrastructureModel::new(nodes, connections) {
            Ok(model) if violations.is_empty() => Ok(model),
            Ok(_) => Err(InfraError::Invalid(violations)),
            Err(InfraError::Invalid(mut rest)) => {
                // range problems were already reported against the document fields
                rest.retain(|v| !matches!(v, Violation::OutOfRange { .. }));
                violations.extend(rest);
                Err(InfraError::Invalid(violations))
            }
            Err(other) => Err(other),
        }
    }

    pub fn from_model(model: &InfrastructureModel) -> Self {
        InfraDocument {
            machines: model
                .machines()
                .map(|m| MachineDoc {
                    id: m.id.0.clone(),
                    cpu_cores: m.cpu.as_cores_f64(),
                    memory_mb: round9(bytes_to_mib(m.memory_bytes)),
                    storage_mb: round9(bytes_to_mib(m.storage_bytes)),
                })
                .collect(),
            routers: model.routers().map(|r| RouterDoc { id: r.id.0.clone() }).collect(),
            connections: model.links().map(|(k, p)| ConnectionDoc::from_properties(&k.a, &k.b, p)).collect(),
        }
    }
}
