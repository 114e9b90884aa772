use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::MachineSpec;
use crate::units::{bytes_to_mib, Millicores};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Resources {
    pub cpu: Millicores,
    pub memory_bytes: u64,
    pub storage_bytes: u64,
}

impl Resources {
    fn covers(&self, need: &Resources) -> bool {
        self.cpu >= need.cpu && self.memory_bytes >= need.memory_bytes && self.storage_bytes >= need.storage_bytes
    }

    fn surplus_over(&self, need: &Resources) -> Resources {
        Resources {
            cpu: Millicores(self.cpu.0 - need.cpu.0),
            memory_bytes: self.memory_bytes - need.memory_bytes,
            storage_bytes: self.storage_bytes - need.storage_bytes,
        }
    }
}

/// A machine type offered by a provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineCatalogEntry {
    pub type_name: String,
    pub resources: Resources,
    /// Lower is cheaper. Unique within a catalog.
    pub cost_rank: u32,
}

impl MachineCatalogEntry {
    pub fn new(type_name: &str, cores: f64, memory_mib: u64, storage_mib: u64, cost_rank: u32) -> Self {
        MachineCatalogEntry {
            type_name: type_name.to_string(),
            resources: Resources {
                cpu: Millicores::from_cores_f64(cores),
                memory_bytes: memory_mib * crate::units::MIB,
                storage_bytes: storage_mib * crate::units::MIB,
            },
            cost_rank,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    CpuCores,
    Memory,
    Storage,
    /// Each dimension fits some entry, but no single entry fits all of them.
    Combination,
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dimension::CpuCores => "cpu_cores",
            Dimension::Memory => "memory",
            Dimension::Storage => "storage",
            Dimension::Combination => "combination of cpu_cores, memory and storage",
        })
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CatalogError {
    #[error("machine catalog is empty")]
    Empty,
    #[error("cost rank {0} is used by more than one catalog entry")]
    DuplicateRank(u32),
    #[error("no machine type fulfills `{machine}`: {dimension} ({detail})")]
    NoFit { machine: String, dimension: Dimension, detail: String },
}

/// The chosen type and what it provides beyond the request. The surplus is
/// what container limits have to hide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeSelection {
    pub entry: MachineCatalogEntry,
    pub surplus: Resources,
}

/// Selects the cheapest catalog entry that covers `spec` in every dimension.
pub fn map_machine_to_type(spec: &MachineSpec, catalog: &[MachineCatalogEntry]) -> Result<TypeSelection, CatalogError> {
    if catalog.is_empty() {
        return Err(CatalogError::Empty);
    }
    let mut ranks = BTreeSet::new();
    for e in catalog {
        if !ranks.insert(e.cost_rank) {
            return Err(CatalogError::DuplicateRank(e.cost_rank));
        }
    }
    let need = spec.resources();
    if let Some(entry) = catalog.iter().filter(|e| e.resources.covers(&need)).min_by_key(|e| e.cost_rank) {
        return Ok(TypeSelection { entry: entry.clone(), surplus: entry.resources.surplus_over(&need) });
    }

    let max_cpu = catalog.iter().map(|e| e.resources.cpu).max().unwrap_or_default();
    let max_mem = catalog.iter().map(|e| e.resources.memory_bytes).max().unwrap_or_default();
    let max_storage = catalog.iter().map(|e| e.resources.storage_bytes).max().unwrap_or_default();
    let (dimension, detail) = if need.cpu > max_cpu {
        (Dimension::CpuCores, format!("needs {} cores, largest type has {}", need.cpu, max_cpu))
    } else if need.memory_bytes > max_mem {
        (
            Dimension::Memory,
            format!("needs {} MiB, largest type has {} MiB", bytes_to_mib(need.memory_bytes), bytes_to_mib(max_mem)),
        )
    } else if need.storage_bytes > max_storage {
        (
            Dimension::Storage,
            format!(
                "needs {} MiB, largest type has {} MiB",
                bytes_to_mib(need.storage_bytes),
                bytes_to_mib(max_storage)
            ),
        )
    } else {
        (Dimension::Combination, "no single type covers all requirements".to_string())
    };
    Err(CatalogError::NoFit { machine: spec.id.0.clone(), dimension, detail })
}
