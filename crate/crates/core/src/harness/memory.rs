//! Storage accounting for adapters and prototypes.

use serde::{Deserialize, Serialize};

use crate::expert::AdapterExpert;
use crate::prototypes::PrototypePool;

pub const DEFAULT_BYTES_PER_WEIGHT: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub experts: usize,
    pub prototypes: usize,
    pub adapter_parameters: usize,
    pub bytes_per_weight: usize,
    /// Adapter memory: `Σ 2·d·r` weights.
    pub adapter_bytes: usize,
    /// Prototype memory: one `d`-vector per class.
    pub prototype_bytes: usize,
    /// Prototype count if every expert kept its own copy for every class.
    pub counterfactual_prototypes: usize,
}

impl MemoryReport {
    /// Our prototype count over the per-expert counterfactual.
    pub fn prototype_ratio(&self) -> f64 {
        if self.counterfactual_prototypes == 0 {
            return 0.0;
        }
        self.prototypes as f64 / self.counterfactual_prototypes as f64
    }
}

pub fn memory_report(
    experts: &[AdapterExpert],
    pool: &PrototypePool,
    bytes_per_weight: usize,
) -> MemoryReport {
    let adapter_parameters: usize = experts.iter().map(AdapterExpert::parameter_count).sum();
    MemoryReport {
        experts: experts.len(),
        prototypes: pool.len(),
        adapter_parameters,
        bytes_per_weight,
        adapter_bytes: adapter_parameters * bytes_per_weight,
        prototype_bytes: pool.len() * pool.dim() * bytes_per_weight,
        counterfactual_prototypes: experts.len() * pool.len(),
    }
}
