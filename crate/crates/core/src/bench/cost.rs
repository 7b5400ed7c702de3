//! Communication cost arithmetic. GB means 10⁹ bytes throughout.

use serde::{Deserialize, Serialize};

use crate::adapter::init_adapter_set;
use crate::bench::checkpoint::{payload_bytes, tensor_record_bytes, HEADER_BYTES};
use crate::error::{Error, Result};
use crate::model::{ModelDims, ToyModel};
use crate::rng::RandomSource;

pub const BYTES_PER_GB: f64 = 1e9;

/// Reference full-model update size per round.
pub const REFERENCE_FULL_GB: f64 = 28.6;
/// Reference adapter update size per round.
pub const REFERENCE_ADAPTER_GB: f64 = 0.094;
pub const REFERENCE_ROUNDS: u32 = 100;
pub const REFERENCE_CLIENTS: u32 = 8;
/// Reported 100-round total, which the two figures above do not reproduce.
pub const REFERENCE_REPORTED_TOTAL_GB: f64 = 7.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub full_update_gb_per_round: f64,
    pub adapter_update_gb_per_round: f64,
    pub rounds: u32,
}

impl CostModel {
    pub fn reference() -> Self {
        Self {
            full_update_gb_per_round: REFERENCE_FULL_GB,
            adapter_update_gb_per_round: REFERENCE_ADAPTER_GB,
            rounds: REFERENCE_ROUNDS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if self.full_update_gb_per_round == 0.0 {
            return Err(Error::InvalidArgument("full update size is zero".into()));
        }
        if !ok(self.full_update_gb_per_round) || !ok(self.adapter_update_gb_per_round) {
            return Err(Error::InvalidArgument(format!("update sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub per_round_reduction_pct: f64,
    pub total_gb: f64,
}

pub fn reduction_report(cm: &CostModel) -> Result<ReductionReport> {
    cm.validate()?;
    Ok(ReductionReport {
        per_round_reduction_pct: (1.0 - cm.adapter_update_gb_per_round / cm.full_update_gb_per_round) * 100.0,
        total_gb: cm.adapter_update_gb_per_round * f64::from(cm.rounds),
    })
}

/// The adapter figure read two ways: as the whole round's traffic, or as
/// one client's upload (so a round costs `clients` times as much).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: CostModel,
    pub clients: u32,
    pub per_round_reduction_pct: f64,
    pub total_gb_if_per_round: f64,
    pub total_gb_if_per_client: f64,
    pub full_total_gb_if_per_round: f64,
    pub reported_total_gb: Option<f64>,
    /// Set when the reported total matches neither reading within 1%.
    pub reported_total_mismatch: bool,
}

pub fn cost_report(cm: &CostModel, clients: u32, reported_total_gb: Option<f64>) -> Result<CostReport> {
    if clients == 0 {
        return Err(Error::InvalidArgument("client count must be >= 1".into()));
    }
    let base = reduction_report(cm)?;
    let per_client = base.total_gb * f64::from(clients);
    let close = |a: f64, b: f64| (a - b).abs() <= 0.01 * b.abs();
    let mismatch = reported_total_gb.is_some_and(|r| !close(r, base.total_gb) && !close(r, per_client));
    Ok(CostReport {
        model: *cm,
        clients,
        per_round_reduction_pct: base.per_round_reduction_pct,
        total_gb_if_per_round: base.total_gb,
        total_gb_if_per_client: per_client,
        full_total_gb_if_per_round: cm.full_update_gb_per_round * f64::from(cm.rounds),
        reported_total_gb,
        reported_total_mismatch: mismatch,
    })
}

/// Measured adapter traffic against shipping every model parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommRatio {
    pub trainable_params: usize,
    pub frozen_params: usize,
    pub adapter_payload_bytes: usize,
    /// Frozen weights plus adapters in the same checkpoint encoding.
    pub full_payload_bytes: usize,
    pub param_fraction: f64,
    pub byte_reduction_factor: f64,
}

pub fn comm_ratio(dims: ModelDims, lora_rank: usize, lora_alpha: f64) -> Result<CommRatio> {
    let model = ToyModel::new(dims, 0)?;
    let adapters = init_adapter_set(model.registry(), lora_rank, lora_alpha, &mut RandomSource::new(0, 0))?;
    let adapter_bytes = payload_bytes(&adapters);
    let frozen_bytes: usize = model.frozen_weights().iter().map(|t| tensor_record_bytes(t)).sum();
    let full_bytes = adapter_bytes + frozen_bytes;
    let trainable = adapters.num_params();
    let frozen = model.frozen_params();
    debug_assert!(full_bytes > HEADER_BYTES);
    Ok(CommRatio {
        trainable_params: trainable,
        frozen_params: frozen,
        adapter_payload_bytes: adapter_bytes,
        full_payload_bytes: full_bytes,
        param_fraction: trainable as f64 / (trainable + frozen) as f64,
        byte_reduction_factor: full_bytes as f64 / adapter_bytes as f64,
    })
}

pub fn bytes_to_gb(bytes: usize) -> f64 {
    bytes as f64 / BYTES_PER_GB
}
