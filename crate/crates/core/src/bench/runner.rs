//! One end-to-end run: data, partition, federation, ledger and outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::checkpoint::{encode_checkpoint, payload_bytes};
use crate::bench::config::{hex_digest, ExperimentConfig};
use crate::bench::ledger::{ledger_csv_string, ledger_from_history, LedgerEntry, Participant};
use crate::data::{generate_dataset, heterogeneity_index, partition, ClientShard, PartitionSpec, SyntheticDataset};
use crate::error::Result;
use crate::federation::{run_federation, ClientData, FederationConfig, FederationResult};
use crate::model::ToyModel;
use crate::rng::{RandomSource, StreamRole};

/// Everything a federation run consumes, built deterministically from the
/// config and a seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: ToyModel,
    pub dataset: SyntheticDataset,
    pub partition: PartitionSpec,
    pub shards: Vec<ClientShard>,
    pub clients: Vec<ClientData>,
    pub federation: FederationConfig,
}

pub fn prepare(
    config: &ExperimentConfig,
    clients: usize,
    dirichlet_alpha: f64,
    seed: u64,
    workers: usize,
    wall_clock: bool,
) -> Result<Prepared> {
    config.validate()?;
    let model = ToyModel::new(config.dims, seed)?;
    let mut data_rs = RandomSource::for_role(seed, StreamRole::Dataset, &[]);
    let dataset = generate_dataset(&config.data_config(), &mut data_rs)?;
    let (spec, shards) = partition(&dataset, clients, dirichlet_alpha, seed)?;
    let client_data = shards
        .iter()
        .map(|s| ClientData::from_shard(&dataset, s, config.modality_shift, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        model,
        dataset,
        partition: spec,
        shards,
        clients: client_data,
        federation: config.federation_config(clients, seed, workers, wall_clock),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub config_checksum: String,
    pub clients: usize,
    pub dirichlet_alpha: f64,
    pub seed: u64,
    pub rounds: usize,
    pub heterogeneity_index: f64,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub final_loss_u: f64,
    pub final_loss_g: f64,
    pub trainable_params: usize,
    pub frozen_params: usize,
    pub update_payload_bytes: usize,
    pub total_bytes_up: usize,
    pub total_bytes_down: usize,
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub result: FederationResult,
    pub ledger: Vec<LedgerEntry>,
    pub checkpoint: Vec<u8>,
    pub summary: RunSummary,
}

#[allow(clippy::too_many_arguments)]
pub fn execute_run(
    config: &ExperimentConfig,
    run_id: &str,
    clients: usize,
    dirichlet_alpha: f64,
    seed: u64,
    workers: usize,
    wall_clock: bool,
) -> Result<RunArtifacts> {
    let prepared = prepare(config, clients, dirichlet_alpha, seed, workers, wall_clock)?;
    let result = run_federation(&prepared.model, &prepared.clients, &prepared.federation)?;
    let trainable = result.initial.num_params();
    let frozen = prepared.model.frozen_params();
    let ledger = ledger_from_history(run_id, &result, trainable, frozen);
    let checkpoint = encode_checkpoint(result.final_adapters())?;
    let final_metrics = result.final_metrics();
    let client_rows = || ledger.iter().filter(|e| e.client_id != Participant::Server);
    let summary = RunSummary {
        run_id: run_id.to_string(),
        config_checksum: config.checksum(),
        clients,
        dirichlet_alpha,
        seed,
        rounds: result.history.len(),
        heterogeneity_index: heterogeneity_index(&prepared.partition),
        initial_accuracy: result.initial_metrics.accuracy,
        final_accuracy: final_metrics.accuracy,
        final_loss_u: final_metrics.loss_u,
        final_loss_g: final_metrics.loss_g,
        trainable_params: trainable,
        frozen_params: frozen,
        update_payload_bytes: payload_bytes(&result.initial),
        total_bytes_up: client_rows().map(|e| e.bytes_up).sum(),
        total_bytes_down: client_rows().map(|e| e.bytes_down).sum(),
        checkpoint_sha256: hex_digest(&checkpoint),
    };
    Ok(RunArtifacts {
        result,
        ledger,
        checkpoint,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputPaths {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub checkpoint: PathBuf,
}

impl OutputPaths {
    pub fn new(dir: &Path, stem: &str) -> Self {
        Self {
            csv: dir.join(format!("{stem}.csv")),
            json: dir.join(format!("{stem}.json")),
            checkpoint: dir.join(format!("{stem}.fumm")),
        }
    }
}

/// Writes the ledger CSV, the JSON summary and the final checkpoint.
pub fn write_outputs(artifacts: &RunArtifacts, paths: &OutputPaths) -> Result<()> {
    if let Some(dir) = paths.csv.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&paths.csv, ledger_csv_string(&artifacts.ledger)?)?;
    std::fs::write(&paths.checkpoint, &artifacts.checkpoint)?;
    let mut json = serde_json::to_string_pretty(&artifacts.summary)?;
    json.push('\n');
    std::fs::write(&paths.json, json)?;
    Ok(())
}
