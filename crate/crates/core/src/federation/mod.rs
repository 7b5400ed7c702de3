//! Round-based federation over adapter parameters.
//!
//! The controller ([`run_federation`]) broadcasts a snapshot of the global
//! adapters, runs every client's local training ([`run_client`]) on a
//! worker pool, weights and aggregates the returned adapters, optionally
//! applies a server optimizer step, and evaluates the new global adapters
//! on the pooled validation data. Clients are pure functions of
//! `(task, data, seed)`, and aggregation runs in ascending client id order,
//! so results do not depend on the number of workers.

mod aggregate;
mod client;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use aggregate::{
    aggregate, compute_weights, server_opt_step, weights_from_counts, AggregationWeights, ServerOptState,
    QUALITY_EPSILON,
};
pub use client::{run_client, train_centralized, ClientData};

use crate::adapter::{init_adapter_set, AdapterSet};
use crate::error::{Error, Result};
use crate::model::{evaluate, Batch, LossBreakdown, LossWeights, ToyModel};
use crate::optim::OptimizerConfig;
use crate::rng::{RandomSource, StreamRole};
use crate::split::{InterfacePolicy, InterfaceTraffic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    FedAvg,
    Fusion,
    FedProx,
    FedOpt,
}

impl Aggregator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Aggregator::FedAvg => "fedavg",
            Aggregator::Fusion => "fusion",
            Aggregator::FedProx => "fedprox",
            Aggregator::FedOpt => "fedopt",
        }
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Aggregator::FedAvg),
            "fusion" => Ok(Aggregator::Fusion),
            "fedprox" => Ok(Aggregator::FedProx),
            "fedopt" => Ok(Aggregator::FedOpt),
            other => Err(Error::Config(format!(
                "unknown aggregator {other:?} (expected fedavg, fusion, fedprox or fedopt)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub aggregator: Aggregator,
    /// Proximal strength; only read by [`Aggregator::FedProx`].
    pub prox_mu: f64,
    pub server_lr: f64,
    pub server_momentum: f64,
    /// Multiplies sample-count weights by validation quality. Always on for
    /// [`Aggregator::Fusion`].
    pub quality_weighting: bool,
    pub quality_epsilon: f64,
    pub seed: u64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Base optimizer. Its `cosine_total_steps` is ignored; each client
    /// derives the schedule length from its own steps per epoch when
    /// `cosine_schedule` is set.
    pub optimizer: OptimizerConfig,
    pub cosine_schedule: bool,
    pub loss_weights: LossWeights,
    /// Split device/edge execution with this interface policy.
    pub split: Option<InterfacePolicy>,
    pub workers: usize,
    /// Record measured wall time; off keeps ledgers byte-reproducible.
    pub wall_clock: bool,
}

impl FederationConfig {
    /// Toy-scale defaults (see the README for how they were chosen).
    pub fn toy(clients: usize, seed: u64) -> Self {
        Self {
            clients,
            rounds: 30,
            local_epochs: 5,
            batch_size: 32,
            aggregator: Aggregator::FedAvg,
            prox_mu: 0.0,
            server_lr: 1.0,
            server_momentum: 0.9,
            quality_weighting: false,
            quality_epsilon: QUALITY_EPSILON,
            seed,
            lora_rank: 16,
            lora_alpha: 32.0,
            optimizer: OptimizerConfig::adamw(1e-2, 0.05),
            cosine_schedule: true,
            loss_weights: LossWeights::default(),
            split: None,
            workers: 1,
            wall_clock: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.clients == 0 {
            return fail("federation needs at least one client".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be >= 1".into());
        }
        if self.workers == 0 {
            return fail("worker count must be >= 1".into());
        }
        if !(self.prox_mu >= 0.0) || !self.prox_mu.is_finite() {
            return fail(format!("prox_mu must be >= 0, got {}", self.prox_mu));
        }
        if !(self.server_lr > 0.0) || !self.server_lr.is_finite() {
            return fail(format!("server_lr must be > 0, got {}", self.server_lr));
        }
        if !(0.0..1.0).contains(&self.server_momentum) {
            return fail(format!("server_momentum must lie in [0, 1), got {}", self.server_momentum));
        }
        if !(self.quality_epsilon >= 0.0) {
            return fail(format!("quality epsilon must be >= 0, got {}", self.quality_epsilon));
        }
        if !(self.lora_alpha > 0.0) || !self.lora_alpha.is_finite() {
            return fail(format!("lora_alpha must be > 0, got {}", self.lora_alpha));
        }
        self.optimizer.validate()?;
        self.loss_weights.validate()?;
        if let Some(p) = &self.split {
            p.validate()?;
        }
        Ok(())
    }

    pub fn uses_quality_weighting(&self) -> bool {
        self.quality_weighting || self.aggregator == Aggregator::Fusion
    }

    pub(crate) fn proximal_mu(&self) -> Option<f64> {
        (self.aggregator == Aggregator::FedProx && self.prox_mu > 0.0).then_some(self.prox_mu)
    }

    /// Starting adapters of a run.
    pub fn initial_adapters(&self, model: &ToyModel) -> Result<AdapterSet> {
        let mut rs = RandomSource::for_role(self.seed, StreamRole::AdapterInit, &[]);
        init_adapter_set(model.registry(), self.lora_rank, self.lora_alpha, &mut rs)
    }
}

/// Server-to-client work item for one round.
#[derive(Debug, Clone)]
pub struct RoundTask {
    /// 1-based round index.
    pub round: usize,
    pub snapshot: AdapterSet,
    pub seed: u64,
}

impl RoundTask {
    /// Stream for one client in this round.
    pub fn client_stream(&self, role: StreamRole, client_id: usize, coords: &[u64]) -> RandomSource {
        let mut parts = vec![self.round as u64, client_id as u64];
        parts.extend_from_slice(coords);
        RandomSource::for_role(self.seed, role, &parts)
    }
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub adapters: AdapterSet,
    pub n_k: usize,
    /// Accuracy on the client's validation split (train split if empty).
    pub val_score: f64,
    pub val_metrics: LossBreakdown,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub interface: InterfaceTraffic,
    pub wall_ms: u64,
}

#[cfg(test)]
impl ClientUpdate {
    pub(crate) fn for_tests(client_id: usize, adapters: AdapterSet, n_k: usize, val_score: f64) -> Self {
        Self {
            client_id,
            adapters,
            n_k,
            val_score,
            val_metrics: LossBreakdown {
                loss_u: 0.0,
                loss_g: 0.0,
                total: 0.0,
                accuracy: val_score,
            },
            bytes_up: 0,
            bytes_down: 0,
            interface: InterfaceTraffic::default(),
            wall_ms: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client_id: usize,
    pub n_k: usize,
    pub weight: f64,
    pub metrics: LossBreakdown,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub interface: InterfaceTraffic,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub global: AdapterSet,
    /// Global adapters on the pooled validation set.
    pub metrics: LossBreakdown,
    pub clients: Vec<ClientRecord>,
    pub server_wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct FederationResult {
    pub initial: AdapterSet,
    pub initial_metrics: LossBreakdown,
    pub history: Vec<RoundRecord>,
}

impl FederationResult {
    pub fn final_adapters(&self) -> &AdapterSet {
        self.history.last().map_or(&self.initial, |r| &r.global)
    }

    pub fn final_metrics(&self) -> LossBreakdown {
        self.history.last().map_or(self.initial_metrics, |r| r.metrics)
    }
}

/// Every client's validation rows, in client order. Clients without a
/// validation split contribute their training rows instead.
pub fn pooled_validation(model: &ToyModel, clients: &[ClientData]) -> Result<Batch> {
    let parts: Vec<&Batch> = clients.iter().map(ClientData::eval_batch).collect();
    Batch::concat(&model.dims(), &parts)
}

fn elapsed_ms(start: Option<std::time::Instant>) -> u64 {
    start.map_or(0, |s| s.elapsed().as_millis() as u64)
}

pub fn run_federation(model: &ToyModel, clients: &[ClientData], config: &FederationConfig) -> Result<FederationResult> {
    config.validate()?;
    if clients.len() != config.clients {
        return Err(Error::Config(format!(
            "config expects {} clients but {} shards were given",
            config.clients,
            clients.len()
        )));
    }
    for (i, c) in clients.iter().enumerate() {
        if c.client_id != i {
            return Err(Error::Config(format!("client data at position {i} has id {}", c.client_id)));
        }
    }
    let pooled = pooled_validation(model, clients)?;
    let initial = config.initial_adapters(model)?;
    let initial_metrics = evaluate(model, &initial, &pooled, config.loss_weights)?;
    let pool = if config.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
        Some(pool)
    } else {
        None
    };

    let mut global = initial.clone();
    let mut server_state = ServerOptState::default();
    let mut history = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let task = RoundTask {
            round,
            snapshot: global.clone(),
            seed: config.seed,
        };
        let results: Vec<Result<ClientUpdate>> = match &pool {
            None => clients.iter().map(|c| run_client(&task, c, model, config)).collect(),
            Some(pool) => {
                use rayon::prelude::*;
                pool.install(|| clients.par_iter().map(|c| run_client(&task, c, model, config)).collect())
            }
        };
        let mut updates = Vec::with_capacity(results.len());
        for (c, r) in clients.iter().zip(results) {
            updates.push(r.map_err(|e| Error::Client {
                round,
                client_id: c.client_id,
                source: Box::new(e),
            })?);
        }

        let server_start = config.wall_clock.then(std::time::Instant::now);
        let weights = compute_weights(&updates, config.uses_quality_weighting(), config.quality_epsilon)?;
        let aggregated = aggregate(&updates, &weights)?;
        let next = if config.aggregator == Aggregator::FedOpt {
            server_opt_step(&global, &aggregated, &mut server_state, config.server_lr, config.server_momentum)?
        } else {
            aggregated
        };
        let metrics = evaluate(model, &next, &pooled, config.loss_weights)?;
        let server_wall_ms = elapsed_ms(server_start);

        let records = updates
            .iter()
            .zip(&weights.weights)
            .map(|(u, &w)| ClientRecord {
                client_id: u.client_id,
                n_k: u.n_k,
                weight: w,
                metrics: u.val_metrics,
                bytes_up: u.bytes_up,
                bytes_down: u.bytes_down,
                interface: u.interface,
                wall_ms: u.wall_ms,
            })
            .collect();
        history.push(RoundRecord {
            round,
            global: next.clone(),
            metrics,
            clients: records,
            server_wall_ms,
        });
        global = next;
    }
    Ok(FederationResult {
        initial,
        initial_metrics,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::checkpoint::encode_checkpoint;
    use crate::data::{generate_dataset, partition, DataConfig};
    use crate::model::ModelDims;

    fn fixture(clients: usize, samples: usize, seed: u64) -> (ToyModel, Vec<ClientData>) {
        let dims = ModelDims::default();
        let model = ToyModel::new(dims, seed).unwrap();
        let mut rs = RandomSource::for_role(seed, StreamRole::Dataset, &[]);
        let ds = generate_dataset(&DataConfig { samples, dims }, &mut rs).unwrap();
        let (_, shards) = partition(&ds, clients, 1.0, seed).unwrap();
        let data = shards
            .iter()
            .map(|s| ClientData::from_shard(&ds, s, 0.0, seed).unwrap())
            .collect();
        (model, data)
    }

    fn small(clients: usize, rounds: usize) -> FederationConfig {
        FederationConfig {
            rounds,
            local_epochs: 1,
            ..FederationConfig::toy(clients, 7)
        }
    }

    fn bits(set: &AdapterSet) -> Vec<u8> {
        encode_checkpoint(set).unwrap()
    }

    #[test]
    fn zero_rounds_keep_initial() {
        let (model, data) = fixture(2, 200, 1);
        let res = run_federation(&model, &data, &small(2, 0)).unwrap();
        assert!(res.history.is_empty());
        assert_eq!(bits(res.final_adapters()), bits(&res.initial));
        assert_eq!(res.final_metrics(), res.initial_metrics);
    }

    #[test]
    fn zero_epochs_return_snapshot() {
        let (model, data) = fixture(2, 200, 2);
        let config = FederationConfig {
            local_epochs: 0,
            ..small(2, 1)
        };
        let task = RoundTask {
            round: 1,
            snapshot: config.initial_adapters(&model).unwrap(),
            seed: config.seed,
        };
        let u = run_client(&task, &data[0], &model, &config).unwrap();
        assert_eq!(bits(&u.adapters), bits(&task.snapshot));
    }

    #[test]
    fn round_zero_task_rejected() {
        let (model, data) = fixture(1, 100, 3);
        let config = small(1, 1);
        let task = RoundTask {
            round: 0,
            snapshot: config.initial_adapters(&model).unwrap(),
            seed: 0,
        };
        assert!(run_client(&task, &data[0], &model, &config).is_err());
    }

    #[test]
    fn single_client_matches_centralized() {
        let (model, data) = fixture(1, 300, 4);
        let config = FederationConfig {
            local_epochs: 2,
            ..small(1, 3)
        };
        let fed = run_federation(&model, &data, &config).unwrap();
        let init = config.initial_adapters(&model).unwrap();
        let central = train_centralized(&model, data[0].train(), &init, &config).unwrap();
        assert_eq!(bits(fed.final_adapters()), bits(&central));
    }

    #[test]
    fn prox_with_zero_mu_is_fedavg() {
        let (model, data) = fixture(3, 300, 5);
        let avg = run_federation(&model, &data, &small(3, 3)).unwrap();
        let prox = FederationConfig {
            aggregator: Aggregator::FedProx,
            prox_mu: 0.0,
            ..small(3, 3)
        };
        let prox = run_federation(&model, &data, &prox).unwrap();
        for (a, p) in avg.history.iter().zip(&prox.history) {
            assert_eq!(bits(&a.global), bits(&p.global));
        }
    }

    #[test]
    fn strong_prox_limits_drift() {
        let (model, data) = fixture(2, 300, 6);
        let snapshot = small(2, 1).initial_adapters(&model).unwrap();
        let drift = |aggregator, prox_mu| {
            let config = FederationConfig {
                aggregator,
                prox_mu,
                local_epochs: 3,
                ..small(2, 1)
            };
            let task = RoundTask {
                round: 1,
                snapshot: snapshot.clone(),
                seed: config.seed,
            };
            let u = run_client(&task, &data[0], &model, &config).unwrap();
            u.adapters.distance(&snapshot).unwrap()
        };
        let free = drift(Aggregator::FedAvg, 0.0);
        let pinned = drift(Aggregator::FedProx, 1e6);
        assert!(pinned < 0.5 * free, "pinned {pinned} free {free}");
        // mu is ignored outside FedProx.
        assert_eq!(drift(Aggregator::FedAvg, 1e6), free);
    }

    #[test]
    fn fedopt_unit_lr_no_momentum_is_fedavg() {
        let (model, data) = fixture(3, 300, 7);
        let avg = run_federation(&model, &data, &small(3, 3)).unwrap();
        let opt = FederationConfig {
            aggregator: Aggregator::FedOpt,
            server_lr: 1.0,
            server_momentum: 0.0,
            ..small(3, 3)
        };
        let opt = run_federation(&model, &data, &opt).unwrap();
        for (a, o) in avg.history.iter().zip(&opt.history) {
            assert!(a.global.distance(&o.global).unwrap() < 1e-9);
            for (x, y) in a.global.flatten_updates().iter().zip(o.global.flatten_updates()) {
                for (p, q) in x.data().iter().zip(y.data()) {
                    assert!((p - q).abs() <= 1e-12, "{p} vs {q}");
                }
            }
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let (model, data) = fixture(4, 400, 8);
        let one = run_federation(&model, &data, &small(4, 2)).unwrap();
        let many = run_federation(
            &model,
            &data,
            &FederationConfig {
                workers: 3,
                ..small(4, 2)
            },
        )
        .unwrap();
        assert_eq!(bits(one.final_adapters()), bits(many.final_adapters()));
        for (a, b) in one.history.iter().zip(&many.history) {
            assert_eq!(a.clients, b.clients);
            assert_eq!(a.metrics, b.metrics);
        }
    }

    #[test]
    fn fusion_weights_by_quality() {
        let config = FederationConfig {
            aggregator: Aggregator::Fusion,
            ..small(2, 1)
        };
        assert!(config.uses_quality_weighting());
        assert!(!small(2, 1).uses_quality_weighting());
    }

    #[test]
    fn weights_recorded_per_client() {
        let (model, data) = fixture(3, 300, 9);
        let res = run_federation(&model, &data, &small(3, 1)).unwrap();
        let r = &res.history[0];
        let total: usize = r.clients.iter().map(|c| c.n_k).sum();
        for c in &r.clients {
            assert!((c.weight - c.n_k as f64 / total as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn shard_mismatches_rejected() {
        let (model, mut data) = fixture(2, 200, 10);
        assert!(matches!(run_federation(&model, &data, &small(3, 1)), Err(Error::Config(_))));
        data.swap(0, 1);
        assert!(matches!(run_federation(&model, &data, &small(2, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn aggregator_names_round_trip() {
        for a in [Aggregator::FedAvg, Aggregator::Fusion, Aggregator::FedProx, Aggregator::FedOpt] {
            assert_eq!(a.as_str().parse::<Aggregator>().unwrap(), a);
        }
        assert!("fedsgd".parse::<Aggregator>().is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            FederationConfig { batch_size: 0, ..small(2, 1) },
            FederationConfig { workers: 0, ..small(2, 1) },
            FederationConfig { prox_mu: -1.0, ..small(2, 1) },
            FederationConfig { server_momentum: 1.0, ..small(2, 1) },
            FederationConfig { lora_alpha: 0.0, ..small(2, 1) },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
