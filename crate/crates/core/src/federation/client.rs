//! Client-side local training.

use crate::adapter::AdapterSet;
use crate::bench::checkpoint::payload_bytes;
use crate::data::{modality_shift, ClientShard, SyntheticDataset};
use crate::error::{Error, Result};
use crate::model::{evaluate, loss_and_grads, Batch, ToyModel};
use crate::optim::{local_step, OptState, OptimizerConfig};
use crate::rng::StreamRole;
use crate::split::{split_loss_and_grads, InterfaceTraffic, SplitPlan};

use super::{ClientUpdate, FederationConfig, RoundTask};

/// One client's local data, with any modality shift already applied.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub client_id: usize,
    train: Batch,
    validation: Option<Batch>,
}

impl ClientData {
    pub fn new(client_id: usize, train: Batch, validation: Option<Batch>) -> Self {
        Self {
            client_id,
            train,
            validation,
        }
    }

    /// Gathers a shard's rows and shifts its vision inputs by the client's
    /// affine perturbation.
    pub fn from_shard(dataset: &SyntheticDataset, shard: &ClientShard, shift_strength: f64, seed: u64) -> Result<Self> {
        if shard.train.is_empty() {
            return Err(Error::InvalidArgument(format!("client {} has an empty train split", shard.client_id)));
        }
        let dims = dataset.dims();
        let shifted = |rows: &[usize]| -> Result<Batch> {
            let b = dataset.batch(rows)?;
            let vision = modality_shift(b.vision(), dims.d_v, shard.client_id, shift_strength, seed)?;
            Batch::new(&dims, vision, b.text().to_vec(), b.labels().to_vec(), b.targets().to_vec())
        };
        let validation = if shard.validation.is_empty() {
            None
        } else {
            Some(shifted(&shard.validation)?)
        };
        Ok(Self::new(shard.client_id, shifted(&shard.train)?, validation))
    }

    pub fn n_k(&self) -> usize {
        self.train.len()
    }

    pub fn train(&self) -> &Batch {
        &self.train
    }

    pub fn validation(&self) -> Option<&Batch> {
        self.validation.as_ref()
    }

    /// Validation rows, or training rows when the shard is too small to
    /// hold any out.
    pub fn eval_batch(&self) -> &Batch {
        self.validation.as_ref().unwrap_or(&self.train)
    }
}

/// `E` epochs of shuffled mini-batch training for one client in one round.
///
/// The optimizer state starts fresh every round. The cosine schedule spans
/// the whole run (`rounds · E · steps_per_epoch` steps for this client) and
/// round `t` starts at offset `(t − 1) · E · steps_per_epoch`.
fn train_round(
    model: &ToyModel,
    theta: &mut AdapterSet,
    data: &Batch,
    round: usize,
    client_id: usize,
    seed: u64,
    config: &FederationConfig,
) -> Result<InterfaceTraffic> {
    let task = RoundTask {
        round,
        snapshot: theta.clone(),
        seed,
    };
    let n = data.len();
    let b = config.batch_size;
    let steps_per_epoch = n.div_ceil(b) as u64;
    let epochs = config.local_epochs as u64;
    let optimizer = OptimizerConfig {
        cosine_total_steps: config
            .cosine_schedule
            .then_some(config.rounds as u64 * epochs * steps_per_epoch),
        ..config.optimizer
    };
    let mut state = OptState::new((round as u64 - 1) * epochs * steps_per_epoch);
    let dims = model.dims();
    let plan = SplitPlan::toy();
    let mut traffic = InterfaceTraffic::default();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        task.client_stream(StreamRole::Shuffle, client_id, &[epoch]).shuffle(&mut order);
        let mut noise = task.client_stream(StreamRole::SplitNoise, client_id, &[epoch]);
        for rows in order.chunks(b) {
            let batch = data.select(&dims, rows)?;
            let mut grads = match &config.split {
                None => loss_and_grads(model, theta, &batch, config.loss_weights)?.1,
                Some(policy) => {
                    let (_, g, t) =
                        split_loss_and_grads(model, theta, &batch, config.loss_weights, &plan, policy, &mut noise)?;
                    traffic.forward_bytes += t.forward_bytes;
                    traffic.backward_bytes += t.backward_bytes;
                    g
                }
            };
            if let Some(mu) = config.proximal_mu() {
                let mut drift = theta.clone();
                drift.add_scaled(-1.0, &task.snapshot)?;
                grads.add_scaled(mu, &drift)?;
            }
            local_step(theta, &grads, &mut state, &optimizer)?;
        }
    }
    Ok(traffic)
}

pub fn run_client(task: &RoundTask, data: &ClientData, model: &ToyModel, config: &FederationConfig) -> Result<ClientUpdate> {
    let start = config.wall_clock.then(std::time::Instant::now);
    if data.n_k() == 0 {
        return Err(Error::InvalidArgument(format!("client {} has no training data", data.client_id)));
    }
    if !task.snapshot.matches_registry(model.registry()) {
        return Err(Error::Shape("round snapshot does not match the model registry".into()));
    }
    if task.round == 0 {
        return Err(Error::InvalidArgument("rounds are numbered from 1".into()));
    }
    let mut theta = task.snapshot.clone();
    let interface = train_round(model, &mut theta, data.train(), task.round, data.client_id, task.seed, config)?;
    let val_metrics = evaluate(model, &theta, data.eval_batch(), config.loss_weights)?;
    Ok(ClientUpdate {
        client_id: data.client_id,
        n_k: data.n_k(),
        val_score: val_metrics.accuracy,
        val_metrics,
        bytes_up: payload_bytes(&theta),
        bytes_down: payload_bytes(&task.snapshot),
        adapters: theta,
        interface,
        wall_ms: start.map_or(0, |s| s.elapsed().as_millis() as u64),
    })
}

/// Single-site training on `data` for `rounds · E` epochs under the same
/// seeding and optimizer-reset discipline a lone federated client sees.
pub fn train_centralized(
    model: &ToyModel,
    data: &Batch,
    init: &AdapterSet,
    config: &FederationConfig,
) -> Result<AdapterSet> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("centralized training needs data".into()));
    }
    let mut theta = init.clone();
    for round in 1..=config.rounds {
        train_round(model, &mut theta, data, round, 0, config.seed, config)?;
    }
    Ok(theta)
}
