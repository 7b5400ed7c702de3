//! Experiment configuration files.
//!
//! A config is TOML whose keys are read as dotted paths
//! (`federation.clients`, `model.dims.h`, ...). Every key is optional and
//! falls back to the toy preset; unknown keys and ill-typed values are
//! rejected. `federation.clients`, `data.dirichlet_alpha` and `seed` may be
//! lists, which makes the file a sweep grid.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::federation::{Aggregator, FederationConfig, QUALITY_EPSILON};
use crate::model::{LossWeights, ModelDims};
use crate::optim::OptimizerConfig;
use crate::rng::derive_stream;
use crate::split::InterfacePolicy;

pub const KNOWN_KEYS: [&str; 28] = [
    "federation.clients",
    "federation.rounds",
    "federation.local_epochs",
    "federation.aggregator",
    "federation.prox_mu",
    "federation.server_lr",
    "federation.server_momentum",
    "federation.quality_weighting",
    "data.samples",
    "data.classes",
    "data.dirichlet_alpha",
    "data.modality_shift",
    "model.dims.d_v",
    "model.dims.d_t",
    "model.dims.h",
    "model.dims.C",
    "model.dims.d_g",
    "model.lora_rank",
    "model.lora_alpha",
    "opt.lr",
    "opt.weight_decay",
    "opt.batch_size",
    "opt.cosine_schedule",
    "split.enabled",
    "privacy.sigma",
    "compress.topk",
    "compress.bits",
    "seed",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub clients: Vec<usize>,
    pub rounds: usize,
    pub local_epochs: usize,
    pub aggregator: Aggregator,
    pub prox_mu: f64,
    pub server_lr: f64,
    pub server_momentum: f64,
    pub quality_weighting: bool,
    pub samples: usize,
    pub dirichlet_alpha: Vec<f64>,
    pub modality_shift: f64,
    pub dims: ModelDims,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub cosine_schedule: bool,
    pub split_enabled: bool,
    pub privacy_sigma: f64,
    pub compress_topk: f64,
    pub compress_bits: u32,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let fed = FederationConfig::toy(4, 0);
        Self {
            clients: vec![fed.clients],
            rounds: fed.rounds,
            local_epochs: fed.local_epochs,
            aggregator: fed.aggregator,
            prox_mu: fed.prox_mu,
            server_lr: fed.server_lr,
            server_momentum: fed.server_momentum,
            quality_weighting: fed.quality_weighting,
            samples: 20_000,
            dirichlet_alpha: vec![1.0],
            modality_shift: 0.0,
            dims: ModelDims::default(),
            lora_rank: fed.lora_rank,
            lora_alpha: fed.lora_alpha,
            lr: fed.optimizer.lr,
            weight_decay: fed.optimizer.weight_decay,
            batch_size: fed.batch_size,
            cosine_schedule: fed.cosine_schedule,
            split_enabled: false,
            privacy_sigma: 0.0,
            compress_topk: 1.0,
            compress_bits: 0,
            seeds: vec![0],
        }
    }
}

/// One point of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub clients: usize,
    pub dirichlet_alpha: f64,
    pub seed_index: usize,
    /// Derived from the listed seed and the cell coordinates.
    pub seed: u64,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("K{}_alpha{}_seed{}", self.clients, self.dirichlet_alpha, self.seed_index)
    }
}

/// Seed of a sweep cell: a hash of the listed seed and the coordinates.
pub fn cell_seed(run_seed: u64, clients: usize, alpha: f64, seed_index: usize) -> u64 {
    derive_stream(&[run_seed, clients as u64, alpha.to_bits(), seed_index as u64])
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn type_error(key: &str, expected: &str, v: &toml::Value) -> Error {
    Error::Config(format!("{key}: expected {expected}, found {} ({v})", v.type_str()))
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => {
            usize::try_from(*i).map_err(|_| Error::Config(format!("{key}: {i} is too large")))
        }
        toml::Value::Integer(i) => Err(Error::Config(format!("{key}: must be >= 0, found {i}"))),
        _ => Err(type_error(key, "a non-negative integer", v)),
    }
}

fn as_u64(key: &str, v: &toml::Value) -> Result<u64> {
    as_usize(key, v).map(|x| x as u64)
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    let x = match v {
        toml::Value::Float(f) => *f,
        toml::Value::Integer(i) => *i as f64,
        _ => return Err(type_error(key, "a number", v)),
    };
    if !x.is_finite() {
        return Err(Error::Config(format!("{key}: must be finite, found {x}")));
    }
    Ok(x)
}

fn as_bool(key: &str, v: &toml::Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| type_error(key, "a boolean", v))
}

fn list_of<T>(key: &str, v: &toml::Value, item: impl Fn(&str, &toml::Value) -> Result<T>) -> Result<Vec<T>> {
    match v {
        toml::Value::Array(items) => {
            if items.is_empty() {
                return Err(Error::Config(format!("{key}: list must not be empty")));
            }
            items.iter().map(|x| item(key, x)).collect()
        }
        single => Ok(vec![item(key, single)?]),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        let mut cfg = Self::default();
        let mut classes = None;
        let mut dims_classes = None;
        for (key, v) in &flat {
            let k = key.as_str();
            match k {
                "federation.clients" => cfg.clients = list_of(k, v, as_usize)?,
                "federation.rounds" => cfg.rounds = as_usize(k, v)?,
                "federation.local_epochs" => cfg.local_epochs = as_usize(k, v)?,
                "federation.aggregator" => {
                    cfg.aggregator = v.as_str().ok_or_else(|| type_error(k, "a string", v))?.parse()?
                }
                "federation.prox_mu" => cfg.prox_mu = as_f64(k, v)?,
                "federation.server_lr" => cfg.server_lr = as_f64(k, v)?,
                "federation.server_momentum" => cfg.server_momentum = as_f64(k, v)?,
                "federation.quality_weighting" => cfg.quality_weighting = as_bool(k, v)?,
                "data.samples" => cfg.samples = as_usize(k, v)?,
                "data.classes" => classes = Some(as_usize(k, v)?),
                "data.dirichlet_alpha" => cfg.dirichlet_alpha = list_of(k, v, as_f64)?,
                "data.modality_shift" => cfg.modality_shift = as_f64(k, v)?,
                "model.dims.d_v" => cfg.dims.d_v = as_usize(k, v)?,
                "model.dims.d_t" => cfg.dims.d_t = as_usize(k, v)?,
                "model.dims.h" => cfg.dims.h = as_usize(k, v)?,
                "model.dims.C" => dims_classes = Some(as_usize(k, v)?),
                "model.dims.d_g" => cfg.dims.d_g = as_usize(k, v)?,
                "model.lora_rank" => cfg.lora_rank = as_usize(k, v)?,
                "model.lora_alpha" => cfg.lora_alpha = as_f64(k, v)?,
                "opt.lr" => cfg.lr = as_f64(k, v)?,
                "opt.weight_decay" => cfg.weight_decay = as_f64(k, v)?,
                "opt.batch_size" => cfg.batch_size = as_usize(k, v)?,
                "opt.cosine_schedule" => cfg.cosine_schedule = as_bool(k, v)?,
                "split.enabled" => cfg.split_enabled = as_bool(k, v)?,
                "privacy.sigma" => cfg.privacy_sigma = as_f64(k, v)?,
                "compress.topk" => cfg.compress_topk = as_f64(k, v)?,
                "compress.bits" => {
                    cfg.compress_bits = u32::try_from(as_usize(k, v)?)
                        .map_err(|_| Error::Config(format!("{k}: out of range")))?
                }
                "seed" => cfg.seeds = list_of(k, v, as_u64)?,
                _ => {
                    return Err(Error::Config(format!(
                        "unknown key {key:?}; known keys: {}",
                        KNOWN_KEYS.join(", ")
                    )))
                }
            }
        }
        match (classes, dims_classes) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!("data.classes = {a} disagrees with model.dims.C = {b}")))
            }
            (Some(c), _) | (None, Some(c)) => cfg.dims.classes = c,
            (None, None) => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.clients.contains(&0) {
            return fail("federation.clients: every entry must be >= 1".into());
        }
        if self.rounds == 0 {
            return fail("federation.rounds must be >= 1".into());
        }
        if self.samples == 0 {
            return fail("data.samples must be >= 1".into());
        }
        if let Some(&k) = self.clients.iter().find(|&&k| k > self.samples) {
            return fail(format!("federation.clients = {k} exceeds data.samples = {}", self.samples));
        }
        if self.dirichlet_alpha.iter().any(|a| !(*a > 0.0)) {
            return fail("data.dirichlet_alpha: every entry must be > 0".into());
        }
        if !(self.modality_shift >= 0.0) {
            return fail("data.modality_shift must be >= 0".into());
        }
        self.dims.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.lora_rank == 0 {
            return fail("model.lora_rank must be >= 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return fail("opt.weight_decay must be >= 0".into());
        }
        self.interface_policy_unchecked()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        for &k in &self.clients {
            self.federation_config(k, 0, 1, false)
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn interface_policy_unchecked(&self) -> InterfacePolicy {
        InterfacePolicy {
            noise_sigma: self.privacy_sigma,
            topk_fraction: self.compress_topk,
            quant_bits: self.compress_bits,
        }
    }

    /// Interface policy when split execution is enabled.
    pub fn interface_policy(&self) -> Option<InterfacePolicy> {
        self.split_enabled.then(|| self.interface_policy_unchecked())
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            samples: self.samples,
            dims: self.dims,
        }
    }

    pub fn federation_config(&self, clients: usize, seed: u64, workers: usize, wall_clock: bool) -> FederationConfig {
        FederationConfig {
            clients,
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            aggregator: self.aggregator,
            prox_mu: self.prox_mu,
            server_lr: self.server_lr,
            server_momentum: self.server_momentum,
            quality_weighting: self.quality_weighting,
            quality_epsilon: QUALITY_EPSILON,
            seed,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            optimizer: OptimizerConfig::adamw(self.lr, self.weight_decay),
            cosine_schedule: self.cosine_schedule,
            loss_weights: LossWeights::default(),
            split: self.interface_policy(),
            workers,
            wall_clock,
        }
    }

    pub fn is_single(&self) -> bool {
        self.clients.len() == 1 && self.dirichlet_alpha.len() == 1 && self.seeds.len() == 1
    }

    /// The single `(clients, alpha, seed)` of a non-sweep config.
    pub fn single(&self) -> Result<(usize, f64, u64)> {
        if !self.is_single() {
            return Err(Error::Config(
                "federation.clients, data.dirichlet_alpha and seed must be single values for a run".into(),
            ));
        }
        Ok((self.clients[0], self.dirichlet_alpha[0], self.seeds[0]))
    }

    /// Grid cells in (clients, alpha, seed) order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &clients in &self.clients {
            for &alpha in &self.dirichlet_alpha {
                for (seed_index, &s) in self.seeds.iter().enumerate() {
                    out.push(Cell {
                        clients,
                        dirichlet_alpha: alpha,
                        seed_index,
                        seed: cell_seed(s, clients, alpha, seed_index),
                    });
                }
            }
        }
        out
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn checksum(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex_digest(&json)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
