//! Adapter-only federated learning for a small unified multimodal model.
//!
//! Clients fine-tune low-rank adapters over a frozen network on
//! Dirichlet-partitioned synthetic data; the server aggregates only the
//! adapters. The crate also covers a device/edge split execution mode,
//! communication accounting, checkpoints and experiment sweeps.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod bench;
pub mod data;
pub mod error;
pub mod federation;
pub mod model;
pub mod optim;
pub mod rng;
pub mod split;
pub mod tensor;

pub use adapter::{AdapterSet, LayerRegistry, LoraAdapter, Modality};
pub use error::{CheckpointError, Error, Result};
pub use model::{Batch, LossBreakdown, ModelDims, ToyModel};
pub use rng::RandomSource;
pub use tensor::ParamTensor;
