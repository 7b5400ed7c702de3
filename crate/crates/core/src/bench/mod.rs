//! Communication ledger, cost arithmetic, experiment configuration,
//! checkpoints and sweeps.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod ledger;
pub mod runner;
pub mod sweep;

pub use checkpoint::payload_bytes;
