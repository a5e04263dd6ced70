//! Continual source-free domain adaptation with pruning-derived parameter
//! masks, per-domain batch-norm banks and batch-statistic routing.
//!
//! A source model is trained, pruned by weight magnitude and fine-tuned.
//! Each later domain adapts only the unclaimed weights with an
//! information-maximization loss, claims a further slice of them, and
//! stores its batch-norm state. Earlier domains are reproduced exactly by
//! applying their mask and batch-norm entry.

pub mod bn_bank;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod mask_ledger;
pub mod metrics;
pub mod network;
pub mod router;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
