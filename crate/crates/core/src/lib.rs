//! Fundus-image biological-trait lab: age/gender estimation (FAG-Net),
//! age-conditioned fundus generation (FGC-Net), their losses and metrics,
//! a deterministic synthetic-fundus generator for desk-scale testing, and
//! a training/evaluation/reporting pipeline around them.

pub mod cli;
pub mod dataio;
pub mod config;
pub mod error;
pub mod fagnet;
pub mod fgcnet;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod reports;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
