//! Experiment harness: corpus ingestion, deterministic training runs,
//! checkpointing with decay fork-off, stage-keyed data mixtures, sweeps,
//! quantized exports, and report emission.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod quantize;
pub mod report;
pub mod run;
pub mod sweep;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run fault: {0}")]
    RunFault(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Fit(#[from] tinylab_core::scaling::FitError),
    #[error(transparent)]
    Schedule(#[from] tinylab_core::schedule::ScheduleError),
    #[error("{0}")]
    Model(String),
    #[error("report error: {0}")]
    Report(String),
}

impl From<tinylab_core::model::ModelError> for HarnessError {
    fn from(e: tinylab_core::model::ModelError) -> Self {
        HarnessError::Model(e.to_string())
    }
}

impl From<tinylab_core::optim::OptimError> for HarnessError {
    fn from(e: tinylab_core::optim::OptimError) -> Self {
        HarnessError::RunFault(e.to_string())
    }
}

impl From<tinylab_core::quant::QuantError> for HarnessError {
    fn from(e: tinylab_core::quant::QuantError) -> Self {
        HarnessError::Model(e.to_string())
    }
}

impl From<tinylab_core::bpe::BpeError> for HarnessError {
    fn from(e: tinylab_core::bpe::BpeError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

/// Process exit code classes: 0 ok, 1 usage, 2 run fault, 3 fit failure.
pub fn exit_code_for(err: &HarnessError) -> i32 {
    match err {
        HarnessError::Config(_) => 1,
        HarnessError::RunFault(_) | HarnessError::Io(_) => 2,
        HarnessError::Fit(_) => 3,
        HarnessError::Schedule(_) | HarnessError::Model(_) | HarnessError::Report(_) => 2,
    }
}

/// splitmix64; used to derive independent stream seeds from the run seed.
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
