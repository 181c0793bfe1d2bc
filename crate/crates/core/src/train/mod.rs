//! Model assembly, optimisation, checkpoints and evaluation.

mod adam;
mod checkpoint;
mod config;
mod evaluate;
mod gradchecks;
mod model;
mod trainer;
mod warm;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, Counters, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{GrammarSizes, TrainConfig};
pub use gradchecks::{gradcheck_suite, length3_batch, GradcheckEntry, FD_STEP};
pub use evaluate::{evaluate, parse_instances, score_pair, EvalOptions, ParsedInstance};
pub use model::{BatchOutput, JointModel, Noise};
pub use trainer::{EpochRecord, StepRecord, Trainer};
pub use warm::{kmeans, KMeans, WarmStart};

use crate::chart::ChartError;
use crate::encoders::EncoderError;
use crate::eval::EvalError;
use crate::grounding::GroundingError;
use crate::pcfg::PcfgError;
use crate::synth::SynthError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step} (instances {ids:?})")]
    NonFinite {
        epoch: usize,
        step: u64,
        ids: Vec<String>,
    },
    #[error("dataset: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found}, this build reads {supported}")]
    Version { found: u32, supported: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Chart(#[from] ChartError),
    #[error(transparent)]
    Pcfg(#[from] PcfgError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// What a derived random stream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Noise = 3,
    WarmStart = 4,
}

/// Independent generator for `(seed, purpose, a, b)`. All randomness in
/// training comes from here, so the counters are the whole RNG state.
pub fn derived_rng(seed: u64, purpose: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
