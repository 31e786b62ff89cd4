//! A small autoregressive transformer with hand-written backpropagation,
//! the DPO objective with evidence supervision, and per-token gradient
//! analysis of preference pairs.
//!
//! Everything is generic over the scalar type; gradient checks and gradient
//! profiles run in `f64`.

mod checkpoint;
mod dpo;
mod model;
mod profile;
mod train;
mod vocab;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use dpo::{
    dpo_loss, dpo_loss_grad, encode_pair, evidence_loss, evidence_loss_grad, finite_difference_check, total_loss, total_loss_grad, DpoConfig,
    EncodedCitation, EncodedPair, FdReport,
};
pub use model::{logprob, Cache, ToyModel, ToyModelConfig, MAX_PARAMS};
pub use profile::{per_token_gradient_profile, profile_pair, random_control_pair, summarize, GradientProfile, ProfileSummary, RatioStats};
pub use train::{preference_accuracy, train, Adam, TrainConfig, TrainReport};
pub use vocab::{model_tokens, Vocab, BOS, CITE, QUOTE, SEP, UNK};

pub trait Scalar: Float + FromPrimitive + NumAssign + Sum + Debug + Default + Send + Sync + 'static {}

impl<T> Scalar for T where T: Float + FromPrimitive + NumAssign + Sum + Debug + Default + Send + Sync + 'static {}

#[inline]
pub(crate) fn c<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("representable constant")
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ToyError {
    #[error("sequence of {len} tokens exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("evidence loss needs at least one citation")]
    EmptyEvidence,
    #[error("no preference pairs to train on")]
    EmptyTrainingSet,
    #[error("training diverged: loss {loss} above 10x the initial {initial} for 3 consecutive epochs (epoch {epoch})")]
    DivergenceDetected { epoch: usize, loss: f64, initial: f64 },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("pair has no perturbed positions")]
    NoPositions,
}
