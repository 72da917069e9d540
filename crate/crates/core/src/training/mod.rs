//! Learning rules for both attention variants, optimizers, length-bucketed
//! batching and the early-stopping training loop.
//!
//! Gradient sign conventions: [`soft_loss`] returns gradients of a loss to
//! be minimised, while the hard-attention estimators return gradients of
//! the lower bound `L_s`, which is maximised. The trainer negates the
//! latter before handing them to the optimizer.

mod batching;
mod hard;
mod optim;
mod soft;
mod trainer;

use thiserror::Error;

use crate::attention::AnnotationGrid;
use crate::decoder::{CaptionSequence, DecoderError};
use crate::graphcore::GraphError;

pub use batching::bucket_batches;
pub use hard::{
    exact_hard_objective, hard_gradient_estimate, hard_sample_gradient, BaselineState, ExactObjective,
    GradientEstimate, HardLossConfig, HardSampler, SampleEstimate, MAX_ENUMERATION,
};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState};
pub use soft::{soft_loss, AttentionStats, SoftLossConfig, SoftLossOutput};
pub use trainer::{train, validation_bleu, EarlyStopping, EpochMetrics, StopDecision, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch mixes caption lengths {0} and {1}")]
    MixedLengths(usize, usize),
    #[error("batch mixes grids with {0} and {1} locations")]
    MixedLocations(usize, usize),
    #[error("enumeration over {0} location sequences exceeds the limit of {MAX_ENUMERATION}")]
    TooLarge(u128),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("gradient for `{param}` does not match its shape")]
    GradientShape { param: String },
    #[error("non-finite value in parameter block `{0}`")]
    NonFinite(String),
    #[error("loss became non-finite at node {node}; largest parameter block is `{block}` (max |w| = {magnitude:.3e})")]
    Diverged {
        node: String,
        block: String,
        magnitude: f64,
    },
    #[error("validation set is empty")]
    EmptyValidation,
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// One training pair, borrowed from wherever the corpus lives.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub grid: &'a AnnotationGrid,
    pub caption: &'a CaptionSequence,
}

/// Common caption length and grid size of a batch.
pub(crate) fn batch_shape(batch: &[Example<'_>]) -> Result<(usize, usize), TrainError> {
    let first = batch.first().ok_or(TrainError::EmptyBatch)?;
    let (len, locs) = (first.caption.len(), first.grid.locations());
    for ex in batch {
        if ex.caption.len() != len {
            return Err(TrainError::MixedLengths(len, ex.caption.len()));
        }
        if ex.grid.locations() != locs {
            return Err(TrainError::MixedLocations(locs, ex.grid.locations()));
        }
    }
    Ok((len, locs))
}

/// Inverted-dropout masks: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub(crate) fn dropout_masks<R: rand::Rng + ?Sized>(
    steps: usize,
    hidden: usize,
    rate: f64,
    rng: &mut R,
) -> Vec<crate::graphcore::Tensor> {
    let keep = 1.0 / (1.0 - rate);
    (0..steps)
        .map(|_| {
            crate::graphcore::Tensor::vector(
                (0..hidden)
                    .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                    .collect(),
            )
        })
        .collect()
}
