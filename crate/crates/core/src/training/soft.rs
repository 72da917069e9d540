use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{batch_shape, dropout_masks, Example, TrainError};
use crate::decoder::{CaptionGraph, CaptionGraphKey, CaptionInputs, DecoderParams, Mode, BOS};
use crate::graphcore::{backward, evaluate, Bindings, GradientMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftLossConfig {
    /// Weight of the doubly stochastic penalty.
    pub lambda_penalty: f64,
    pub dropout_rate: f64,
}

impl Default for SoftLossConfig {
    fn default() -> Self {
        Self {
            lambda_penalty: 1.0,
            dropout_rate: 0.5,
        }
    }
}

impl SoftLossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lambda_penalty >= 0.0 && self.lambda_penalty.is_finite()) {
            return Err(TrainError::Config(format!(
                "lambda_penalty must be >= 0, got {}",
                self.lambda_penalty
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(TrainError::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Batch means of attention diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AttentionStats {
    /// `sum_i (1 - sum_t alpha_ti)^2`
    pub penalty: f64,
    pub beta: f64,
    /// Largest weight per step, averaged over steps.
    pub peak_alpha: f64,
}

#[derive(Clone, Debug)]
pub struct SoftLossOutput {
    /// Batch mean of `nll + lambda * penalty`.
    pub loss: f64,
    pub nll: f64,
    pub grads: GradientMap,
    pub stats: AttentionStats,
}

/// Penalised negative log-likelihood of a same-length batch, with its
/// gradient. `rng` drives the dropout masks only.
pub fn soft_loss<R: Rng + ?Sized>(
    batch: &[Example<'_>],
    params: &DecoderParams,
    config: &SoftLossConfig,
    rng: &mut R,
) -> Result<SoftLossOutput, TrainError> {
    config.validate()?;
    let (length, locations) = batch_shape(batch)?;
    let dims = params.dims();
    let key = CaptionGraphKey {
        mode: Mode::Soft,
        length,
        locations,
        dropout: config.dropout_rate > 0.0,
    };
    let cg = CaptionGraph::build(dims, key)?;
    let loss_node = cg.loss.expect("soft graph has a loss");
    let penalty_node = cg.penalty.expect("soft graph has a penalty");
    let names: Vec<&str> = params.names().collect();
    let lambda = Tensor::scalar(config.lambda_penalty);

    let mut grads = params.zero_gradients();
    let mut out = SoftLossOutput {
        loss: 0.0,
        nll: 0.0,
        grads: GradientMap::new(),
        stats: AttentionStats::default(),
    };
    let share = 1.0 / batch.len() as f64;
    for ex in batch {
        let mut inputs = CaptionInputs::new(ex.caption.tokens(), dims.vocab, BOS)?;
        inputs.lambda = lambda.clone();
        if key.dropout {
            inputs.dropout = dropout_masks(length, dims.hidden, config.dropout_rate, rng);
        }
        let mut b = Bindings::new();
        params.bind(&mut b);
        b.bind(crate::decoder::graphs::GRID, ex.grid.tensor());
        inputs.bind(&mut b);
        let ev = evaluate(&cg.graph, &b)?;
        let g = backward(&cg.graph, &ev, loss_node, &names)?;
        grads.accumulate(&g, share);
        out.loss += share * ev.scalar(loss_node);
        out.nll += share * ev.scalar(cg.nll);
        out.stats.penalty += share * ev.scalar(penalty_node);
        let steps = length as f64;
        for (&a, &beta) in cg.alphas.iter().zip(&cg.betas) {
            out.stats.beta += share * ev.scalar(beta) / steps;
            out.stats.peak_alpha += share * ev.value(a).max_abs() / steps;
        }
    }
    out.grads = grads;
    Ok(out)
}
