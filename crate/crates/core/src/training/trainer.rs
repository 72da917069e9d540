use std::fmt;
use std::ops::ControlFlow;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    bucket_batches, hard_gradient_estimate, optimizer_step, soft_loss, BaselineState, Example, HardLossConfig,
    OptimizerConfig, OptimizerState, SoftLossConfig, TrainError,
};
use crate::decoder::{generate, ContextMode, DecoderError, DecoderParams, Mode, Strategy};
use crate::evalviz::bleu;
use crate::graphcore::GraphError;

/// Recasts a non-finite forward value as divergence, naming the parameter
/// block with the largest magnitude.
fn diverged(e: TrainError, params: &DecoderParams) -> TrainError {
    let node = match &e {
        TrainError::Graph(GraphError::NonFinite(n)) => n.clone(),
        TrainError::Decoder(DecoderError::Graph(GraphError::NonFinite(n))) => n.clone(),
        _ => return e,
    };
    let (block, magnitude) = params.iter().map(|(name, t)| (name.clone(), t.max_abs())).fold(
        (String::new(), f64::NEG_INFINITY),
        |best, cur| if cur.1 > best.1 { cur } else { best },
    );
    TrainError::Diverged { node, block, magnitude }
}

/// Everything the training loop needs besides data and initial parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub soft: SoftLossConfig,
    pub hard: HardLossConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm threshold.
    pub clip_norm: f64,
    /// Token limit for validation decoding.
    pub max_decode_len: usize,
    /// Stop starting new epochs once this much wall time has passed.
    pub time_limit_secs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Soft,
            soft: SoftLossConfig::default(),
            hard: HardLossConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 64,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            clip_norm: 5.0,
            max_decode_len: 20,
            time_limit_secs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.soft.validate()?;
        self.hard.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 || self.max_decode_len == 0 {
            return Err(TrainError::Config(
                "batch_size, max_epochs and max_decode_len must be at least 1".into(),
            ));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(TrainError::Config(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mode: Mode,
    /// Mean training loss: penalised NLL (soft) or negated mean sampled
    /// log-likelihood (hard).
    pub loss: f64,
    /// Validation BLEU-1..4 under greedy decoding.
    pub bleu: [f64; 4],
    /// Baseline at the end of the epoch; hard mode only.
    pub baseline: Option<f64>,
    /// Mean pre-clipping gradient norm.
    pub grad_norm: f64,
    pub wall_ms: u128,
}

impl fmt::Display for EpochMetrics {
    /// `epoch=3 mode=soft loss=... bleu1=... bleu2=... bleu3=... bleu4=... baseline=... grad_norm=... wall_ms=...`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            Mode::Soft => "soft",
            Mode::Hard => "hard",
        };
        write!(f, "epoch={} mode={mode} loss={:.6}", self.epoch, self.loss)?;
        for (i, b) in self.bleu.iter().enumerate() {
            write!(f, " bleu{}={b:.6}", i + 1)?;
        }
        match self.baseline {
            Some(b) => write!(f, " baseline={b:.6}")?,
            None => write!(f, " baseline=none")?,
        }
        write!(f, " grad_norm={:.6} wall_ms={}", self.grad_norm, self.wall_ms)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience bookkeeping. The first observation always counts as an
/// improvement; training stops once `patience` consecutive epochs have
/// passed without one, so a patience of 0 stops after the first epoch.
#[derive(Clone, Debug)]
pub struct EarlyStopping<S> {
    patience: usize,
    best: Option<(usize, S)>,
    stale: usize,
}

impl<S: PartialOrd + Copy> EarlyStopping<S> {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: S) -> (StopDecision, bool) {
        let improved = self.best.is_none_or(|(_, b)| score > b);
        if improved {
            self.best = Some((epoch, score));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        let stop = self.stale >= self.patience;
        let decision = match (stop, improved) {
            (true, _) => StopDecision::Stop,
            (false, true) => StopDecision::Improved,
            (false, false) => StopDecision::Continue,
        };
        (decision, improved)
    }

    pub fn best(&self) -> Option<(usize, S)> {
        self.best
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation score.
    pub params: DecoderParams,
    pub best_epoch: usize,
    pub log: Vec<EpochMetrics>,
}

/// Greedy-decoding BLEU-1..4 of `params` on `validation`.
pub fn validation_bleu(
    params: &DecoderParams,
    validation: &[Example<'_>],
    mode: Mode,
    max_len: usize,
) -> Result<[f64; 4], TrainError> {
    if validation.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    // greedy decoding with argmax attention never touches the rng
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let context = ContextMode::for_mode(mode, false);
    let mut candidates = Vec::with_capacity(validation.len());
    let mut references = Vec::with_capacity(validation.len());
    for ex in validation {
        let (caption, _) = generate(ex.grid, params, context, Strategy::Greedy, max_len, &mut rng)?;
        candidates.push(caption.words().to_vec());
        references.push(vec![ex.caption.words().to_vec()]);
    }
    let report = bleu(&candidates, &references, 4).expect("validation set is non-empty");
    Ok([report.bleu(1), report.bleu(2), report.bleu(3), report.bleu(4)])
}

/// Trains with length-bucketed mini-batches, scoring greedy BLEU on
/// `validation` after every epoch and keeping the best parameters (by
/// BLEU-4, ties broken by BLEU-1). `observer` sees each epoch's metrics
/// as soon as they are known and may end training by returning `Break`.
pub fn train(
    corpus: &[Example<'_>],
    params: DecoderParams,
    validation: &[Example<'_>],
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochMetrics) -> ControlFlow<()>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if validation.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    if corpus.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lengths: Vec<usize> = corpus.iter().map(|e| e.caption.len()).collect();
    let mut params = params;
    let mut opt = OptimizerState::new(config.optimizer, &params);
    let mut baseline = BaselineState::default();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = params.clone();
    let mut log = Vec::new();

    for epoch in 1..=config.max_epochs {
        let epoch_start = Instant::now();
        let batches = bucket_batches(&lengths, config.batch_size, &mut rng);
        let (mut loss_sum, mut norm_sum) = (0.0, 0.0);
        for idx in &batches {
            let batch: Vec<Example<'_>> = idx.iter().map(|&i| corpus[i]).collect();
            let (loss, mut grads) = match config.mode {
                Mode::Soft => {
                    let out = soft_loss(&batch, &params, &config.soft, &mut rng).map_err(|e| diverged(e, &params))?;
                    (out.loss, out.grads)
                }
                Mode::Hard => {
                    let (est, next) = hard_gradient_estimate(&batch, &params, &config.hard, baseline, &mut rng)
                        .map_err(|e| diverged(e, &params))?;
                    baseline = next;
                    let mut g = est.grads;
                    g.scale(-1.0);
                    (-est.mean_log_likelihood, g)
                }
            };
            if let Some(name) = grads.first_non_finite() {
                return Err(TrainError::NonFinite(name.to_string()));
            }
            norm_sum += grads.clip_global_norm(config.clip_norm);
            loss_sum += loss;
            let (p, o) = optimizer_step(&params, &grads, &opt)?;
            if let Some(name) = p.first_non_finite() {
                return Err(TrainError::NonFinite(name.to_string()));
            }
            params = p;
            opt = o;
        }
        let bleu = validation_bleu(&params, validation, config.mode, config.max_decode_len)
            .map_err(|e| diverged(e, &params))?;
        let metrics = EpochMetrics {
            epoch,
            mode: config.mode,
            loss: loss_sum / batches.len() as f64,
            bleu,
            baseline: (config.mode == Mode::Hard).then_some(baseline.b),
            grad_norm: norm_sum / batches.len() as f64,
            wall_ms: epoch_start.elapsed().as_millis(),
        };
        let flow = observer(&metrics);
        log.push(metrics);
        let (decision, improved) = stopper.observe(epoch, (bleu[3], bleu[0]));
        if improved {
            best = params.clone();
        }
        let out_of_time = config
            .time_limit_secs
            .is_some_and(|limit| started.elapsed().as_secs_f64() >= limit);
        if decision == StopDecision::Stop || out_of_time || flow.is_break() {
            break;
        }
    }
    let best_epoch = stopper.best().map_or(1, |(e, _)| e);
    Ok(TrainOutcome {
        params: best,
        best_epoch,
        log,
    })
}
