use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{batch_shape, dropout_masks, Example, TrainError};
use crate::attention::AnnotationGrid;
use crate::decoder::graphs::GRID;
use crate::decoder::{
    CaptionGraph, CaptionGraphKey, CaptionInputs, CaptionSequence, ContextMode, Decoder, DecoderParams, Mode, BOS,
};
use crate::graphcore::{backward_seeded, evaluate, Bindings, GradientMap, Tensor};

/// Largest number of location sequences [`exact_hard_objective`] will enumerate.
pub const MAX_ENUMERATION: u128 = 4096;

/// Settings of the hard-attention learning rule.
///
/// The entropy term is a bonus: `lambda_e * H` is added to the objective
/// being maximised, so positive values encourage exploration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HardLossConfig {
    /// Scale of the score-function (reward) term.
    pub lambda_r: f64,
    /// Scale of the entropy bonus.
    pub lambda_e: f64,
    /// Monte Carlo samples per caption.
    pub sample_count: usize,
    /// Chance of replacing a caption's sampled locations by their expectation.
    pub expectation_substitution_prob: f64,
    pub baseline_decay: f64,
    pub dropout_rate: f64,
}

impl Default for HardLossConfig {
    fn default() -> Self {
        Self {
            lambda_r: 1.0,
            lambda_e: 0.01,
            sample_count: 1,
            expectation_substitution_prob: 0.5,
            baseline_decay: 0.9,
            dropout_rate: 0.5,
        }
    }
}

impl HardLossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.sample_count == 0 {
            return bad("sample_count must be at least 1".into());
        }
        for (name, v) in [
            ("expectation_substitution_prob", self.expectation_substitution_prob),
            ("baseline_decay", self.baseline_decay),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if !self.lambda_r.is_finite() || !self.lambda_e.is_finite() {
            return bad("lambda_r and lambda_e must be finite".into());
        }
        Ok(())
    }
}

/// Moving average of sampled log-likelihoods.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    pub b: f64,
    /// Number of updates applied so far.
    pub k: u64,
}

impl BaselineState {
    /// `b' = decay * b + (1 - decay) * batch_mean`
    pub fn update(self, batch_mean: f64, decay: f64) -> Self {
        Self {
            b: decay * self.b + (1.0 - decay) * batch_mean,
            k: self.k + 1,
        }
    }
}

/// Gradient of one Monte Carlo sample, in the ascent direction of `L_s`.
#[derive(Clone, Debug)]
pub struct SampleEstimate {
    pub grads: GradientMap,
    /// `log p(y | s, a)` of the trajectory used.
    pub log_likelihood: f64,
    /// Sampled locations, or `None` when the expected context was substituted.
    pub locations: Option<Vec<usize>>,
    pub entropy: f64,
}

/// Batch-averaged estimate, in the ascent direction of `L_s`.
#[derive(Clone, Debug)]
pub struct GradientEstimate {
    pub grads: GradientMap,
    /// Mean `log p(y | s, a)` over every trajectory, sampled or substituted.
    pub mean_log_likelihood: f64,
    pub sampled: usize,
    pub substituted: usize,
    pub mean_entropy: f64,
}

/// Reusable machinery for drawing estimates on captions of one length.
#[derive(Debug)]
pub struct HardSampler<'p> {
    params: &'p DecoderParams,
    decoder: Decoder<'p>,
    graph: CaptionGraph,
    names: Vec<&'p str>,
}

impl<'p> HardSampler<'p> {
    pub fn new(params: &'p DecoderParams, length: usize, locations: usize, dropout: bool) -> Result<Self, TrainError> {
        let key = CaptionGraphKey {
            mode: Mode::Hard,
            length,
            locations,
            dropout,
        };
        Ok(Self {
            params,
            decoder: Decoder::new(params, locations)?,
            graph: CaptionGraph::build(params.dims(), key)?,
            names: params.names().collect(),
        })
    }

    /// One estimate of `dL_s/dW` for `example`:
    /// `d log p(y|s,a) + lambda_r (log p(y|s,a) - baseline) d log p(s|a) + lambda_e dH`,
    /// with the middle term dropped when the expected context is substituted.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        example: Example<'_>,
        config: &HardLossConfig,
        baseline: f64,
        rng: &mut R,
    ) -> Result<SampleEstimate, TrainError> {
        let dims = self.params.dims();
        let key = self.graph.key;
        if example.caption.len() != key.length {
            return Err(TrainError::MixedLengths(key.length, example.caption.len()));
        }
        if example.grid.locations() != key.locations {
            return Err(TrainError::MixedLocations(key.locations, example.grid.locations()));
        }
        let substitute = rng.random::<f64>() < config.expectation_substitution_prob;
        let mut inputs = CaptionInputs::new(example.caption.tokens(), dims.vocab, BOS)?;
        let locations = if substitute {
            inputs.selections = vec![Tensor::zeros(&[key.locations]); key.length];
            inputs.sample_mask = Tensor::scalar(0.0);
            inputs.expect_mask = Tensor::scalar(1.0);
            None
        } else {
            let tf = self
                .decoder
                .teacher_forced(example.grid, example.caption, ContextMode::HardSample, rng)?;
            let locs = tf.trace.sampled_locations.expect("hard trace records locations");
            inputs.selections = locs.iter().map(|&s| Tensor::one_hot(key.locations, s)).collect();
            Some(locs)
        };
        if key.dropout {
            inputs.dropout = dropout_masks(key.length, dims.hidden, config.dropout_rate, rng);
        }
        let mut b = Bindings::new();
        self.params.bind(&mut b);
        b.bind(GRID, example.grid.tensor());
        inputs.bind(&mut b);
        let g = &self.graph;
        let ev = evaluate(&g.graph, &b)?;
        let log_likelihood = ev.scalar(g.log_likelihood);
        let log_selection = g.log_selection.expect("hard graph");
        let entropy = g.entropy.expect("hard graph");
        let mut seeds = vec![(g.log_likelihood, 1.0)];
        if locations.is_some() && config.lambda_r != 0.0 {
            seeds.push((log_selection, config.lambda_r * (log_likelihood - baseline)));
        }
        if config.lambda_e != 0.0 {
            seeds.push((entropy, config.lambda_e));
        }
        let grads = backward_seeded(&g.graph, &ev, &seeds, &self.names)?;
        Ok(SampleEstimate {
            grads,
            log_likelihood,
            locations,
            entropy: ev.scalar(entropy),
        })
    }
}

/// Single-sample estimate for one caption; see [`HardSampler::sample`].
pub fn hard_sample_gradient<R: Rng + ?Sized>(
    example: Example<'_>,
    params: &DecoderParams,
    config: &HardLossConfig,
    baseline: f64,
    rng: &mut R,
) -> Result<SampleEstimate, TrainError> {
    config.validate()?;
    let sampler = HardSampler::new(
        params,
        example.caption.len(),
        example.grid.locations(),
        config.dropout_rate > 0.0,
    )?;
    sampler.sample(example, config, baseline, rng)
}

/// Averages `sample_count` estimates per caption over a same-length batch,
/// then moves the baseline towards the mean log-likelihood of the sampled
/// (not substituted) trajectories. The baseline is left untouched when
/// every trajectory was substituted.
pub fn hard_gradient_estimate<R: Rng + ?Sized>(
    batch: &[Example<'_>],
    params: &DecoderParams,
    config: &HardLossConfig,
    baseline: BaselineState,
    rng: &mut R,
) -> Result<(GradientEstimate, BaselineState), TrainError> {
    config.validate()?;
    let (length, locations) = batch_shape(batch)?;
    let sampler = HardSampler::new(params, length, locations, config.dropout_rate > 0.0)?;
    let share = 1.0 / (batch.len() * config.sample_count) as f64;
    let mut est = GradientEstimate {
        grads: params.zero_gradients(),
        mean_log_likelihood: 0.0,
        sampled: 0,
        substituted: 0,
        mean_entropy: 0.0,
    };
    let mut sampled_ll = 0.0;
    for ex in batch {
        for _ in 0..config.sample_count {
            let s = sampler.sample(*ex, config, baseline.b, rng)?;
            est.grads.accumulate(&s.grads, share);
            est.mean_log_likelihood += share * s.log_likelihood;
            est.mean_entropy += share * s.entropy;
            if s.locations.is_some() {
                est.sampled += 1;
                sampled_ll += s.log_likelihood;
            } else {
                est.substituted += 1;
            }
        }
    }
    let next = if est.sampled > 0 {
        baseline.update(sampled_ll / est.sampled as f64, config.baseline_decay)
    } else {
        baseline
    };
    Ok((est, next))
}

/// `L_s` computed by enumerating every location sequence.
#[derive(Clone, Debug)]
pub struct ExactObjective {
    /// `sum_s p(s|a) log p(y|s,a)`
    pub value: f64,
    /// `dL_s/dW`
    pub grads: GradientMap,
    /// `log sum_s p(s|a) p(y|s,a)`, the marginal log-likelihood.
    pub log_marginal: f64,
}

/// Exact lower bound and its gradient for one caption, by brute force over
/// all `L^C` location sequences. Each sequence's probability is taken from
/// the unrolled graph, so the dependence of later attention weights on
/// earlier selections is respected.
pub fn exact_hard_objective(
    grid: &AnnotationGrid,
    caption: &CaptionSequence,
    params: &DecoderParams,
) -> Result<ExactObjective, TrainError> {
    let (locs, steps) = (grid.locations(), caption.len());
    let total = (locs as u128)
        .checked_pow(steps as u32)
        .filter(|&n| n <= MAX_ENUMERATION)
        .ok_or_else(|| TrainError::TooLarge((locs as u128).saturating_pow(steps as u32)))?;
    let dims = params.dims();
    let key = CaptionGraphKey {
        mode: Mode::Hard,
        length: steps,
        locations: locs,
        dropout: false,
    };
    let g = CaptionGraph::build(dims, key)?;
    let log_selection = g.log_selection.expect("hard graph");
    let names: Vec<&str> = params.names().collect();
    let mut inputs = CaptionInputs::new(caption.tokens(), dims.vocab, BOS)?;
    let mut grads = params.zero_gradients();
    let mut value = 0.0;
    let mut joint = Vec::with_capacity(total as usize);
    let mut seq = vec![0usize; steps];
    for _ in 0..total {
        inputs.selections = seq.iter().map(|&s| Tensor::one_hot(locs, s)).collect();
        let mut b = Bindings::new();
        params.bind(&mut b);
        b.bind(GRID, grid.tensor());
        inputs.bind(&mut b);
        let ev = evaluate(&g.graph, &b)?;
        let ll = ev.scalar(g.log_likelihood);
        let log_p = ev.scalar(log_selection);
        let p = log_p.exp();
        value += p * ll;
        joint.push(log_p + ll);
        let seeds = [(g.log_likelihood, p), (log_selection, p * ll)];
        grads.accumulate(&backward_seeded(&g.graph, &ev, &seeds, &names)?, 1.0);
        for digit in seq.iter_mut().rev() {
            *digit += 1;
            if *digit < locs {
                break;
            }
            *digit = 0;
        }
    }
    let max = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_marginal = max + joint.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(ExactObjective {
        value,
        grads,
        log_marginal,
    })
}
