use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CaptionSequence, ContextMode, Decoder, DecoderError, DecoderParams, DecoderState, BOS, EOS};
use crate::attention::{sample_categorical, AnnotationGrid, AttentionTrace, AttentionWeights};

/// Word selection rule used during generation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam { width: usize },
    Sample { temperature: f64 },
}

#[derive(Clone, Debug)]
struct Hypothesis {
    log_prob: f64,
    tokens: Vec<usize>,
    state: DecoderState,
    weights: Vec<AttentionWeights>,
    locations: Vec<usize>,
    betas: Vec<f64>,
}

impl Hypothesis {
    fn finish(self, mode: ContextMode) -> (CaptionSequence, AttentionTrace) {
        let caption = if self.tokens.last() == Some(&EOS) {
            CaptionSequence::new(self.tokens).expect("single trailing end token")
        } else {
            CaptionSequence::unterminated(self.tokens)
        };
        let trace = AttentionTrace {
            per_step: self.weights,
            sampled_locations: (mode != ContextMode::Soft).then_some(self.locations),
            betas: (mode == ContextMode::Soft).then_some(self.betas),
        };
        (caption, trace)
    }
}

/// Generates a caption starting from `BOS`, stopping at `EOS` or after
/// `max_len` tokens. The trace has one entry per emitted token.
pub fn generate<R: Rng + ?Sized>(
    grid: &AnnotationGrid,
    params: &DecoderParams,
    mode: ContextMode,
    strategy: Strategy,
    max_len: usize,
    rng: &mut R,
) -> Result<(CaptionSequence, AttentionTrace), DecoderError> {
    if max_len == 0 {
        return Err(DecoderError::ZeroMaxLen);
    }
    let decoder = Decoder::new(params, grid.locations())?;
    let prepared = decoder.prepare(grid)?;
    let start = Hypothesis {
        log_prob: 0.0,
        tokens: Vec::new(),
        state: prepared.state.clone(),
        weights: Vec::new(),
        locations: Vec::new(),
        betas: Vec::new(),
    };
    let width = match strategy {
        Strategy::Beam { width } => width.max(1),
        _ => 1,
    };
    if let Strategy::Greedy | Strategy::Sample { .. } = strategy {
        let mut hyp = start;
        for _ in 0..max_len {
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let out = decoder.step(grid, &prepared.grid_proj, &hyp.state, prev, mode, rng)?;
            let token = match strategy {
                Strategy::Sample { temperature } => sample_categorical(&tempered(out.logits.data(), temperature), rng),
                _ => out.distribution.argmax(),
            };
            hyp.log_prob += out.distribution.data()[token].ln();
            hyp.tokens.push(token);
            hyp.weights.push(out.weights);
            hyp.locations.extend(out.location);
            hyp.betas.extend(out.beta);
            hyp.state = out.state;
            if token == EOS {
                break;
            }
        }
        return Ok(hyp.finish(mode));
    }

    let mut alive = vec![start];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        let mut outputs = Vec::with_capacity(alive.len());
        for (b, hyp) in alive.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let out = decoder.step(grid, &prepared.grid_proj, &hyp.state, prev, mode, rng)?;
            for (tok, &p) in out.distribution.data().iter().enumerate() {
                candidates.push((hyp.log_prob + p.ln(), b, tok));
            }
            outputs.push(out);
        }
        // highest score first; ties broken by beam then token index
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(width);
        for (score, b, tok) in candidates.into_iter().take(width) {
            let out = &outputs[b];
            let mut hyp = alive[b].clone();
            hyp.log_prob = score;
            hyp.tokens.push(tok);
            hyp.weights.push(out.weights.clone());
            hyp.locations.extend(out.location);
            hyp.betas.extend(out.beta);
            hyp.state = out.state.clone();
            if tok == EOS {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        alive = next;
        if alive.is_empty() || finished.len() >= width {
            break;
        }
    }
    let best = |hyps: Vec<Hypothesis>| {
        hyps.into_iter()
            .reduce(|a, b| if b.log_prob > a.log_prob { b } else { a })
    };
    let winner = best(finished).or_else(|| best(alive)).expect("at least one hypothesis");
    Ok(winner.finish(mode))
}

fn tempered(logits: &[f64], temperature: f64) -> Vec<f64> {
    let t = temperature.max(1e-6);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| ((l - max) / t).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}
