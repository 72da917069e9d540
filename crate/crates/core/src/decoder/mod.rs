//! The conditional LSTM decoder: state initialisation from the mean
//! annotation, the gated LSTM update, the deep output layer, and the
//! step-by-step decoding used for generation.

mod checkpoint;
mod generate;
pub mod graphs;
mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{sample_categorical, AnnotationGrid, AttentionError, AttentionTrace, AttentionWeights};
use crate::graphcore::{evaluate, Bindings, GraphError, Tensor};

pub use checkpoint::{
    read_checkpoint, read_checkpoint_bytes, write_checkpoint, write_checkpoint_bytes, CheckpointError,
};
pub use generate::{generate, Strategy};
pub use graphs::{CaptionGraph, CaptionGraphKey, CaptionInputs, StepGraphs};
pub use params::*;

/// Begin-of-sequence token fed as `y_0`.
pub const BOS: usize = 0;
/// End-of-sequence token.
pub const EOS: usize = 1;
/// Out-of-vocabulary token.
pub const UNK: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecoderError {
    #[error("invalid model dimensions {0:?}")]
    InvalidDims(ModelDims),
    #[error("{what}: expected dimension {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("caption must contain at least the end token")]
    EmptyCaption,
    #[error("end token must appear exactly once, at the final position")]
    MisplacedEnd,
    #[error("max_len must be at least 1")]
    ZeroMaxLen,
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter `{0}` holds a non-finite value")]
    NonFiniteParam(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Training-time attention variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Soft,
    Hard,
}

/// How the context vector is formed at each decoding step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextMode {
    /// `beta * sum_i alpha_i a_i`
    Soft,
    /// The annotation at `argmax alpha`.
    HardArgmax,
    /// An annotation drawn from `Multinoulli(alpha)`.
    HardSample,
    /// Always the annotation at this location (diagnostics and tests).
    Fixed(usize),
}

impl ContextMode {
    /// Inference context for a training mode; hard models attend to the
    /// argmax location unless `sample` is set.
    pub fn for_mode(mode: Mode, sample: bool) -> Self {
        match (mode, sample) {
            (Mode::Soft, _) => ContextMode::Soft,
            (Mode::Hard, false) => ContextMode::HardArgmax,
            (Mode::Hard, true) => ContextMode::HardSample,
        }
    }

    fn is_soft(self) -> bool {
        self == ContextMode::Soft
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h: Tensor,
    pub c: Tensor,
    pub t: usize,
}

/// Token indices of a caption. A complete caption ends with [`EOS`]; a
/// generation cut off by `max_len` has no end token.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CaptionSequence {
    tokens: Vec<usize>,
}

impl CaptionSequence {
    /// A complete caption; exactly one `EOS`, in last position.
    pub fn new(tokens: Vec<usize>) -> Result<Self, DecoderError> {
        match tokens.iter().position(|&t| t == EOS) {
            None if tokens.is_empty() => Err(DecoderError::EmptyCaption),
            Some(p) if p + 1 == tokens.len() => Ok(Self { tokens }),
            _ => Err(DecoderError::MisplacedEnd),
        }
    }

    /// Words followed by `EOS`.
    pub fn from_words(words: &[usize]) -> Result<Self, DecoderError> {
        let mut tokens = words.to_vec();
        tokens.push(EOS);
        Self::new(tokens)
    }

    pub(crate) fn unterminated(tokens: Vec<usize>) -> Self {
        debug_assert!(!tokens.contains(&EOS));
        Self { tokens }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Tokens without the trailing end marker.
    pub fn words(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_terminated(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

/// Result of one decoding step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub distribution: Tensor,
    pub logits: Tensor,
    pub state: DecoderState,
    pub weights: AttentionWeights,
    pub location: Option<usize>,
    pub beta: Option<f64>,
}

/// Teacher-forced pass over a known caption.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherForced {
    pub log_likelihood: f64,
    pub step_log_probs: Vec<f64>,
    pub trace: AttentionTrace,
}

/// Step-wise evaluator bound to one parameter set and grid size.
#[derive(Clone, Debug)]
pub struct Decoder<'p> {
    params: &'p DecoderParams,
    graphs: StepGraphs,
}

/// Cached per-caption quantities: the projected grid and the initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub grid_proj: Tensor,
    pub state: DecoderState,
}

fn weighted_rows(grid: &AnnotationGrid, weights: &[f64], scale: f64) -> Tensor {
    let mut out = vec![0.0; grid.feature_dim()];
    for (i, &w) in weights.iter().enumerate() {
        if w != 0.0 {
            for (o, v) in out.iter_mut().zip(grid.row(i)) {
                *o += w * v;
            }
        }
    }
    Tensor::vector(out.into_iter().map(|v| v * scale).collect())
}

impl<'p> Decoder<'p> {
    pub fn new(params: &'p DecoderParams, locations: usize) -> Result<Self, DecoderError> {
        Ok(Self {
            params,
            graphs: StepGraphs::build(params.dims(), locations)?,
        })
    }

    pub fn params(&self) -> &'p DecoderParams {
        self.params
    }

    pub fn locations(&self) -> usize {
        self.graphs.locations
    }

    fn bindings(&self) -> Bindings<'p> {
        let mut b = Bindings::new();
        self.params.bind(&mut b);
        b
    }

    fn check_grid(&self, grid: &AnnotationGrid) -> Result<(), DecoderError> {
        check_dim(
            "annotation feature size",
            self.params.dims().features,
            grid.feature_dim(),
        )?;
        check_dim("annotation locations", self.locations(), grid.locations())
    }

    fn check_state(&self, state: &DecoderState) -> Result<(), DecoderError> {
        let n = self.params.dims().hidden;
        check_dim("hidden state size", n, state.h.len())?;
        check_dim("memory state size", n, state.c.len())
    }

    pub fn prepare(&self, grid: &AnnotationGrid) -> Result<Prepared, DecoderError> {
        self.check_grid(grid)?;
        let mut b = self.bindings();
        b.bind(graphs::GRID, grid.tensor());
        let g = &self.graphs;
        let ev = evaluate(&g.prepare, &b)?;
        Ok(Prepared {
            grid_proj: ev.value(g.prep_proj).clone(),
            state: DecoderState {
                h: ev.value(g.prep_h).clone(),
                c: ev.value(g.prep_c).clone(),
                t: 0,
            },
        })
    }

    /// Attention weights and gate computed from the pre-update hidden state.
    pub fn attend(&self, grid_proj: &Tensor, state: &DecoderState) -> Result<(AttentionWeights, f64), DecoderError> {
        self.check_state(state)?;
        let mut b = self.bindings();
        b.bind(graphs::GRID_PROJ, grid_proj).bind(graphs::H_PREV, &state.h);
        let g = &self.graphs;
        let ev = evaluate(&g.attend, &b)?;
        let alpha = AttentionWeights::new(ev.value(g.att_alpha).clone())?;
        Ok((alpha, ev.scalar(g.att_beta)))
    }

    /// Column `token` of the embedding matrix.
    pub fn embedding(&self, token: usize) -> Result<Tensor, DecoderError> {
        let e = self.params.get(EMBED).expect("embedding present");
        let (m, k) = (e.rows(), e.cols());
        if token >= k {
            return Err(DecoderError::TokenOutOfRange { token, vocab: k });
        }
        Ok(Tensor::vector((0..m).map(|r| e.at(r, token)).collect()))
    }

    pub fn lstm(
        &self,
        embedded: &Tensor,
        state: &DecoderState,
        context: &Tensor,
    ) -> Result<DecoderState, DecoderError> {
        let dims = self.params.dims();
        check_dim("embedding size", dims.embed, embedded.len())?;
        check_dim("context size", dims.features, context.len())?;
        self.check_state(state)?;
        let mut b = self.bindings();
        b.bind(graphs::PREV_EMBED, embedded)
            .bind(graphs::H_PREV, &state.h)
            .bind(graphs::C_PREV, &state.c)
            .bind(graphs::CONTEXT, context);
        let g = &self.graphs;
        let ev = evaluate(&g.lstm, &b)?;
        Ok(DecoderState {
            h: ev.value(g.lstm_h).clone(),
            c: ev.value(g.lstm_c).clone(),
            t: state.t + 1,
        })
    }

    /// `(logits, probabilities)` of the deep output layer.
    pub fn output(
        &self,
        embedded: &Tensor,
        state: &DecoderState,
        context: &Tensor,
    ) -> Result<(Tensor, Tensor), DecoderError> {
        let dims = self.params.dims();
        check_dim("embedding size", dims.embed, embedded.len())?;
        check_dim("context size", dims.features, context.len())?;
        self.check_state(state)?;
        let mut b = self.bindings();
        b.bind(graphs::PREV_EMBED, embedded)
            .bind(graphs::H_CUR, &state.h)
            .bind(graphs::CONTEXT, context);
        let g = &self.graphs;
        let ev = evaluate(&g.output, &b)?;
        Ok((ev.value(g.out_logits).clone(), ev.value(g.out_probs).clone()))
    }

    /// Attend from `state`, form the context, update the LSTM, and emit the
    /// next-word distribution.
    pub fn step<R: Rng + ?Sized>(
        &self,
        grid: &AnnotationGrid,
        grid_proj: &Tensor,
        state: &DecoderState,
        prev_token: usize,
        mode: ContextMode,
        rng: &mut R,
    ) -> Result<StepOutput, DecoderError> {
        self.check_grid(grid)?;
        let embedded = self.embedding(prev_token)?;
        let (weights, beta) = self.attend(grid_proj, state)?;
        let (context, location, beta) = match mode {
            ContextMode::Soft => (weighted_rows(grid, weights.as_slice(), beta), None, Some(beta)),
            ContextMode::HardArgmax | ContextMode::HardSample | ContextMode::Fixed(_) => {
                let loc = match mode {
                    ContextMode::HardArgmax => weights.argmax(),
                    ContextMode::HardSample => sample_categorical(weights.as_slice(), rng),
                    ContextMode::Fixed(i) if i < grid.locations() => i,
                    ContextMode::Fixed(i) => {
                        return Err(DecoderError::Dimension {
                            what: "fixed location",
                            expected: grid.locations(),
                            found: i,
                        })
                    }
                    ContextMode::Soft => unreachable!(),
                };
                (Tensor::vector(grid.row(loc).to_vec()), Some(loc), None)
            }
        };
        let next = self.lstm(&embedded, state, &context)?;
        let (logits, distribution) = self.output(&embedded, &next, &context)?;
        Ok(StepOutput {
            distribution,
            logits,
            state: next,
            weights,
            location,
            beta,
        })
    }

    /// Runs the decoder over a known caption, feeding the ground-truth
    /// previous word at each step.
    pub fn teacher_forced<R: Rng + ?Sized>(
        &self,
        grid: &AnnotationGrid,
        caption: &CaptionSequence,
        mode: ContextMode,
        rng: &mut R,
    ) -> Result<TeacherForced, DecoderError> {
        let prepared = self.prepare(grid)?;
        let mut state = prepared.state;
        let mut prev = BOS;
        let mut step_log_probs = Vec::with_capacity(caption.len());
        let mut trace = AttentionTrace::default();
        let mut locations = Vec::new();
        let mut betas = Vec::new();
        for &token in caption.tokens() {
            let out = self.step(grid, &prepared.grid_proj, &state, prev, mode, rng)?;
            let p = out
                .distribution
                .data()
                .get(token)
                .copied()
                .ok_or(DecoderError::TokenOutOfRange {
                    token,
                    vocab: out.distribution.len(),
                })?;
            step_log_probs.push(p.ln());
            trace.per_step.push(out.weights);
            locations.extend(out.location);
            betas.extend(out.beta);
            state = out.state;
            prev = token;
        }
        if mode.is_soft() {
            trace.betas = Some(betas);
        } else {
            trace.sampled_locations = Some(locations);
        }
        Ok(TeacherForced {
            log_likelihood: step_log_probs.iter().sum(),
            step_log_probs,
            trace,
        })
    }

    /// Logits `n_{t,i}` obtained by running one step with the context fixed
    /// to each annotation `a_i` in turn, from the same previous state.
    pub fn per_location_logits(
        &self,
        grid: &AnnotationGrid,
        state: &DecoderState,
        prev_token: usize,
    ) -> Result<Vec<Tensor>, DecoderError> {
        self.check_grid(grid)?;
        let embedded = self.embedding(prev_token)?;
        (0..grid.locations())
            .map(|i| {
                let ctx = Tensor::vector(grid.row(i).to_vec());
                let next = self.lstm(&embedded, state, &ctx)?;
                Ok(self.output(&embedded, &next, &ctx)?.0)
            })
            .collect()
    }
}

fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<(), DecoderError> {
    if expected == found {
        Ok(())
    } else {
        Err(DecoderError::Dimension { what, expected, found })
    }
}

/// Initial `(h_0, c_0)` from the mean annotation vector.
pub fn init_state(grid: &AnnotationGrid, params: &DecoderParams) -> Result<DecoderState, DecoderError> {
    Ok(Decoder::new(params, grid.locations())?.prepare(grid)?.state)
}

/// One LSTM update from an already-embedded previous word.
pub fn lstm_step(
    prev_embedding: &Tensor,
    state: &DecoderState,
    context: &Tensor,
    params: &DecoderParams,
) -> Result<DecoderState, DecoderError> {
    Decoder::new(params, 1)?.lstm(prev_embedding, state, context)
}

/// `softmax(L_o (E y_{t-1} + L_h h_t + L_z z_t))` for a post-update state.
pub fn output_distribution(
    prev_token: usize,
    state: &DecoderState,
    context: &Tensor,
    params: &DecoderParams,
) -> Result<Tensor, DecoderError> {
    let dec = Decoder::new(params, 1)?;
    let emb = dec.embedding(prev_token)?;
    Ok(dec.output(&emb, state, context)?.1)
}

pub fn decode_step<R: Rng + ?Sized>(
    grid: &AnnotationGrid,
    state: &DecoderState,
    prev_token: usize,
    params: &DecoderParams,
    mode: ContextMode,
    rng: &mut R,
) -> Result<StepOutput, DecoderError> {
    let dec = Decoder::new(params, grid.locations())?;
    let prepared = dec.prepare(grid)?;
    dec.step(grid, &prepared.grid_proj, state, prev_token, mode, rng)
}
