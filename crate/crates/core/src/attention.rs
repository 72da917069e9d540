//! The attention MLP `f_att`, weight normalisation, and the two context
//! functions: the gated expected context (soft) and a sampled annotation
//! (hard).
//!
//! The `build_*` functions add attention nodes to a caller's [`Graph`]; the
//! decoder composes them into unrolled caption graphs. The free functions
//! evaluate single operations on concrete tensors.

use rand::Rng;
use thiserror::Error;

use crate::graphcore::{evaluate, Bindings, Graph, GraphError, NodeId, Tensor};

pub const PROJ_ANNOTATION: &str = "att_proj_a";
pub const PROJ_HIDDEN: &str = "att_proj_h";
pub const SCORER: &str = "att_score";
pub const GATE_WEIGHT: &str = "gate_w";
pub const GATE_BIAS: &str = "gate_b";

/// Parameter names owned by the attention model, in checkpoint order.
pub const PARAM_NAMES: [&str; 5] = [PROJ_ANNOTATION, PROJ_HIDDEN, SCORER, GATE_WEIGHT, GATE_BIAS];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("{what}: expected dimension {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid attention weights: {0}")]
    InvalidWeights(String),
    #[error("invalid annotation grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// `L x D` annotation vectors, one row per image location.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationGrid {
    features: Tensor,
}

impl AnnotationGrid {
    pub fn new(features: Tensor) -> Result<Self, AttentionError> {
        if features.rank() != 2 {
            return Err(AttentionError::InvalidGrid(format!(
                "expected an L x D matrix, got shape {:?}",
                features.shape()
            )));
        }
        if !features.is_finite() {
            return Err(AttentionError::InvalidGrid("non-finite feature".into()));
        }
        Ok(Self { features })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AttentionError> {
        let l = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if l == 0 || d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(AttentionError::InvalidGrid("ragged or empty rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(Tensor::matrix(l, d, data)?)
    }

    pub fn locations(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn row(&self, location: usize) -> &[f64] {
        self.features.row(location)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.features
    }

    /// `(1/L) sum_i a_i`
    pub fn mean(&self) -> Tensor {
        let (l, d) = (self.locations(), self.feature_dim());
        let mut mean = vec![0.0; d];
        for i in 0..l {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        Tensor::vector(mean.into_iter().map(|v| v / l as f64).collect())
    }
}

/// A probability vector over locations.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    alpha: Tensor,
}

impl AttentionWeights {
    pub fn new(alpha: Tensor) -> Result<Self, AttentionError> {
        if alpha.rank() != 1 {
            return Err(AttentionError::InvalidWeights(format!("shape {:?}", alpha.shape())));
        }
        if alpha.data().iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(AttentionError::InvalidWeights("entry outside [0, 1]".into()));
        }
        let total = alpha.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(AttentionError::InvalidWeights(format!("sum is {total}")));
        }
        Ok(Self { alpha })
    }

    pub fn uniform(locations: usize) -> Self {
        Self {
            alpha: Tensor::filled(&[locations], 1.0 / locations as f64),
        }
    }

    pub fn one_hot(locations: usize, index: usize) -> Self {
        Self {
            alpha: Tensor::one_hot(locations, index),
        }
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.alpha.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.alpha
    }

    pub fn argmax(&self) -> usize {
        self.alpha.argmax()
    }
}

/// Per-step attention record of one generated (or teacher-forced) caption.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    pub per_step: Vec<AttentionWeights>,
    /// Attended location per step; hard path only.
    pub sampled_locations: Option<Vec<usize>>,
    /// Gating scalar per step; soft path only.
    pub betas: Option<Vec<f64>>,
}

impl AttentionTrace {
    pub fn len(&self) -> usize {
        self.per_step.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_step.is_empty()
    }

    /// `sum_t alpha_ti` for every location `i`.
    pub fn column_sums(&self) -> Vec<f64> {
        let l = self.per_step.first().map_or(0, AttentionWeights::len);
        let mut sums = vec![0.0; l];
        for w in &self.per_step {
            for (s, a) in sums.iter_mut().zip(w.as_slice()) {
                *s += a;
            }
        }
        sums
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionDims {
    /// Annotation feature size D.
    pub features: usize,
    /// LSTM hidden size n.
    pub hidden: usize,
    /// Attention MLP hidden size A.
    pub attn: usize,
}

/// Weights of `f_att` (`v . tanh(U_a a_i + U_h h)`) and the gate `f_beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `U_a`, `D x A`
    pub proj_annotation: Tensor,
    /// `U_h`, `n x A`
    pub proj_hidden: Tensor,
    /// `v`, length `A`
    pub scorer: Tensor,
    /// gate weights, length `n`
    pub gate_weight: Tensor,
    /// gate bias, shape `[1]`
    pub gate_bias: Tensor,
}

impl AttentionParams {
    pub fn zeros(dims: AttentionDims) -> Self {
        Self {
            proj_annotation: Tensor::zeros(&[dims.features, dims.attn]),
            proj_hidden: Tensor::zeros(&[dims.hidden, dims.attn]),
            scorer: Tensor::zeros(&[dims.attn]),
            gate_weight: Tensor::zeros(&[dims.hidden]),
            gate_bias: Tensor::zeros(&[1]),
        }
    }

    pub fn dims(&self) -> AttentionDims {
        AttentionDims {
            features: self.proj_annotation.rows(),
            hidden: self.proj_hidden.rows(),
            attn: self.scorer.len(),
        }
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 5] {
        [
            (PROJ_ANNOTATION, &self.proj_annotation),
            (PROJ_HIDDEN, &self.proj_hidden),
            (SCORER, &self.scorer),
            (GATE_WEIGHT, &self.gate_weight),
            (GATE_BIAS, &self.gate_bias),
        ]
    }

    pub fn bind<'a>(&'a self, bindings: &mut Bindings<'a>) {
        for (name, t) in self.named() {
            bindings.bind(name, t);
        }
    }
}

/// Graph inputs for the attention parameters.
#[derive(Clone, Copy, Debug)]
pub struct AttentionNodes {
    pub proj_annotation: NodeId,
    pub proj_hidden: NodeId,
    pub scorer: NodeId,
    pub gate_weight: NodeId,
    pub gate_bias: NodeId,
}

impl AttentionNodes {
    pub fn declare(g: &mut Graph, dims: AttentionDims) -> Result<Self, GraphError> {
        Ok(Self {
            proj_annotation: g.input(PROJ_ANNOTATION, &[dims.features, dims.attn])?,
            proj_hidden: g.input(PROJ_HIDDEN, &[dims.hidden, dims.attn])?,
            scorer: g.input(SCORER, &[dims.attn])?,
            gate_weight: g.input(GATE_WEIGHT, &[dims.hidden])?,
            gate_bias: g.input(GATE_BIAS, &[1])?,
        })
    }
}

/// `U_a a_i` for all rows; independent of the hidden state, so built once
/// per caption and shared by every step.
pub fn build_grid_projection(g: &mut Graph, p: &AttentionNodes, grid: NodeId) -> Result<NodeId, GraphError> {
    g.matmul(grid, p.proj_annotation)
}

/// Scores `e_i = v . tanh(U_a a_i + U_h h_prev)`, shape `[L]`.
pub fn build_scores(
    g: &mut Graph,
    p: &AttentionNodes,
    grid_proj: NodeId,
    h_prev: NodeId,
) -> Result<NodeId, GraphError> {
    let hp = g.matmul(h_prev, p.proj_hidden)?;
    let pre = g.add(grid_proj, hp)?;
    let act = g.tanh(pre)?;
    g.matmul(act, p.scorer)
}

/// `beta = sigmoid(w . h_prev + b)`, shape `[1]`.
pub fn build_gate(g: &mut Graph, p: &AttentionNodes, h_prev: NodeId) -> Result<NodeId, GraphError> {
    let dot = g.matmul(h_prev, p.gate_weight)?;
    let pre = g.add(dot, p.gate_bias)?;
    g.sigmoid(pre)
}

/// `beta * sum_i w_i a_i` (or the ungated sum when `gate` is `None`).
///
/// With `w` a one-hot selection this is the hard context `a_s`.
pub fn build_context(g: &mut Graph, weights: NodeId, grid: NodeId, gate: Option<NodeId>) -> Result<NodeId, GraphError> {
    let expected = g.matmul(weights, grid)?;
    match gate {
        Some(beta) => g.mul(expected, beta),
        None => Ok(expected),
    }
}

fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<(), AttentionError> {
    if expected == found {
        Ok(())
    } else {
        Err(AttentionError::Dimension { what, expected, found })
    }
}

fn check_inputs(grid: &AnnotationGrid, h_prev: &Tensor, params: &AttentionParams) -> Result<(), AttentionError> {
    let dims = params.dims();
    check_dim("annotation feature size", dims.features, grid.feature_dim())?;
    check_dim("hidden state size", dims.hidden, h_prev.len())?;
    Ok(())
}

/// Unnormalised attention scores `e_t` for one step.
pub fn attention_scores(
    grid: &AnnotationGrid,
    h_prev: &Tensor,
    params: &AttentionParams,
) -> Result<Tensor, AttentionError> {
    check_inputs(grid, h_prev, params)?;
    let mut g = Graph::new();
    let nodes = AttentionNodes::declare(&mut g, params.dims())?;
    let grid_node = g.input("grid", grid.tensor().shape())?;
    let h = g.input("h_prev", &[params.dims().hidden])?;
    let proj = build_grid_projection(&mut g, &nodes, grid_node)?;
    let scores = build_scores(&mut g, &nodes, proj, h)?;
    let h_vec = h_prev.clone().reshape(&[h_prev.len()])?;
    let mut b = Bindings::new();
    params.bind(&mut b);
    b.bind("grid", grid.tensor()).bind("h_prev", &h_vec);
    Ok(evaluate(&g, &b)?.value(scores).clone())
}

/// Softmax of the scores.
pub fn attention_weights(scores: &Tensor) -> Result<AttentionWeights, AttentionError> {
    let mut g = Graph::new();
    let e = g.input("e", &[scores.len()])?;
    let alpha = g.softmax(e, 0)?;
    let flat = scores.clone().reshape(&[scores.len()])?;
    let mut b = Bindings::new();
    b.bind("e", &flat);
    let value = evaluate(&g, &b)?.value(alpha).clone();
    AttentionWeights::new(value)
}

/// Gated expected context `beta * sum_i alpha_i a_i` and the gate value.
pub fn soft_context(
    grid: &AnnotationGrid,
    weights: &AttentionWeights,
    h_prev: &Tensor,
    params: &AttentionParams,
) -> Result<(Tensor, f64), AttentionError> {
    check_inputs(grid, h_prev, params)?;
    check_dim("attention weights", grid.locations(), weights.len())?;
    let mut g = Graph::new();
    let nodes = AttentionNodes::declare(&mut g, params.dims())?;
    let grid_node = g.input("grid", grid.tensor().shape())?;
    let alpha = g.input("alpha", &[weights.len()])?;
    let h = g.input("h_prev", &[params.dims().hidden])?;
    let beta = build_gate(&mut g, &nodes, h)?;
    let ctx = build_context(&mut g, alpha, grid_node, Some(beta))?;
    let h_vec = h_prev.clone().reshape(&[h_prev.len()])?;
    let mut b = Bindings::new();
    params.bind(&mut b);
    b.bind("grid", grid.tensor())
        .bind("alpha", weights.tensor())
        .bind("h_prev", &h_vec);
    let ev = evaluate(&g, &b)?;
    Ok((ev.value(ctx).clone(), ev.scalar(beta)))
}

/// Inverse-CDF draw from a categorical distribution.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HardSample {
    pub location: usize,
    pub one_hot: Tensor,
    pub context: Tensor,
}

/// Draws `s ~ Multinoulli(alpha)` and returns the selected annotation.
pub fn hard_sample<R: Rng + ?Sized>(
    grid: &AnnotationGrid,
    weights: &AttentionWeights,
    rng: &mut R,
) -> Result<HardSample, AttentionError> {
    check_dim("attention weights", grid.locations(), weights.len())?;
    let location = sample_categorical(weights.as_slice(), rng);
    Ok(HardSample {
        location,
        one_hot: Tensor::one_hot(weights.len(), location),
        context: Tensor::vector(grid.row(location).to_vec()),
    })
}

/// `H = -sum_i alpha_i ln alpha_i`, with `0 ln 0 = 0`.
pub fn multinoulli_entropy(weights: &AttentionWeights) -> f64 {
    -weights
        .as_slice()
        .iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| a * a.ln())
        .sum::<f64>()
}
