//! Graph construction for the decoder: one unrolled graph per caption
//! length for training, and small per-step graphs for inference.

use super::params::*;
use super::{DecoderError, Mode, ModelDims};
use crate::attention::{self, AttentionNodes};
use crate::graphcore::{Bindings, Graph, GraphError, NodeId, Tensor};

pub const GRID: &str = "grid";
pub const LAMBDA: &str = "lambda";
pub const SAMPLE_MASK: &str = "sample_mask";
pub const EXPECT_MASK: &str = "expect_mask";

pub fn prev_name(t: usize) -> String {
    format!("prev_{t}")
}

pub fn target_name(t: usize) -> String {
    format!("target_{t}")
}

pub fn dropout_name(t: usize) -> String {
    format!("dropout_{t}")
}

pub fn selection_name(t: usize) -> String {
    format!("selection_{t}")
}

#[derive(Clone, Copy, Debug)]
struct MlpNodes {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

impl MlpNodes {
    /// `w2 . tanh(w1 . x + b1) + b2`, optionally squashed by a final tanh.
    fn build(&self, g: &mut Graph, x: NodeId, squash: bool) -> Result<NodeId, GraphError> {
        let pre = g.matmul(x, self.w1)?;
        let pre = g.add(pre, self.b1)?;
        let hid = g.tanh(pre)?;
        let out = g.matmul(hid, self.w2)?;
        let out = g.add(out, self.b2)?;
        if squash {
            g.tanh(out)
        } else {
            Ok(out)
        }
    }
}

/// Parameter inputs of a decoder graph.
#[derive(Clone, Copy, Debug)]
pub struct DecoderNodes {
    dims: ModelDims,
    embed: NodeId,
    lstm_w: NodeId,
    lstm_b: NodeId,
    init_c: MlpNodes,
    init_h: MlpNodes,
    out_o: NodeId,
    out_h: NodeId,
    out_z: NodeId,
    pub attention: AttentionNodes,
}

impl DecoderNodes {
    pub fn declare(g: &mut Graph, dims: ModelDims) -> Result<Self, GraphError> {
        let shapes = dims.param_shapes();
        let shape = |name: &str| shapes.iter().find(|(n, _)| *n == name).unwrap().1.clone();
        let mut input = |name: &str| g.input(name, &shape(name));
        let embed = input(EMBED)?;
        let lstm_w = input(LSTM_W)?;
        let lstm_b = input(LSTM_B)?;
        let init_c = MlpNodes {
            w1: input(INIT_C_W1)?,
            b1: input(INIT_C_B1)?,
            w2: input(INIT_C_W2)?,
            b2: input(INIT_C_B2)?,
        };
        let init_h = MlpNodes {
            w1: input(INIT_H_W1)?,
            b1: input(INIT_H_B1)?,
            w2: input(INIT_H_W2)?,
            b2: input(INIT_H_B2)?,
        };
        let out_o = input(OUT_O)?;
        let out_h = input(OUT_H)?;
        let out_z = input(OUT_Z)?;
        let attention = AttentionNodes::declare(g, dims.attention())?;
        Ok(Self {
            dims,
            embed,
            lstm_w,
            lstm_b,
            init_c,
            init_h,
            out_o,
            out_h,
            out_z,
            attention,
        })
    }

    /// `(h_0, c_0)` from the mean annotation. `h_0` passes through a final
    /// tanh so that `|h| <= 1` holds from the first step.
    pub fn build_init(&self, g: &mut Graph, grid: NodeId) -> Result<(NodeId, NodeId), GraphError> {
        let mean = g.mean(grid, Some(0))?;
        let c0 = self.init_c.build(g, mean, false)?;
        let h0 = self.init_h.build(g, mean, true)?;
        Ok((h0, c0))
    }

    /// `E y` for a one-hot `y`.
    pub fn build_embedding(&self, g: &mut Graph, one_hot: NodeId) -> Result<NodeId, GraphError> {
        g.matmul(self.embed, one_hot)
    }

    /// One LSTM update; gate blocks are ordered `i, f, o, g`.
    pub fn build_lstm(
        &self,
        g: &mut Graph,
        embedded: NodeId,
        h: NodeId,
        c: NodeId,
        context: NodeId,
    ) -> Result<(NodeId, NodeId), GraphError> {
        let n = self.dims.hidden;
        let x = g.concat(&[embedded, h, context])?;
        let pre = g.matmul(x, self.lstm_w)?;
        let pre = g.add(pre, self.lstm_b)?;
        let i_pre = g.slice(pre, 0, n)?;
        let f_pre = g.slice(pre, n, n)?;
        let o_pre = g.slice(pre, 2 * n, n)?;
        let g_pre = g.slice(pre, 3 * n, n)?;
        let i = g.sigmoid(i_pre)?;
        let f = g.sigmoid(f_pre)?;
        let o = g.sigmoid(o_pre)?;
        let cand = g.tanh(g_pre)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_new = g.add(keep, write)?;
        let squashed = g.tanh(c_new)?;
        let h_new = g.mul(o, squashed)?;
        Ok((h_new, c_new))
    }

    /// Deep-output logits `L_o (E y + L_h h + L_z z)`.
    pub fn build_logits(
        &self,
        g: &mut Graph,
        embedded: NodeId,
        h: NodeId,
        context: NodeId,
    ) -> Result<NodeId, GraphError> {
        let hh = g.matmul(self.out_h, h)?;
        let zz = g.matmul(self.out_z, context)?;
        let sum = g.add(embedded, hh)?;
        let sum = g.add(sum, zz)?;
        g.matmul(self.out_o, sum)
    }
}

/// Identifies an unrolled training graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CaptionGraphKey {
    pub mode: Mode,
    /// Caption length C including the end token.
    pub length: usize,
    pub locations: usize,
    pub dropout: bool,
}

/// Teacher-forced graph over a whole caption.
///
/// Soft graphs expose `loss = nll + lambda * penalty`. Hard graphs take a
/// per-step selection vector and a pair of masks: the context is
/// `sample_mask * selection_t + expect_mask * alpha_t` applied to the grid,
/// which is either a sampled annotation or the expected (ungated) context.
#[derive(Clone, Debug)]
pub struct CaptionGraph {
    pub key: CaptionGraphKey,
    pub graph: Graph,
    pub alphas: Vec<NodeId>,
    pub betas: Vec<NodeId>,
    /// `sum_t log p(y_t | ...)`
    pub log_likelihood: NodeId,
    pub nll: NodeId,
    pub penalty: Option<NodeId>,
    pub loss: Option<NodeId>,
    /// `sum_t log alpha_t[s_t]`
    pub log_selection: Option<NodeId>,
    /// `sum_t H[alpha_t]`
    pub entropy: Option<NodeId>,
}

impl CaptionGraph {
    pub fn build(dims: ModelDims, key: CaptionGraphKey) -> Result<Self, DecoderError> {
        dims.validate()?;
        if key.length == 0 || key.locations == 0 {
            return Err(DecoderError::EmptyCaption);
        }
        let mut g = Graph::new();
        let p = DecoderNodes::declare(&mut g, dims)?;
        let grid = g.input(GRID, &[key.locations, dims.features])?;
        let proj = attention::build_grid_projection(&mut g, &p.attention, grid)?;
        let (mut h, mut c) = p.build_init(&mut g, grid)?;
        let hard = key.mode == Mode::Hard;
        let masks = if hard {
            Some((g.input(SAMPLE_MASK, &[1])?, g.input(EXPECT_MASK, &[1])?))
        } else {
            None
        };

        let mut alphas = Vec::with_capacity(key.length);
        let mut betas = Vec::new();
        let mut picks = Vec::with_capacity(key.length);
        let mut log_sel = Vec::new();
        let mut entropies = Vec::new();
        for t in 0..key.length {
            let prev = g.input(prev_name(t), &[dims.vocab])?;
            let target = g.input(target_name(t), &[dims.vocab])?;
            let scores = attention::build_scores(&mut g, &p.attention, proj, h)?;
            let alpha = g.softmax(scores, 0)?;
            alphas.push(alpha);
            let context = match masks {
                None => {
                    let beta = attention::build_gate(&mut g, &p.attention, h)?;
                    betas.push(beta);
                    attention::build_context(&mut g, alpha, grid, Some(beta))?
                }
                Some((sample_mask, expect_mask)) => {
                    let sel = g.input(selection_name(t), &[key.locations])?;
                    let log_alpha = g.log_softmax(scores, 0)?;
                    log_sel.push(g.matmul(log_alpha, sel)?);
                    let plogp = g.matmul(alpha, log_alpha)?;
                    entropies.push(g.scale(plogp, -1.0)?);
                    let picked = g.mul(sel, sample_mask)?;
                    let expected = g.mul(alpha, expect_mask)?;
                    let w = g.add(picked, expected)?;
                    attention::build_context(&mut g, w, grid, None)?
                }
            };
            let embedded = p.build_embedding(&mut g, prev)?;
            let (h_new, c_new) = p.build_lstm(&mut g, embedded, h, c, context)?;
            h = h_new;
            c = c_new;
            let h_out = if key.dropout {
                let mask = g.input(dropout_name(t), &[dims.hidden])?;
                g.mul(h, mask)?
            } else {
                h
            };
            let logits = p.build_logits(&mut g, embedded, h_out, context)?;
            let log_probs = g.log_softmax(logits, 0)?;
            picks.push(g.matmul(log_probs, target)?);
        }

        let log_likelihood = sum_nodes(&mut g, &picks)?;
        g.label(log_likelihood, "log_likelihood")?;
        let nll = g.scale(log_likelihood, -1.0)?;
        g.label(nll, "nll")?;

        let mut out = Self {
            key,
            graph: Graph::new(),
            alphas: alphas.clone(),
            betas,
            log_likelihood,
            nll,
            penalty: None,
            loss: None,
            log_selection: None,
            entropy: None,
        };
        if hard {
            let ls = sum_nodes(&mut g, &log_sel)?;
            let ent = sum_nodes(&mut g, &entropies)?;
            out.log_selection = Some(g.label(ls, "log_selection")?);
            out.entropy = Some(g.label(ent, "entropy")?);
        } else {
            let col_sums = sum_nodes(&mut g, &alphas)?;
            let ones = g.constant(Tensor::filled(&[key.locations], 1.0));
            let gap = g.sub(ones, col_sums)?;
            let sq = g.square(gap)?;
            let penalty = g.sum(sq, None)?;
            g.label(penalty, "penalty")?;
            let lambda = g.input(LAMBDA, &[1])?;
            let weighted = g.mul(penalty, lambda)?;
            let loss = g.add(nll, weighted)?;
            g.label(loss, "loss")?;
            out.penalty = Some(penalty);
            out.loss = Some(loss);
        }
        out.graph = g;
        Ok(out)
    }
}

fn sum_nodes(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId, GraphError> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    Ok(acc)
}

/// Owned per-example inputs of a [`CaptionGraph`].
#[derive(Clone, Debug)]
pub struct CaptionInputs {
    pub prev: Vec<Tensor>,
    pub targets: Vec<Tensor>,
    pub dropout: Vec<Tensor>,
    pub selections: Vec<Tensor>,
    pub sample_mask: Tensor,
    pub expect_mask: Tensor,
    pub lambda: Tensor,
}

impl CaptionInputs {
    /// One-hot encodings of a teacher-forced caption. `tokens` must end with
    /// the end token; the first step is fed `bos`.
    pub fn new(tokens: &[usize], vocab: usize, bos: usize) -> Result<Self, DecoderError> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(DecoderError::TokenOutOfRange { token: bad, vocab });
        }
        if bos >= vocab {
            return Err(DecoderError::TokenOutOfRange { token: bos, vocab });
        }
        let prev = std::iter::once(bos)
            .chain(tokens.iter().copied())
            .take(tokens.len())
            .map(|t| Tensor::one_hot(vocab, t))
            .collect();
        let targets = tokens.iter().map(|&t| Tensor::one_hot(vocab, t)).collect();
        Ok(Self {
            prev,
            targets,
            dropout: Vec::new(),
            selections: Vec::new(),
            sample_mask: Tensor::scalar(1.0),
            expect_mask: Tensor::scalar(0.0),
            lambda: Tensor::scalar(0.0),
        })
    }

    pub fn bind<'a>(&'a self, b: &mut Bindings<'a>) {
        for (t, x) in self.prev.iter().enumerate() {
            b.bind(prev_name(t), x);
        }
        for (t, x) in self.targets.iter().enumerate() {
            b.bind(target_name(t), x);
        }
        for (t, x) in self.dropout.iter().enumerate() {
            b.bind(dropout_name(t), x);
        }
        for (t, x) in self.selections.iter().enumerate() {
            b.bind(selection_name(t), x);
        }
        b.bind(SAMPLE_MASK, &self.sample_mask)
            .bind(EXPECT_MASK, &self.expect_mask)
            .bind(LAMBDA, &self.lambda);
    }
}

/// Small graphs evaluated step by step at inference time.
#[derive(Clone, Debug)]
pub struct StepGraphs {
    pub locations: usize,
    pub prepare: Graph,
    pub prep_proj: NodeId,
    pub prep_h: NodeId,
    pub prep_c: NodeId,
    pub attend: Graph,
    pub att_alpha: NodeId,
    pub att_beta: NodeId,
    pub lstm: Graph,
    pub lstm_h: NodeId,
    pub lstm_c: NodeId,
    pub output: Graph,
    pub out_logits: NodeId,
    pub out_probs: NodeId,
}

pub const GRID_PROJ: &str = "grid_proj";
pub const H_PREV: &str = "h_prev";
pub const C_PREV: &str = "c_prev";
pub const PREV_EMBED: &str = "prev_embed";
pub const CONTEXT: &str = "context";
pub const H_CUR: &str = "h";

impl StepGraphs {
    pub fn build(dims: ModelDims, locations: usize) -> Result<Self, DecoderError> {
        dims.validate()?;
        let mut prepare = Graph::new();
        let p = DecoderNodes::declare(&mut prepare, dims)?;
        let grid = prepare.input(GRID, &[locations, dims.features])?;
        let prep_proj = attention::build_grid_projection(&mut prepare, &p.attention, grid)?;
        let (prep_h, prep_c) = p.build_init(&mut prepare, grid)?;

        let mut attend = Graph::new();
        let p = DecoderNodes::declare(&mut attend, dims)?;
        let proj = attend.input(GRID_PROJ, &[locations, dims.attn])?;
        let h = attend.input(H_PREV, &[dims.hidden])?;
        let scores = attention::build_scores(&mut attend, &p.attention, proj, h)?;
        let att_alpha = attend.softmax(scores, 0)?;
        let att_beta = attention::build_gate(&mut attend, &p.attention, h)?;

        let mut lstm = Graph::new();
        let p = DecoderNodes::declare(&mut lstm, dims)?;
        let emb = lstm.input(PREV_EMBED, &[dims.embed])?;
        let h = lstm.input(H_PREV, &[dims.hidden])?;
        let c = lstm.input(C_PREV, &[dims.hidden])?;
        let ctx = lstm.input(CONTEXT, &[dims.features])?;
        let (lstm_h, lstm_c) = p.build_lstm(&mut lstm, emb, h, c, ctx)?;

        let mut output = Graph::new();
        let p = DecoderNodes::declare(&mut output, dims)?;
        let emb = output.input(PREV_EMBED, &[dims.embed])?;
        let h = output.input(H_CUR, &[dims.hidden])?;
        let ctx = output.input(CONTEXT, &[dims.features])?;
        let out_logits = p.build_logits(&mut output, emb, h, ctx)?;
        let out_probs = output.softmax(out_logits, 0)?;

        Ok(Self {
            locations,
            prepare,
            prep_proj,
            prep_h,
            prep_c,
            attend,
            att_alpha,
            att_beta,
            lstm,
            lstm_h,
            lstm_c,
            output,
            out_logits,
            out_probs,
        })
    }
}
