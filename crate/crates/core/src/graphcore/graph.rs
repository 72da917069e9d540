use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::{GraphError, Tensor};

/// Index of a node inside its [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Input,
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    /// Elementwise; the right operand may broadcast (see [`broadcasts_into`]).
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softmax(NodeId, usize),
    LogSoftmax(NodeId, usize),
    Sum(NodeId, Option<usize>),
    Mean(NodeId, Option<usize>),
    Concat(Vec<NodeId>),
    Slice {
        src: NodeId,
        start: usize,
        len: usize,
    },
    Scale(NodeId, f64),
    Square(NodeId),
}

impl Op {
    pub(crate) fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Constant(_) => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::Scale(a, _)
            | Op::Square(a) => vec![*a],
            Op::Slice { src, .. } => vec![*src],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) shape: Vec<usize>,
    pub(crate) label: Option<String>,
}

/// A static computation DAG.
///
/// Nodes are appended in construction order and may only reference earlier
/// nodes, so insertion order is a topological order. Shapes are checked as
/// nodes are added. Once built a graph is immutable and can be evaluated any
/// number of times (from any thread) with different [`Bindings`].
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    inputs: HashMap<String, NodeId>,
    labels: HashMap<String, NodeId>,
}

/// `small` broadcasts into `big` when the shapes match, `small` has one
/// element, or `small` is a trailing suffix of `big` (row-wise broadcast).
fn broadcasts_into(small: &[usize], big: &[usize]) -> bool {
    let n: usize = small.iter().product();
    n == 1 || (small.len() <= big.len() && big.ends_with(small))
}

fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize, Vec<usize>) {
    // (lane count, lane length, stride, lane offsets)
    match (shape.len(), axis) {
        (1, 0) => (1, shape[0], 1, vec![0]),
        (2, 1) => (shape[0], shape[1], 1, (0..shape[0]).map(|r| r * shape[1]).collect()),
        (2, 0) => (shape[1], shape[0], shape[1], (0..shape[1]).collect()),
        _ => unreachable!("axis validated at construction"),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node.0].shape
    }

    /// Looks up a node by input name or label.
    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).or_else(|| self.labels.get(name)).copied()
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    pub(crate) fn describe(&self, node: NodeId) -> String {
        match self.nodes.get(node.0).and_then(|n| n.label.as_deref()) {
            Some(label) => format!("#{} ({label})", node.0),
            None => format!("#{}", node.0),
        }
    }

    fn check(&self, id: NodeId) -> Result<&Node, GraphError> {
        self.nodes.get(id.0).ok_or(GraphError::UnknownNode(id.0))
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape, label: None });
        id
    }

    fn mismatch(&self, op: &'static str, detail: String) -> GraphError {
        GraphError::ShapeMismatch {
            node: format!("#{}", self.nodes.len()),
            op,
            detail,
        }
    }

    /// Attaches a lookup label to a node. Labels must be unique.
    pub fn label(&mut self, node: NodeId, label: impl Into<String>) -> Result<NodeId, GraphError> {
        let label = label.into();
        self.check(node)?;
        if self.labels.contains_key(&label) || self.inputs.contains_key(&label) {
            return Err(GraphError::DuplicateName(label));
        }
        self.nodes[node.0].label = Some(label.clone());
        self.labels.insert(label, node);
        Ok(node)
    }

    pub fn input(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<NodeId, GraphError> {
        let name = name.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(GraphError::InvalidShape(shape.to_vec()));
        }
        if self.inputs.contains_key(&name) || self.labels.contains_key(&name) {
            return Err(GraphError::DuplicateName(name));
        }
        let id = self.push(Op::Input, shape.to_vec());
        self.nodes[id.0].label = Some(name.clone());
        self.inputs.insert(name, id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let sa = self.check(a)?.shape.clone();
        let sb = self.check(b)?.shape.clone();
        let shape = match (sa.as_slice(), sb.as_slice()) {
            ([p, q], [q2, r]) if q == q2 => vec![*p, *r],
            ([p, q], [q2]) if q == q2 => vec![*p],
            ([q], [q2, r]) if q == q2 => vec![*r],
            ([q], [q2]) if q == q2 => vec![1],
            _ => return Err(self.mismatch("matmul", format!("{sa:?} x {sb:?}"))),
        };
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    fn elementwise2(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        make: fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId, GraphError> {
        let sa = self.check(a)?.shape.clone();
        let sb = self.check(b)?.shape.clone();
        if broadcasts_into(&sb, &sa) {
            Ok(self.push(make(a, b), sa))
        } else if broadcasts_into(&sa, &sb) {
            Ok(self.push(make(b, a), sb))
        } else {
            Err(self.mismatch(name, format!("{sa:?} vs {sb:?}")))
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise2(a, b, "add", Op::Add)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise2(a, b, "mul", Op::Mul)
    }

    /// `a - b`, built from add and scale.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    fn unary(&mut self, a: NodeId, op: Op) -> Result<NodeId, GraphError> {
        let shape = self.check(a)?.shape.clone();
        Ok(self.push(op, shape))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.unary(a, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.unary(a, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.unary(a, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.unary(a, Op::Log(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.unary(a, Op::Square(a))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, GraphError> {
        self.unary(a, Op::Scale(a, factor))
    }

    fn check_axis(&self, a: NodeId, axis: usize, op: &'static str) -> Result<Vec<usize>, GraphError> {
        let shape = self.check(a)?.shape.clone();
        if shape.len() > 2 || axis >= shape.len() {
            return Err(self.mismatch(op, format!("axis {axis} on shape {shape:?}")));
        }
        Ok(shape)
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, GraphError> {
        let shape = self.check_axis(a, axis, "softmax")?;
        Ok(self.push(Op::Softmax(a, axis), shape))
    }

    /// Numerically stable `log(softmax(a))`.
    pub fn log_softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, GraphError> {
        let shape = self.check_axis(a, axis, "log_softmax")?;
        Ok(self.push(Op::LogSoftmax(a, axis), shape))
    }

    fn reduced_shape(&self, a: NodeId, axis: Option<usize>, op: &'static str) -> Result<Vec<usize>, GraphError> {
        match axis {
            None => {
                self.check(a)?;
                Ok(vec![1])
            }
            Some(axis) => {
                let shape = self.check_axis(a, axis, op)?;
                Ok(match shape.len() {
                    1 => vec![1],
                    _ => vec![shape[1 - axis]],
                })
            }
        }
    }

    /// Sum over one axis, or over everything when `axis` is `None`.
    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId, GraphError> {
        let shape = self.reduced_shape(a, axis, "sum")?;
        Ok(self.push(Op::Sum(a, axis), shape))
    }

    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId, GraphError> {
        let shape = self.reduced_shape(a, axis, "mean")?;
        Ok(self.push(Op::Mean(a, axis), shape))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        let Some(first) = parts.first() else {
            return Err(self.mismatch("concat", "no operands".into()));
        };
        let first_shape = self.check(*first)?.shape.clone();
        let mut rows = 0;
        for &p in parts {
            let s = &self.check(p)?.shape;
            if s.len() != first_shape.len() || s[1..] != first_shape[1..] || s.len() > 2 {
                return Err(self.mismatch("concat", format!("{first_shape:?} vs {s:?}")));
            }
            rows += s[0];
        }
        let mut shape = first_shape;
        shape[0] = rows;
        Ok(self.push(Op::Concat(parts.to_vec()), shape))
    }

    /// Rows `start..start + len` along axis 0.
    pub fn slice(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId, GraphError> {
        let mut shape = self.check(src)?.shape.clone();
        if len == 0 || start + len > shape[0] || shape.len() > 2 {
            return Err(self.mismatch("slice", format!("{start}..{} of {shape:?}", start + len)));
        }
        shape[0] = len;
        Ok(self.push(Op::Slice { src, start, len }, shape))
    }
}

/// Named input values for one evaluation. Tensors are borrowed.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a> {
    values: HashMap<String, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &'a Tensor) -> &mut Self {
        self.values.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.values.get(name).copied()
    }
}

/// Forward values of every node in a graph.
#[derive(Clone, Debug)]
pub struct Evaluation<'a> {
    values: Vec<Cow<'a, Tensor>>,
}

impl Evaluation<'_> {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }

    pub fn scalar(&self, node: NodeId) -> f64 {
        self.values[node.0].item()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values of all labelled nodes (inputs included), keyed by name.
    pub fn named(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        graph
            .nodes
            .iter()
            .zip(&self.values)
            .filter_map(|(n, v)| n.label.clone().map(|l| (l, v.clone().into_owned())))
            .collect()
    }
}

/// Runs the forward pass.
///
/// Every input must be bound with a tensor of exactly its declared shape.
/// A node producing NaN or infinity aborts evaluation with
/// [`GraphError::NonFinite`] naming the node.
pub fn evaluate<'a>(graph: &'a Graph, bindings: &Bindings<'a>) -> Result<Evaluation<'a>, GraphError> {
    let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(graph.nodes.len());
    for (idx, node) in graph.nodes.iter().enumerate() {
        let value: Cow<'a, Tensor> = match &node.op {
            Op::Input => {
                let name = node.label.as_deref().unwrap_or_default();
                let bound = bindings
                    .get(name)
                    .ok_or_else(|| GraphError::Unbound(name.to_string()))?;
                if bound.shape() != node.shape.as_slice() {
                    return Err(GraphError::BindingShape {
                        name: name.to_string(),
                        expected: node.shape.clone(),
                        found: bound.shape().to_vec(),
                    });
                }
                Cow::Borrowed(bound)
            }
            Op::Constant(t) => Cow::Borrowed(t),
            op => Cow::Owned(forward_op(op, &node.shape, &values)),
        };
        if !value.is_finite() {
            return Err(GraphError::NonFinite(graph.describe(NodeId(idx))));
        }
        values.push(value);
    }
    Ok(Evaluation { values })
}

/// Row-major 2-D view dimensions of a matmul operand.
fn mm_dims(shape: &[usize], left: bool) -> (usize, usize) {
    match shape {
        [r, c] => (*r, *c),
        [n] if left => (1, *n),
        [n] => (*n, 1),
        _ => unreachable!(),
    }
}

/// C (r x c) = A (r x k) * B (k x c)
fn mm(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// A (r x k) = G (r x c) * B^T where B is (k x c)
fn mm_nt(g: &[f64], b: &[f64], r: usize, c: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * k];
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        for p in 0..k {
            let brow = &b[p * c..(p + 1) * c];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// B (k x c) = A^T * G where A is (r x k) and G is (r x c)
fn mm_tn(a: &[f64], g: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * c];
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * c..(p + 1) * c];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn forward_op(op: &Op, shape: &[usize], values: &[Cow<'_, Tensor>]) -> Tensor {
    let v = |id: &NodeId| values[id.0].as_ref();
    let data = match op {
        Op::Input | Op::Constant(_) => unreachable!(),
        Op::MatMul(a, b) => {
            let (ta, tb) = (v(a), v(b));
            let (r, k) = mm_dims(ta.shape(), true);
            let (_, c) = mm_dims(tb.shape(), false);
            mm(ta.data(), tb.data(), r, k, c)
        }
        Op::Add(a, b) => {
            let (ta, tb) = (v(a), v(b));
            let n = tb.len();
            ta.data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + tb.data()[i % n])
                .collect()
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (v(a), v(b));
            let n = tb.len();
            ta.data()
                .iter()
                .enumerate()
                .map(|(i, x)| x * tb.data()[i % n])
                .collect()
        }
        Op::Sigmoid(a) => v(a).data().iter().map(|&x| sigmoid(x)).collect(),
        Op::Tanh(a) => v(a).data().iter().map(|x| x.tanh()).collect(),
        Op::Exp(a) => v(a).data().iter().map(|x| x.exp()).collect(),
        Op::Log(a) => v(a).data().iter().map(|x| x.ln()).collect(),
        Op::Square(a) => v(a).data().iter().map(|x| x * x).collect(),
        Op::Scale(a, f) => v(a).data().iter().map(|x| x * f).collect(),
        Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
            let t = v(a);
            let log = matches!(op, Op::LogSoftmax(..));
            let mut out = vec![0.0; t.len()];
            let (_, len, stride, offsets) = lanes(t.shape(), *axis);
            for off in offsets {
                let idx = |j: usize| off + j * stride;
                let max = (0..len).map(|j| t.data()[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = (0..len).map(|j| (t.data()[idx(j)] - max).exp()).sum();
                let log_total = total.ln();
                for j in 0..len {
                    let shifted = t.data()[idx(j)] - max;
                    out[idx(j)] = if log {
                        shifted - log_total
                    } else {
                        shifted.exp() / total
                    };
                }
            }
            out
        }
        Op::Sum(a, axis) | Op::Mean(a, axis) => {
            let t = v(a);
            let mean = matches!(op, Op::Mean(..));
            match axis {
                None => {
                    let s = t.sum();
                    vec![if mean { s / t.len() as f64 } else { s }]
                }
                Some(axis) => {
                    let (count, len, stride, offsets) = lanes(t.shape(), *axis);
                    let mut out = vec![0.0; count];
                    for (o, off) in out.iter_mut().zip(offsets) {
                        let s: f64 = (0..len).map(|j| t.data()[off + j * stride]).sum();
                        *o = if mean { s / len as f64 } else { s };
                    }
                    out
                }
            }
        }
        Op::Concat(parts) => parts.iter().flat_map(|p| v(p).data().iter().copied()).collect(),
        Op::Slice { src, start, len } => {
            let t = v(src);
            let c = t.len() / t.rows();
            t.data()[start * c..(start + len) * c].to_vec()
        }
    };
    Tensor::new(shape, data).expect("shape validated at construction")
}

/// Gradients keyed by input name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    entries: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.entries.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `self += factor * other`, inserting entries missing from `self`.
    pub fn accumulate(&mut self, other: &GradientMap, factor: f64) {
        for (name, g) in &other.entries {
            match self.entries.get_mut(name) {
                Some(mine) => mine.add_scaled(g, factor),
                None => {
                    self.entries.insert(name.clone(), g.scale(factor));
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.entries.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries.values().map(Tensor::squared_norm).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    /// First entry holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
    }

    /// Flattens all entries in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.values().flat_map(|t| t.data().iter().copied()).collect()
    }
}

impl FromIterator<(String, Tensor)> for GradientMap {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Reverse-mode gradient of a scalar node with respect to named inputs.
pub fn backward(graph: &Graph, eval: &Evaluation<'_>, output: NodeId, wrt: &[&str]) -> Result<GradientMap, GraphError> {
    backward_seeded(graph, eval, &[(output, 1.0)], wrt)
}

/// Gradient of `sum_k weight_k * output_k` over several scalar nodes.
///
/// Lets one backward sweep produce a weighted combination of objectives
/// sharing a single forward pass.
pub fn backward_seeded(
    graph: &Graph,
    eval: &Evaluation<'_>,
    seeds: &[(NodeId, f64)],
    wrt: &[&str],
) -> Result<GradientMap, GraphError> {
    if eval.values.len() != graph.nodes.len() {
        return Err(GraphError::StaleEvaluation);
    }
    for &(out, _) in seeds {
        let node = graph.check(out)?;
        if node.shape != [1] {
            return Err(GraphError::NonScalarOutput {
                node: graph.describe(out),
                shape: node.shape.clone(),
            });
        }
    }
    let mut targets = Vec::with_capacity(wrt.len());
    for name in wrt {
        let id = *graph
            .inputs
            .get(*name)
            .ok_or_else(|| GraphError::NotAnInput(name.to_string()))?;
        targets.push((name.to_string(), id));
    }

    // Nodes that depend on some requested input; adjoints are only needed there.
    let n = graph.nodes.len();
    let mut needed = vec![false; n];
    for (_, id) in &targets {
        needed[id.0] = true;
    }
    for (i, node) in graph.nodes.iter().enumerate() {
        if !needed[i] && node.op.operands().iter().any(|o| needed[o.0]) {
            needed[i] = true;
        }
    }

    let mut adj: Vec<Option<Tensor>> = vec![None; n];
    for &(out, weight) in seeds {
        if needed[out.0] {
            add_into(&mut adj[out.0], &Tensor::scalar(weight));
        }
    }

    for i in (0..n).rev() {
        let Some(g) = adj[i].take() else { continue };
        let node = &graph.nodes[i];
        if matches!(node.op, Op::Input) {
            adj[i] = Some(g);
            continue;
        }
        propagate(&node.op, &g, NodeId(i), eval, &needed, &mut adj);
    }

    let mut grads = GradientMap::new();
    for (name, id) in targets {
        let grad = adj[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&graph.nodes[id.0].shape));
        grads.insert(name, grad);
    }
    Ok(grads)
}

fn add_into(slot: &mut Option<Tensor>, value: &Tensor) {
    match slot {
        Some(t) => t.add_scaled(value, 1.0),
        None => *slot = Some(value.clone()),
    }
}

fn add_data(slot: &mut Option<Tensor>, shape: &[usize], data: Vec<f64>) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor::new(shape, data).expect("adjoint shape")),
    }
}

fn propagate(op: &Op, g: &Tensor, this: NodeId, eval: &Evaluation<'_>, needed: &[bool], adj: &mut [Option<Tensor>]) {
    let val = |id: NodeId| eval.values[id.0].as_ref();
    let y = val(this);
    let gd = g.data();
    match op {
        Op::Input | Op::Constant(_) => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (r, k) = mm_dims(ta.shape(), true);
            let (_, c) = mm_dims(tb.shape(), false);
            if needed[a.0] {
                let da = mm_nt(gd, tb.data(), r, c, k);
                add_data(&mut adj[a.0], ta.shape(), da);
            }
            if needed[b.0] {
                let db = mm_tn(ta.data(), gd, r, k, c);
                add_data(&mut adj[b.0], tb.shape(), db);
            }
        }
        Op::Add(a, b) => {
            if needed[a.0] {
                add_into(&mut adj[a.0], g);
            }
            if needed[b.0] {
                let tb = val(*b);
                let m = tb.len();
                let mut db = vec![0.0; m];
                for (i, x) in gd.iter().enumerate() {
                    db[i % m] += x;
                }
                add_data(&mut adj[b.0], tb.shape(), db);
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let m = tb.len();
            if needed[a.0] {
                let da = gd.iter().enumerate().map(|(i, x)| x * tb.data()[i % m]).collect();
                add_data(&mut adj[a.0], ta.shape(), da);
            }
            if needed[b.0] {
                let mut db = vec![0.0; m];
                for (i, x) in gd.iter().enumerate() {
                    db[i % m] += x * ta.data()[i];
                }
                add_data(&mut adj[b.0], tb.shape(), db);
            }
        }
        Op::Sigmoid(a) | Op::Tanh(a) | Op::Exp(a) | Op::Log(a) | Op::Square(a) | Op::Scale(a, _) => {
            if !needed[a.0] {
                return;
            }
            let x = val(*a).data();
            let yd = y.data();
            let d: Vec<f64> = (0..gd.len())
                .map(|i| {
                    gd[i]
                        * match op {
                            Op::Sigmoid(_) => yd[i] * (1.0 - yd[i]),
                            Op::Tanh(_) => 1.0 - yd[i] * yd[i],
                            Op::Exp(_) => yd[i],
                            Op::Log(_) => 1.0 / x[i],
                            Op::Square(_) => 2.0 * x[i],
                            Op::Scale(_, f) => *f,
                            _ => unreachable!(),
                        }
                })
                .collect();
            add_data(&mut adj[a.0], y.shape(), d);
        }
        Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
            if !needed[a.0] {
                return;
            }
            let yd = y.data();
            let mut d = vec![0.0; yd.len()];
            let (_, len, stride, offsets) = lanes(y.shape(), *axis);
            for off in offsets {
                let idx = |j: usize| off + j * stride;
                if matches!(op, Op::Softmax(..)) {
                    let dot: f64 = (0..len).map(|j| gd[idx(j)] * yd[idx(j)]).sum();
                    for j in 0..len {
                        d[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot);
                    }
                } else {
                    let total: f64 = (0..len).map(|j| gd[idx(j)]).sum();
                    for j in 0..len {
                        d[idx(j)] = gd[idx(j)] - yd[idx(j)].exp() * total;
                    }
                }
            }
            add_data(&mut adj[a.0], y.shape(), d);
        }
        Op::Sum(a, axis) | Op::Mean(a, axis) => {
            if !needed[a.0] {
                return;
            }
            let src = val(*a);
            let mean = matches!(op, Op::Mean(..));
            let mut d = vec![0.0; src.len()];
            match axis {
                None => {
                    let s = if mean { gd[0] / src.len() as f64 } else { gd[0] };
                    d.iter_mut().for_each(|v| *v = s);
                }
                Some(axis) => {
                    let (_, len, stride, offsets) = lanes(src.shape(), *axis);
                    for (lane, off) in offsets.into_iter().enumerate() {
                        let s = if mean { gd[lane] / len as f64 } else { gd[lane] };
                        for j in 0..len {
                            d[off + j * stride] = s;
                        }
                    }
                }
            }
            add_data(&mut adj[a.0], src.shape(), d);
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let t = val(*p);
                if needed[p.0] {
                    add_data(&mut adj[p.0], t.shape(), gd[offset..offset + t.len()].to_vec());
                }
                offset += t.len();
            }
        }
        Op::Slice { src, start, .. } => {
            if !needed[src.0] {
                return;
            }
            let t = val(*src);
            let c = t.len() / t.rows();
            let mut d = vec![0.0; t.len()];
            d[start * c..start * c + gd.len()].copy_from_slice(gd);
            add_data(&mut adj[src.0], t.shape(), d);
        }
    }
}
