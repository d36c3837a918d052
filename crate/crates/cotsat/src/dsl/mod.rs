//! The array-program DSL.
//!
//! A [`Graph`] holds nodes whose values are `positions × width` matrices.
//! Nodes are appended one at a time and may only reference earlier nodes, so
//! node ids are already a topological order. A [`Program`] is a graph plus a
//! root node; [`abstract_eval`] runs it exactly on a token sequence.

pub(crate) mod eval;

use std::collections::HashMap;
use std::fmt;

use ndarray::{s, Array1, Array2};
use thiserror::Error;

use crate::vocab::{CotToken, VocabError, Vocabulary};

pub use eval::{abstract_eval, next_tokens, AbstractValue, EvalError, Evaluator, BOOL_TOLERANCE};

pub type NodeId = usize;

/// Default score margin assumed for attention nodes.
pub const DEFAULT_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseKind {
    TokenEmbedding,
    PositionIndex,
    Ones,
    IsBos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareOp {
    Le,
    Lt,
    Ge,
    Gt,
    Eq,
}

/// Weights of a gated MLP: `((x·W_lin + b_lin) ⊙ relu(x·W_gate + b_gate))·W_out + b_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedMlpParams {
    pub w_lin: Array2<f64>,
    pub b_lin: Array1<f64>,
    pub w_gate: Array2<f64>,
    pub b_gate: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl GatedMlpParams {
    pub fn input_width(&self) -> usize {
        self.w_lin.nrows()
    }

    pub fn hidden_width(&self) -> usize {
        self.w_lin.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.w_out.ncols()
    }

    fn check(&self) -> Result<(), GraphError> {
        let (n, h) = self.w_lin.dim();
        let ok = self.w_gate.dim() == (n, h)
            && self.b_lin.len() == h
            && self.b_gate.len() == h
            && self.w_out.nrows() == h
            && self.b_out.len() == self.w_out.ncols();
        if ok {
            Ok(())
        } else {
            Err(GraphError::MlpShape)
        }
    }

    /// Lane-wise `relu` of a width-`w` input.
    pub fn relu(w: usize) -> Self {
        Self {
            w_lin: Array2::zeros((w, w)),
            b_lin: Array1::ones(w),
            w_gate: Array2::eye(w),
            b_gate: Array1::zeros(w),
            w_out: Array2::eye(w),
            b_out: Array1::zeros(w),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let h = self.hidden_width();
        let mut out = self.b_out.to_vec();
        for u in 0..h {
            let mut lin = self.b_lin[u];
            let mut gate = self.b_gate[u];
            for (r, &xv) in x.iter().enumerate() {
                lin += xv * self.w_lin[[r, u]];
                gate += xv * self.w_gate[[r, u]];
            }
            let act = lin * gate.max(0.0);
            if act != 0.0 {
                for (o, w) in out.iter_mut().zip(self.w_out.row(u)) {
                    *o += act * w;
                }
            }
        }
        out
    }
}

/// Where a priority rule's value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleValue {
    Node(NodeId),
    Token(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorityRule {
    pub condition: Option<NodeId>,
    pub value: RuleValue,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Base(BaseKind),
    /// `concat(inputs) · matrix`.
    Linear {
        inputs: Vec<NodeId>,
        matrix: Array2<f64>,
    },
    Elementwise {
        op: BinaryOp,
        a: NodeId,
        b: NodeId,
    },
    Compare {
        op: CompareOp,
        a: NodeId,
        b: NodeId,
    },
    /// Averaging hard attention over the positions with maximal score.
    Mean {
        q: Vec<NodeId>,
        k: Vec<NodeId>,
        v: Vec<NodeId>,
        bos_weight: f64,
        margin: Option<f64>,
    },
    SelfAttention {
        q: Vec<NodeId>,
        k: Vec<NodeId>,
        v: Vec<NodeId>,
        margin: Option<f64>,
    },
    GatedMlp {
        input: NodeId,
        params: GatedMlpParams,
    },
    /// Row `i` is row `idx[i]` of `src`. Clamped selects map indices outside
    /// `[0, i]` to the nearest valid position instead of failing.
    IndexSelect {
        src: NodeId,
        idx: NodeId,
        clamp: bool,
    },
    Slice {
        src: NodeId,
        start: usize,
        end: usize,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    Pad {
        src: NodeId,
        start: usize,
    },
    PriorityOutput {
        rules: Vec<PriorityRule>,
    },
}

impl NodeKind {
    /// Ids this node reads, in order.
    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            NodeKind::Base(_) => vec![],
            NodeKind::Linear { inputs, .. } | NodeKind::Concat { inputs } => inputs.clone(),
            NodeKind::Elementwise { a, b, .. } | NodeKind::Compare { a, b, .. } => vec![*a, *b],
            NodeKind::Mean { q, k, v, .. } | NodeKind::SelfAttention { q, k, v, .. } => {
                q.iter().chain(k).chain(v).copied().collect()
            }
            NodeKind::GatedMlp { input, .. } => vec![*input],
            NodeKind::IndexSelect { src, idx, .. } => vec![*src, *idx],
            NodeKind::Slice { src, .. } | NodeKind::Pad { src, .. } => vec![*src],
            NodeKind::PriorityOutput { rules } => rules
                .iter()
                .flat_map(|r| {
                    let v = match r.value {
                        RuleValue::Node(n) => Some(n),
                        RuleValue::Token(_) => None,
                    };
                    r.condition.into_iter().chain(v)
                })
                .collect(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            NodeKind::Base(BaseKind::TokenEmbedding) => "TokenEmbedding",
            NodeKind::Base(BaseKind::PositionIndex) => "PositionIndex",
            NodeKind::Base(BaseKind::Ones) => "Ones",
            NodeKind::Base(BaseKind::IsBos) => "IsBos",
            NodeKind::Linear { .. } => "Linear",
            NodeKind::Elementwise { .. } => "Elementwise",
            NodeKind::Compare { .. } => "Compare",
            NodeKind::Mean { .. } => "Mean",
            NodeKind::SelfAttention { .. } => "SelfAttention",
            NodeKind::GatedMlp { .. } => "GatedMlp",
            NodeKind::IndexSelect { .. } => "IndexSelect",
            NodeKind::Slice { .. } => "Slice",
            NodeKind::Concat { .. } => "Concat",
            NodeKind::Pad { .. } => "Pad",
            NodeKind::PriorityOutput { .. } => "PriorityOutput",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub width: usize,
    pub name: Option<String>,
}

/// `node 12 (b_sat)` or `node 12`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRef {
    pub id: NodeId,
    pub name: Option<String>,
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.name {
            Some(n) => write!(f, "node {} ({n})", self.id),
            None => write!(f, "node {}", self.id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("node {0} does not exist")]
    UnknownNode(NodeId),
    #[error("{op}: incompatible widths {left} and {right}")]
    WidthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{0} needs at least one input")]
    NoInputs(&'static str),
    #[error("matrix has {rows}x{cols} entries but the inputs have total width {expected}")]
    MatrixShape { rows: usize, cols: usize, expected: usize },
    #[error("gated MLP weight shapes are inconsistent")]
    MlpShape,
    #[error("slice {start}..{end} is invalid for width {width}")]
    BadSlice { start: usize, end: usize, width: usize },
    #[error("cannot pad width {width} into {out_width} lanes at offset {start}")]
    BadPad {
        width: usize,
        out_width: usize,
        start: usize,
    },
    #[error("index input must have width 1, got {0}")]
    IndexWidth(usize),
    #[error("priority rule {rule}: {reason}")]
    BadRule { rule: usize, reason: String },
    #[error("output width must be positive")]
    ZeroWidth,
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

/// An append-only computation graph over one vocabulary.
#[derive(Debug, Clone)]
pub struct Graph {
    vocab: Vocabulary,
    nodes: Vec<Node>,
    bases: HashMap<&'static str, NodeId>,
}

impl Graph {
    pub fn new(vocab: Vocabulary) -> Self {
        Self {
            vocab,
            nodes: Vec::new(),
            bases: HashMap::new(),
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn width(&self, id: NodeId) -> usize {
        self.nodes[id].width
    }

    pub fn node_ref(&self, id: NodeId) -> NodeRef {
        NodeRef {
            id,
            name: self.nodes[id].name.clone(),
        }
    }

    /// Attaches a name for diagnostics and lookup.
    pub fn named(&mut self, id: NodeId, name: &str) -> NodeId {
        self.nodes[id].name = Some(name.to_string());
        id
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .rev()
            .find(|n| n.name.as_deref() == Some(name))
            .map(|n| n.id)
    }

    fn check(&self, id: NodeId) -> Result<usize, GraphError> {
        self.nodes.get(id).map(|n| n.width).ok_or(GraphError::UnknownNode(id))
    }

    fn total_width(&self, ids: &[NodeId]) -> Result<usize, GraphError> {
        ids.iter().map(|&i| self.check(i)).sum()
    }

    fn push(&mut self, kind: NodeKind, width: usize) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            id,
            kind,
            width,
            name: None,
        });
        id
    }

    /// The base input of the given kind; repeated calls return the same node.
    pub fn base(&mut self, kind: BaseKind) -> NodeId {
        let key = NodeKind::Base(kind).label();
        if let Some(&id) = self.bases.get(key) {
            return id;
        }
        let width = match kind {
            BaseKind::TokenEmbedding => self.vocab.len(),
            _ => 1,
        };
        let id = self.push(NodeKind::Base(kind), width);
        self.bases.insert(key, id);
        id
    }

    pub fn tokens(&mut self) -> NodeId {
        self.base(BaseKind::TokenEmbedding)
    }

    pub fn indices(&mut self) -> NodeId {
        self.base(BaseKind::PositionIndex)
    }

    pub fn ones(&mut self) -> NodeId {
        self.base(BaseKind::Ones)
    }

    pub fn is_bos(&mut self) -> NodeId {
        self.base(BaseKind::IsBos)
    }

    pub fn linear(&mut self, inputs: &[NodeId], matrix: Array2<f64>) -> Result<NodeId, GraphError> {
        if inputs.is_empty() {
            return Err(GraphError::NoInputs("linear"));
        }
        let expected = self.total_width(inputs)?;
        let (rows, cols) = matrix.dim();
        if rows != expected || cols == 0 {
            return Err(GraphError::MatrixShape { rows, cols, expected });
        }
        Ok(self.push(
            NodeKind::Linear {
                inputs: inputs.to_vec(),
                matrix,
            },
            cols,
        ))
    }

    fn broadcast_width(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<usize, GraphError> {
        let (wa, wb) = (self.check(a)?, self.check(b)?);
        match (wa, wb) {
            _ if wa == wb => Ok(wa),
            (1, w) | (w, 1) => Ok(w),
            _ => Err(GraphError::WidthMismatch {
                op,
                left: wa,
                right: wb,
            }),
        }
    }

    pub fn binary(&mut self, op: BinaryOp, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let w = self.broadcast_width("elementwise", a, b)?;
        Ok(self.push(NodeKind::Elementwise { op, a, b }, w))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn and(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(BinaryOp::And, a, b)
    }

    pub fn or(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(BinaryOp::Or, a, b)
    }

    pub fn compare(&mut self, op: CompareOp, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let w = self.broadcast_width("compare", a, b)?;
        Ok(self.push(NodeKind::Compare { op, a, b }, w))
    }

    /// `k · x`.
    pub fn scale(&mut self, x: NodeId, k: f64) -> Result<NodeId, GraphError> {
        let w = self.check(x)?;
        self.linear(&[x], Array2::eye(w) * k)
    }

    /// `a · x + b` lane-wise, the constant routed through the ones input.
    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> Result<NodeId, GraphError> {
        let w = self.check(x)?;
        let ones = self.ones();
        let mut m = Array2::zeros((w + 1, w));
        for i in 0..w {
            m[[i, i]] = a;
            m[[w, i]] = b;
        }
        self.linear(&[x, ones], m)
    }

    /// `1 - x`.
    pub fn not(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.affine(x, -1.0, 1.0)
    }

    /// A position-independent row.
    pub fn constant(&mut self, values: &[f64]) -> Result<NodeId, GraphError> {
        if values.is_empty() {
            return Err(GraphError::ZeroWidth);
        }
        let ones = self.ones();
        let m = Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("one row");
        self.linear(&[ones], m)
    }

    /// Sum of all lanes, width 1.
    pub fn sum_lanes(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let w = self.check(x)?;
        self.linear(&[x], Array2::ones((w, 1)))
    }

    fn attention_lists(&self, q: &[NodeId], k: &[NodeId], v: &[NodeId]) -> Result<usize, GraphError> {
        if q.is_empty() || k.is_empty() || v.is_empty() {
            return Err(GraphError::NoInputs("attention"));
        }
        let (wq, wk) = (self.total_width(q)?, self.total_width(k)?);
        if wq != wk {
            return Err(GraphError::WidthMismatch {
                op: "attention q/k",
                left: wq,
                right: wk,
            });
        }
        self.total_width(v)
    }

    pub fn mean(&mut self, q: &[NodeId], k: &[NodeId], v: &[NodeId], bos_weight: f64) -> Result<NodeId, GraphError> {
        self.mean_with_margin(q, k, v, bos_weight, Some(DEFAULT_MARGIN))
    }

    /// A mean whose score gaps on valid inputs are at least `margin`.
    pub fn mean_with_margin(
        &mut self,
        q: &[NodeId],
        k: &[NodeId],
        v: &[NodeId],
        bos_weight: f64,
        margin: Option<f64>,
    ) -> Result<NodeId, GraphError> {
        let w = self.attention_lists(q, k, v)?;
        Ok(self.push(
            NodeKind::Mean {
                q: q.to_vec(),
                k: k.to_vec(),
                v: v.to_vec(),
                bos_weight,
                margin,
            },
            w,
        ))
    }

    pub fn self_attention(&mut self, q: &[NodeId], k: &[NodeId], v: &[NodeId]) -> Result<NodeId, GraphError> {
        let w = self.attention_lists(q, k, v)?;
        Ok(self.push(
            NodeKind::SelfAttention {
                q: q.to_vec(),
                k: k.to_vec(),
                v: v.to_vec(),
                margin: Some(DEFAULT_MARGIN),
            },
            w,
        ))
    }

    pub fn gated_mlp(&mut self, input: NodeId, params: GatedMlpParams) -> Result<NodeId, GraphError> {
        let w = self.check(input)?;
        params.check()?;
        if params.input_width() != w {
            return Err(GraphError::WidthMismatch {
                op: "gated mlp",
                left: w,
                right: params.input_width(),
            });
        }
        let out = params.output_width();
        Ok(self.push(NodeKind::GatedMlp { input, params }, out))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let w = self.check(x)?;
        self.gated_mlp(x, GatedMlpParams::relu(w))
    }

    /// Copies row `idx[i]` of `src`; indices outside `[0, i]` are errors.
    pub fn index_select(&mut self, src: NodeId, idx: NodeId) -> Result<NodeId, GraphError> {
        self.select(src, idx, false)
    }

    /// Like [`Graph::index_select`] but clamps indices into `[0, i]`.
    pub fn index_select_clamped(&mut self, src: NodeId, idx: NodeId) -> Result<NodeId, GraphError> {
        self.select(src, idx, true)
    }

    fn select(&mut self, src: NodeId, idx: NodeId, clamp: bool) -> Result<NodeId, GraphError> {
        let w = self.check(src)?;
        let wi = self.check(idx)?;
        if wi != 1 {
            return Err(GraphError::IndexWidth(wi));
        }
        Ok(self.push(NodeKind::IndexSelect { src, idx, clamp }, w))
    }

    pub fn slice(&mut self, src: NodeId, start: usize, end: usize) -> Result<NodeId, GraphError> {
        let width = self.check(src)?;
        if start >= end || end > width {
            return Err(GraphError::BadSlice { start, end, width });
        }
        Ok(self.push(NodeKind::Slice { src, start, end }, end - start))
    }

    pub fn column(&mut self, src: NodeId, lane: usize) -> Result<NodeId, GraphError> {
        self.slice(src, lane, lane + 1)
    }

    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId, GraphError> {
        if inputs.is_empty() {
            return Err(GraphError::NoInputs("concat"));
        }
        let w = self.total_width(inputs)?;
        Ok(self.push(
            NodeKind::Concat {
                inputs: inputs.to_vec(),
            },
            w,
        ))
    }

    /// Places `src` at lanes `start..start+width` of a zero row of `out_width`.
    pub fn pad(&mut self, src: NodeId, out_width: usize, start: usize) -> Result<NodeId, GraphError> {
        let width = self.check(src)?;
        if start + width > out_width {
            return Err(GraphError::BadPad {
                width,
                out_width,
                start,
            });
        }
        Ok(self.push(NodeKind::Pad { src, start }, out_width))
    }

    /// `Σ weight · condition · value` over the rules; the decoded token is the
    /// argmax lane.
    pub fn priority_output(&mut self, width: usize, rules: Vec<PriorityRule>) -> Result<NodeId, GraphError> {
        if width == 0 {
            return Err(GraphError::ZeroWidth);
        }
        for (i, r) in rules.iter().enumerate() {
            let bad = |reason: String| GraphError::BadRule { rule: i, reason };
            if let Some(c) = r.condition {
                let wc = self.check(c)?;
                if wc != 1 {
                    return Err(bad(format!("condition has width {wc}")));
                }
            }
            match r.value {
                RuleValue::Node(n) => {
                    let wv = self.check(n)?;
                    if wv != width {
                        return Err(bad(format!("value has width {wv}, expected {width}")));
                    }
                }
                RuleValue::Token(t) if t >= width => {
                    return Err(bad(format!("token {t} is outside {width} lanes")));
                }
                RuleValue::Token(_) => {}
            }
            if !r.weight.is_finite() {
                return Err(bad("weight is not finite".into()));
            }
        }
        Ok(self.push(NodeKind::PriorityOutput { rules }, width))
    }

    /// Token id by token string.
    pub fn token_id(&self, token: &str) -> Result<usize, GraphError> {
        Ok(self.vocab.require(token)?)
    }
}

/// A graph with a designated output node.
#[derive(Debug, Clone)]
pub struct Program {
    graph: Graph,
    root: NodeId,
}

impl Program {
    pub fn new(graph: Graph, root: NodeId) -> Result<Self, GraphError> {
        graph.check(root)?;
        Ok(Self { graph, root })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.graph.vocab()
    }

    /// Marks the nodes the root depends on, the root included.
    pub fn live_nodes(&self) -> Vec<bool> {
        let mut live = vec![false; self.graph.len()];
        live[self.root] = true;
        for id in (0..=self.root).rev() {
            if live[id] {
                for i in self.graph.node(id).kind.inputs() {
                    live[i] = true;
                }
            }
        }
        live
    }

    pub fn encode(&self, tokens: &[CotToken]) -> Result<Vec<usize>, VocabError> {
        self.vocab().encode(tokens)
    }
}

/// The argmax lane, lowest lane on exact ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Gap between the largest and second largest entries (infinite for one lane).
pub fn top_margin(row: &[f64]) -> f64 {
    let best = argmax(row);
    let second = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    row[best] - second
}

/// Rows `rows` of lanes `lanes` as an owned matrix, for tests and reports.
pub fn submatrix(v: &AbstractValue, rows: std::ops::Range<usize>, lanes: std::ops::Range<usize>) -> Array2<f64> {
    v.slice(s![rows, lanes]).to_owned()
}
