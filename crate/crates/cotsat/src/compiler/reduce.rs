//! Lowering of DSL programs to the base operations a transformer executes.

use ndarray::{s, Array1, Array2};

use super::primitives::{build_reglu_for_mul, build_reglu_for_relu};
use crate::dsl::{BaseKind, BinaryOp, CompareOp, GatedMlpParams, NodeId, NodeKind, NodeRef, Program, RuleValue};
use crate::vocab::Vocabulary;

pub type BaseId = usize;

/// Score gap of the squared-distance key used for position lookups.
pub const INDEX_MARGIN: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub enum BaseOp {
    /// Row `embedding[token]`.
    Token {
        embedding: Array2<f64>,
    },
    /// The position index, width 1.
    Position,
    /// `Σ x_t · M_t` over materialized nodes.
    Linear {
        terms: Vec<(BaseId, Array2<f64>)>,
    },
    GatedMlp {
        input: BaseId,
        params: GatedMlpParams,
    },
    /// Saturated attention `softmax(q·k)·v`; `margin` is the guaranteed gap
    /// between the top score and any other score on valid inputs.
    Attention {
        q: BaseId,
        k: BaseId,
        v: BaseId,
        margin: Option<f64>,
    },
}

impl BaseOp {
    /// Linear nodes are folded into their consumers; everything else owns
    /// residual lanes.
    pub fn is_materialized(&self) -> bool {
        !matches!(self, BaseOp::Linear { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            BaseOp::Token { .. } => "Token",
            BaseOp::Position => "Position",
            BaseOp::Linear { .. } => "Linear",
            BaseOp::GatedMlp { .. } => "GatedMlp",
            BaseOp::Attention { .. } => "Attention",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseNode {
    pub op: BaseOp,
    pub width: usize,
    /// The DSL node this was lowered from, for diagnostics.
    pub origin: Option<NodeRef>,
}

/// A program over [`BaseOp`]s. Ids are topologically ordered.
#[derive(Debug, Clone)]
pub struct ReducedGraph {
    vocab: Vocabulary,
    nodes: Vec<BaseNode>,
    root: BaseId,
}

impl ReducedGraph {
    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn nodes(&self) -> &[BaseNode] {
        &self.nodes
    }

    pub fn node(&self, id: BaseId) -> &BaseNode {
        &self.nodes[id]
    }

    pub fn root(&self) -> BaseId {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `id` as a sum of materialized nodes times matrices.
    pub fn closure(&self, id: BaseId) -> Vec<(BaseId, Array2<f64>)> {
        match &self.nodes[id].op {
            BaseOp::Linear { terms } => terms.clone(),
            _ => vec![(id, Array2::eye(self.nodes[id].width))],
        }
    }

    /// Materialized nodes `id` reads directly (through at most one fused
    /// linear map).
    pub fn dependencies(&self, id: BaseId) -> Vec<BaseId> {
        let mut deps: Vec<BaseId> = match &self.nodes[id].op {
            BaseOp::Token { .. } | BaseOp::Position => vec![],
            BaseOp::Linear { terms } => terms.iter().map(|(t, _)| *t).collect(),
            BaseOp::GatedMlp { input, .. } => self.closure(*input).into_iter().map(|(t, _)| t).collect(),
            BaseOp::Attention { q, k, v, .. } => [*q, *k, *v]
                .iter()
                .flat_map(|&x| self.closure(x).into_iter().map(|(t, _)| t))
                .collect(),
        };
        deps.sort_unstable();
        deps.dedup();
        deps
    }

    /// Nodes the root depends on, the root included.
    pub fn live(&self) -> Vec<bool> {
        let mut live = vec![false; self.nodes.len()];
        live[self.root] = true;
        for id in (0..self.nodes.len()).rev() {
            if !live[id] {
                continue;
            }
            let direct: Vec<BaseId> = match &self.nodes[id].op {
                BaseOp::Token { .. } | BaseOp::Position => vec![],
                BaseOp::Linear { terms } => terms.iter().map(|(t, _)| *t).collect(),
                BaseOp::GatedMlp { input, .. } => vec![*input],
                BaseOp::Attention { q, k, v, .. } => vec![*q, *k, *v],
            };
            for d in direct {
                live[d] = true;
            }
        }
        live
    }
}

struct Builder {
    nodes: Vec<BaseNode>,
    origin: Option<NodeRef>,
    vocab_len: usize,
    ones: Option<BaseId>,
    position: Option<BaseId>,
    is_bos: Option<BaseId>,
    position_sq: Option<BaseId>,
}

impl Builder {
    fn push(&mut self, op: BaseOp, width: usize) -> BaseId {
        self.nodes.push(BaseNode {
            op,
            width,
            origin: self.origin.clone(),
        });
        self.nodes.len() - 1
    }

    fn width(&self, id: BaseId) -> usize {
        self.nodes[id].width
    }

    fn closure(&self, id: BaseId) -> Vec<(BaseId, Array2<f64>)> {
        match &self.nodes[id].op {
            BaseOp::Linear { terms } => terms.clone(),
            _ => vec![(id, Array2::eye(self.nodes[id].width))],
        }
    }

    /// `Σ part_i · M_i`, fused into one linear node over materialized nodes.
    /// A plain identity over one materialized node returns that node.
    fn linear(&mut self, parts: Vec<(BaseId, Array2<f64>)>, width: usize) -> BaseId {
        let mut terms: Vec<(BaseId, Array2<f64>)> = Vec::new();
        for (part, m) in parts {
            debug_assert_eq!(m.dim(), (self.width(part), width));
            for (t, inner) in self.closure(part) {
                let prod = inner.dot(&m);
                match terms.iter_mut().find(|(id, _)| *id == t) {
                    Some((_, acc)) => *acc += &prod,
                    None => terms.push((t, prod)),
                }
            }
        }
        terms.retain(|(_, m)| m.iter().any(|&x| x != 0.0));
        terms.sort_by_key(|(t, _)| *t);
        if let [(t, m)] = terms.as_slice() {
            if self.width(*t) == width && *m == Array2::<f64>::eye(width) {
                return *t;
            }
        }
        self.push(BaseOp::Linear { terms }, width)
    }

    fn concat(&mut self, ids: &[BaseId]) -> BaseId {
        let total: usize = ids.iter().map(|&i| self.width(i)).sum();
        let mut parts = Vec::new();
        let mut off = 0;
        for &id in ids {
            let w = self.width(id);
            let mut m = Array2::zeros((w, total));
            for l in 0..w {
                m[[l, off + l]] = 1.0;
            }
            parts.push((id, m));
            off += w;
        }
        self.linear(parts, total)
    }

    fn mlp(&mut self, input: BaseId, params: GatedMlpParams) -> BaseId {
        let w = params.output_width();
        self.push(BaseOp::GatedMlp { input, params }, w)
    }

    fn ones(&mut self) -> BaseId {
        if let Some(id) = self.ones {
            return id;
        }
        let id = self.push(
            BaseOp::Token {
                embedding: Array2::ones((self.vocab_len, 1)),
            },
            1,
        );
        self.ones = Some(id);
        id
    }

    fn position(&mut self) -> BaseId {
        if let Some(id) = self.position {
            return id;
        }
        let id = self.push(BaseOp::Position, 1);
        self.position = Some(id);
        id
    }

    /// `relu(1 - pos)`.
    fn is_bos(&mut self) -> BaseId {
        if let Some(id) = self.is_bos {
            return id;
        }
        let pos = self.position();
        let params = build_reglu_for_relu(
            Array2::from_elem((1, 1), -1.0),
            Array1::ones(1),
            Array2::eye(1),
            Array1::zeros(1),
        );
        let id = self.mlp(pos, params);
        self.is_bos = Some(id);
        id
    }

    /// `pos²` through the product MLP.
    fn position_sq(&mut self) -> BaseId {
        if let Some(id) = self.position_sq {
            return id;
        }
        let pos = self.position();
        let both = self.linear(vec![(pos, Array2::ones((1, 2)))], 2);
        let id = self.mlp(both, build_reglu_for_mul(1));
        self.position_sq = Some(id);
        id
    }

    /// Matrix mapping a width-`from` value onto `to` lanes, repeating a
    /// single lane when `from == 1`.
    fn broadcast(from: usize, to: usize) -> Array2<f64> {
        if from == to {
            Array2::eye(to)
        } else {
            Array2::ones((1, to))
        }
    }

    /// `scale_a · a + scale_b · b` with broadcasting, plus `bias`.
    fn combine(&mut self, a: BaseId, sa: f64, b: BaseId, sb: f64, w: usize, bias: f64) -> BaseId {
        let mut parts = vec![
            (a, Self::broadcast(self.width(a), w) * sa),
            (b, Self::broadcast(self.width(b), w) * sb),
        ];
        if bias != 0.0 {
            let ones = self.ones();
            parts.push((ones, Array2::from_elem((1, w), bias)));
        }
        self.linear(parts, w)
    }

    fn product(&mut self, a: BaseId, b: BaseId, w: usize) -> BaseId {
        let (wa, wb) = (self.width(a), self.width(b));
        let mut ma = Array2::zeros((wa, 2 * w));
        ma.slice_mut(s![.., ..w]).assign(&Self::broadcast(wa, w));
        let mut mb = Array2::zeros((wb, 2 * w));
        mb.slice_mut(s![.., w..]).assign(&Self::broadcast(wb, w));
        let input = self.linear(vec![(a, ma), (b, mb)], 2 * w);
        self.mlp(input, build_reglu_for_mul(w))
    }

    /// A ReLU network `W2·relu(W1·x + b1) + b2` applied lane-wise to `x`
    /// through per-lane hidden units `(slope, offset)` and output weights.
    fn lanewise(&mut self, x: BaseId, units: &[(f64, f64, f64)], bias: f64) -> BaseId {
        let w = self.width(x);
        let h = units.len() * w;
        let mut w1 = Array2::zeros((w, h));
        let mut b1 = Array1::zeros(h);
        let mut w2 = Array2::zeros((h, w));
        for l in 0..w {
            for (u, &(slope, offset, out)) in units.iter().enumerate() {
                let col = u * w + l;
                w1[[l, col]] = slope;
                b1[col] = offset;
                w2[[col, l]] = out;
            }
        }
        let params = build_reglu_for_relu(w1, b1, w2, Array1::from_elem(w, bias));
        self.mlp(x, params)
    }

    /// `s(y) = relu(2y + 1) - relu(2y)`: 1 for `y ≥ 0`, 0 for `y ≤ -1/2`.
    fn compare(&mut self, op: CompareOp, a: BaseId, b: BaseId, w: usize) -> BaseId {
        let step = [(2.0, 1.0, 1.0), (2.0, 0.0, -1.0)];
        match op {
            CompareOp::Ge => {
                let d = self.combine(a, 1.0, b, -1.0, w, 0.0);
                self.lanewise(d, &step, 0.0)
            }
            CompareOp::Gt => {
                let d = self.combine(a, 1.0, b, -1.0, w, -0.5);
                self.lanewise(d, &step, 0.0)
            }
            CompareOp::Le => {
                let d = self.combine(a, -1.0, b, 1.0, w, 0.0);
                self.lanewise(d, &step, 0.0)
            }
            CompareOp::Lt => {
                let d = self.combine(a, -1.0, b, 1.0, w, -0.5);
                self.lanewise(d, &step, 0.0)
            }
            CompareOp::Eq => {
                // s(d) + s(-d) - 1
                let d = self.combine(a, 1.0, b, -1.0, w, 0.0);
                let units = [(2.0, 1.0, 1.0), (2.0, 0.0, -1.0), (-2.0, 1.0, 1.0), (-2.0, 0.0, -1.0)];
                self.lanewise(d, &units, -1.0)
            }
        }
    }

    fn attention(&mut self, q: BaseId, k: BaseId, v: BaseId, margin: Option<f64>) -> BaseId {
        let w = self.width(v);
        self.push(BaseOp::Attention { q, k, v, margin }, w)
    }
}

/// Rewrites every live node of `program` into [`BaseOp`]s. Consecutive
/// linear maps are fused; only token, position, MLP and attention nodes
/// remain materialized.
pub fn reduce_to_base(program: &Program) -> ReducedGraph {
    let graph = program.graph();
    let live = program.live_nodes();
    let mut b = Builder {
        nodes: Vec::new(),
        origin: None,
        vocab_len: graph.vocab().len(),
        ones: None,
        position: None,
        is_bos: None,
        position_sq: None,
    };
    let mut map: Vec<Option<BaseId>> = vec![None; graph.len()];
    let get = |map: &[Option<BaseId>], id: NodeId| map[id].expect("inputs precede their users");

    for node in graph.nodes() {
        if !live[node.id] {
            continue;
        }
        b.origin = Some(graph.node_ref(node.id));
        let w = node.width;
        let out = match &node.kind {
            NodeKind::Base(BaseKind::TokenEmbedding) => b.push(
                BaseOp::Token {
                    embedding: Array2::eye(w),
                },
                w,
            ),
            NodeKind::Base(BaseKind::PositionIndex) => b.position(),
            NodeKind::Base(BaseKind::Ones) => b.ones(),
            NodeKind::Base(BaseKind::IsBos) => b.is_bos(),
            NodeKind::Linear { inputs, matrix } => {
                let mut parts = Vec::new();
                let mut off = 0;
                for &i in inputs {
                    let wi = graph.width(i);
                    parts.push((get(&map, i), matrix.slice(s![off..off + wi, ..]).to_owned()));
                    off += wi;
                }
                b.linear(parts, w)
            }
            NodeKind::Elementwise { op, a, b: rhs } => {
                let (x, y) = (get(&map, *a), get(&map, *rhs));
                match op {
                    BinaryOp::Add => b.combine(x, 1.0, y, 1.0, w, 0.0),
                    BinaryOp::Sub => b.combine(x, 1.0, y, -1.0, w, 0.0),
                    BinaryOp::Mul => b.product(x, y, w),
                    BinaryOp::And => {
                        let sum = b.combine(x, 1.0, y, 1.0, w, 0.0);
                        b.lanewise(sum, &[(1.0, -1.0, 1.0)], 0.0)
                    }
                    BinaryOp::Or => {
                        let sum = b.combine(x, 1.0, y, 1.0, w, 0.0);
                        b.lanewise(sum, &[(1.0, 0.0, 1.0), (1.0, -1.0, -1.0)], 0.0)
                    }
                }
            }
            NodeKind::Compare { op, a, b: rhs } => {
                let (x, y) = (get(&map, *a), get(&map, *rhs));
                b.compare(*op, x, y, w)
            }
            NodeKind::Mean {
                q,
                k,
                v,
                bos_weight,
                margin,
            } => {
                let mut qs: Vec<BaseId> = q.iter().map(|&i| get(&map, i)).collect();
                let mut ks: Vec<BaseId> = k.iter().map(|&i| get(&map, i)).collect();
                if *bos_weight != 0.0 {
                    let ones = b.ones();
                    let is_bos = b.is_bos();
                    let bos_key = b.linear(vec![(is_bos, Array2::from_elem((1, 1), *bos_weight))], 1);
                    qs.push(ones);
                    ks.push(bos_key);
                }
                let vs: Vec<BaseId> = v.iter().map(|&i| get(&map, i)).collect();
                let (qn, kn, vn) = (b.concat(&qs), b.concat(&ks), b.concat(&vs));
                b.attention(qn, kn, vn, *margin)
            }
            NodeKind::SelfAttention { q, k, v, margin } => {
                let qs: Vec<BaseId> = q.iter().map(|&i| get(&map, i)).collect();
                let ks: Vec<BaseId> = k.iter().map(|&i| get(&map, i)).collect();
                let vs: Vec<BaseId> = v.iter().map(|&i| get(&map, i)).collect();
                let (qn, kn, vn) = (b.concat(&qs), b.concat(&ks), b.concat(&vs));
                b.attention(qn, kn, vn, *margin)
            }
            NodeKind::GatedMlp { input, params } => {
                let x = get(&map, *input);
                b.mlp(x, params.clone())
            }
            NodeKind::IndexSelect { src, idx, .. } => {
                // score(j) = 2·idx·j - j² = idx² - (idx - j)²: the nearest
                // position wins by at least 1 for integer indices, and the
                // causal mask clamps out-of-range indices.
                let ones = b.ones();
                let pos = b.position();
                let sq = b.position_sq();
                let i = get(&map, *idx);
                let q = b.concat(&[i, ones]);
                let k = b.linear(
                    vec![
                        (pos, Array2::from_shape_vec((1, 2), vec![2.0, 0.0]).expect("1x2")),
                        (sq, Array2::from_shape_vec((1, 2), vec![0.0, -1.0]).expect("1x2")),
                    ],
                    2,
                );
                let v = get(&map, *src);
                b.attention(q, k, v, Some(INDEX_MARGIN))
            }
            NodeKind::Slice { src, start, end } => {
                let x = get(&map, *src);
                let wi = b.width(x);
                let mut m = Array2::zeros((wi, end - start));
                for l in *start..*end {
                    m[[l, l - start]] = 1.0;
                }
                b.linear(vec![(x, m)], w)
            }
            NodeKind::Concat { inputs } => {
                let xs: Vec<BaseId> = inputs.iter().map(|&i| get(&map, i)).collect();
                b.concat(&xs)
            }
            NodeKind::Pad { src, start } => {
                let x = get(&map, *src);
                let wi = b.width(x);
                let mut m = Array2::zeros((wi, w));
                for l in 0..wi {
                    m[[l, start + l]] = 1.0;
                }
                b.linear(vec![(x, m)], w)
            }
            NodeKind::PriorityOutput { rules } => {
                let mut parts = Vec::new();
                for r in rules {
                    let cond = r.condition.map(|c| get(&map, c));
                    match (cond, r.value) {
                        (c, RuleValue::Token(t)) => {
                            let src = match c {
                                Some(c) => c,
                                None => b.ones(),
                            };
                            let mut m = Array2::zeros((1, w));
                            m[[0, t]] = r.weight;
                            parts.push((src, m));
                        }
                        (None, RuleValue::Node(n)) => parts.push((get(&map, n), Array2::eye(w) * r.weight)),
                        (Some(c), RuleValue::Node(n)) => {
                            let v = get(&map, n);
                            let prod = b.product(c, v, w);
                            parts.push((prod, Array2::eye(w) * r.weight));
                        }
                    }
                }
                b.linear(parts, w)
            }
        };
        map[node.id] = Some(out);
    }

    ReducedGraph {
        vocab: graph.vocab().clone(),
        root: get(&map, program.root()),
        nodes: b.nodes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::Graph;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["a", "b", "c"].iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn nested_linears_fuse() {
        let mut g = Graph::new(vocab());
        let t = g.tokens();
        let a = g.scale(t, 2.0).unwrap();
        let b = g.linear(&[a], Array2::ones((3, 1))).unwrap();
        let r = reduce_to_base(&Program::new(g, b).unwrap());
        match &r.node(r.root()).op {
            BaseOp::Linear { terms } => {
                // The root reads the token embedding directly, not the inner linear.
                assert_eq!(terms.len(), 1);
                assert!(matches!(r.node(terms[0].0).op, BaseOp::Token { .. }));
                assert_eq!(terms[0].1, Array2::from_elem((3, 1), 2.0));
            }
            other => panic!("expected a linear root, got {}", other.label()),
        }
    }

    #[test]
    fn only_base_kinds_remain() {
        let mut g = Graph::new(vocab());
        let t = g.tokens();
        let i = g.indices();
        let m = g.mul(t, i).unwrap();
        let c = g.compare(CompareOp::Ge, m, i).unwrap();
        let sel = g.index_select_clamped(c, i).unwrap();
        let r = reduce_to_base(&Program::new(g, sel).unwrap());
        let kinds: Vec<&str> = r.nodes().iter().map(|n| n.op.label()).collect();
        assert!(kinds
            .iter()
            .all(|k| ["Token", "Position", "Linear", "GatedMlp", "Attention"].contains(k)));
        assert_eq!(kinds.iter().filter(|k| **k == "Attention").count(), 1);
        // No linear node reads another linear node.
        for n in r.nodes() {
            if let BaseOp::Linear { terms } = &n.op {
                assert!(terms.iter().all(|(t, _)| r.node(*t).op.is_materialized()));
            }
        }
    }
}
