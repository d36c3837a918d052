use ndarray::Array2;
use thiserror::Error;

use super::{argmax, BaseKind, BinaryOp, CompareOp, NodeId, NodeKind, NodeRef, Program, RuleValue};
use crate::decode::NextTokenLogits;

/// A `positions × width` matrix of exact values.
pub type AbstractValue = Array2<f64>;

/// Slack allowed when a value must be exactly 0 or 1, and the relative slack
/// used for score and comparison ties.
pub const BOOL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("token id {id} at position {pos} is outside the vocabulary")]
    UnknownToken { pos: usize, id: usize },
    #[error("{node} at position {pos}: logical input {value} is not 0 or 1")]
    NonBoolean { node: NodeRef, pos: usize, value: f64 },
    #[error("{node} at position {pos}: index {index} is outside 0..={pos}")]
    IndexOutOfRange { node: NodeRef, pos: usize, index: f64 },
    #[error("{node} at position {pos}: value is not finite")]
    NonFinite { node: NodeRef, pos: usize },
}

pub(crate) fn tie_tolerance(x: f64) -> f64 {
    BOOL_TOLERANCE * (1.0 + x.abs())
}

pub(crate) fn compare(op: CompareOp, a: f64, b: f64) -> f64 {
    let tol = BOOL_TOLERANCE * (1.0 + a.abs().max(b.abs()));
    let holds = match op {
        CompareOp::Ge => a >= b - tol,
        CompareOp::Gt => a > b + tol,
        CompareOp::Le => a <= b + tol,
        CompareOp::Lt => a < b - tol,
        CompareOp::Eq => (a - b).abs() <= tol,
    };
    if holds {
        1.0
    } else {
        0.0
    }
}

/// Positions averaged by a select of `idx` at row `pos`: the nearest
/// position in `[0, pos]`, or both neighbours at an exact half.
pub(crate) fn select_positions(idx: f64, pos: usize) -> (usize, Option<usize>) {
    let x = idx.clamp(0.0, pos as f64);
    let lo = x.floor();
    let frac = x - lo;
    let lo = lo as usize;
    if frac <= BOOL_TOLERANCE {
        (lo, None)
    } else if frac >= 1.0 - BOOL_TOLERANCE {
        (lo + 1, None)
    } else if (frac - 0.5).abs() <= BOOL_TOLERANCE {
        (lo, Some(lo + 1))
    } else if frac < 0.5 {
        (lo, None)
    } else {
        (lo + 1, None)
    }
}

/// Mean of the value rows attaining the maximal score, ties within
/// tolerance (at most `max_slack`) averaged.
pub(crate) fn saturated_mean(scores: &[f64], values: &[f64], width: usize, out: &mut [f64], max_slack: f64) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cut = max - tie_tolerance(max).min(max_slack);
    out.iter_mut().for_each(|o| *o = 0.0);
    let mut count = 0usize;
    for (j, &s) in scores.iter().enumerate() {
        if s >= cut {
            count += 1;
            for (o, v) in out.iter_mut().zip(&values[j * width..(j + 1) * width]) {
                *o += v;
            }
        }
    }
    let n = count as f64;
    out.iter_mut().for_each(|o| *o /= n);
}

#[derive(Debug, Default, Clone)]
struct AttentionCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    key_width: usize,
}

/// Evaluates a program one token at a time.
///
/// Row `i` of every node depends only on tokens `0..=i`, so pushing a token
/// computes exactly one new row per live node.
#[derive(Debug, Clone)]
pub struct Evaluator<'p> {
    program: &'p Program,
    order: Vec<NodeId>,
    rows: Vec<Vec<f64>>,
    caches: Vec<AttentionCache>,
    len: usize,
}

impl<'p> Evaluator<'p> {
    pub fn new(program: &'p Program) -> Self {
        let live = program.live_nodes();
        Self::over(program, (0..live.len()).filter(|&i| live[i]).collect())
    }

    /// Also evaluates nodes the root does not depend on.
    pub fn with_all_nodes(program: &'p Program) -> Self {
        Self::over(program, (0..program.graph().len()).collect())
    }

    fn over(program: &'p Program, order: Vec<NodeId>) -> Self {
        let n = program.graph().len();
        Self {
            program,
            order,
            rows: vec![Vec::new(); n],
            caches: vec![AttentionCache::default(); n],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Row `pos` of `node`. The node must be live.
    pub fn row(&self, node: NodeId, pos: usize) -> &[f64] {
        let w = self.program.graph().width(node);
        &self.rows[node][pos * w..(pos + 1) * w]
    }

    pub fn root_row(&self, pos: usize) -> &[f64] {
        self.row(self.program.root(), pos)
    }

    /// All rows of `node` so far.
    pub fn value(&self, node: NodeId) -> AbstractValue {
        let w = self.program.graph().width(node);
        Array2::from_shape_vec((self.len, w), self.rows[node].clone()).expect("row-major storage")
    }

    fn gather(&self, ids: &[NodeId], pos: usize, out: &mut Vec<f64>) {
        for &id in ids {
            out.extend_from_slice(self.row(id, pos));
        }
    }

    /// Appends a token and computes its row. After an error the evaluator is
    /// left half-updated and should be dropped.
    pub fn push(&mut self, token: usize) -> Result<(), EvalError> {
        let pos = self.len;
        let graph = self.program.graph();
        let vocab_len = graph.vocab().len();
        if token >= vocab_len {
            return Err(EvalError::UnknownToken { pos, id: token });
        }
        for oi in 0..self.order.len() {
            let id = self.order[oi];
            let node = graph.node(id);
            let mut row = vec![0.0; node.width];
            match &node.kind {
                NodeKind::Base(BaseKind::TokenEmbedding) => row[token] = 1.0,
                NodeKind::Base(BaseKind::PositionIndex) => row[0] = pos as f64,
                NodeKind::Base(BaseKind::Ones) => row[0] = 1.0,
                NodeKind::Base(BaseKind::IsBos) => row[0] = if pos == 0 { 1.0 } else { 0.0 },
                NodeKind::Linear { inputs, matrix } => {
                    let mut x = Vec::with_capacity(matrix.nrows());
                    self.gather(inputs, pos, &mut x);
                    for (r, &xv) in x.iter().enumerate() {
                        if xv != 0.0 {
                            for (o, m) in row.iter_mut().zip(matrix.row(r)) {
                                *o += xv * m;
                            }
                        }
                    }
                }
                NodeKind::Elementwise { op, a, b } => {
                    let (ra, rb) = (self.row(*a, pos), self.row(*b, pos));
                    for (l, o) in row.iter_mut().enumerate() {
                        let x = ra[if ra.len() == 1 { 0 } else { l }];
                        let y = rb[if rb.len() == 1 { 0 } else { l }];
                        *o = match op {
                            BinaryOp::Add => x + y,
                            BinaryOp::Sub => x - y,
                            BinaryOp::Mul => x * y,
                            BinaryOp::And | BinaryOp::Or => {
                                for v in [x, y] {
                                    if v.abs() > BOOL_TOLERANCE && (v - 1.0).abs() > BOOL_TOLERANCE {
                                        return Err(EvalError::NonBoolean {
                                            node: graph.node_ref(id),
                                            pos,
                                            value: v,
                                        });
                                    }
                                }
                                if *op == BinaryOp::And {
                                    x.min(y)
                                } else {
                                    x.max(y)
                                }
                            }
                        };
                    }
                }
                NodeKind::Compare { op, a, b } => {
                    let (ra, rb) = (self.row(*a, pos), self.row(*b, pos));
                    for (l, o) in row.iter_mut().enumerate() {
                        let x = ra[if ra.len() == 1 { 0 } else { l }];
                        let y = rb[if rb.len() == 1 { 0 } else { l }];
                        *o = compare(*op, x, y);
                    }
                }
                NodeKind::Mean {
                    q, k, v, bos_weight, ..
                } => {
                    self.attend(id, q, k, v, *bos_weight, pos, &mut row);
                }
                NodeKind::SelfAttention { q, k, v, .. } => {
                    self.attend(id, q, k, v, 0.0, pos, &mut row);
                }
                NodeKind::GatedMlp { input, params } => {
                    row = params.eval(self.row(*input, pos));
                }
                NodeKind::IndexSelect { src, idx, clamp } => {
                    let index = self.row(*idx, pos)[0];
                    let tol = tie_tolerance(pos as f64);
                    if !*clamp && (index < -tol || index > pos as f64 + tol || !index.is_finite()) {
                        return Err(EvalError::IndexOutOfRange {
                            node: graph.node_ref(id),
                            pos,
                            index,
                        });
                    }
                    let (j, other) = select_positions(index, pos);
                    row.copy_from_slice(self.row(*src, j));
                    if let Some(j2) = other {
                        for (o, x) in row.iter_mut().zip(self.row(*src, j2)) {
                            *o = (*o + x) / 2.0;
                        }
                    }
                }
                NodeKind::Slice { src, start, end } => {
                    row.copy_from_slice(&self.row(*src, pos)[*start..*end]);
                }
                NodeKind::Concat { inputs } => {
                    let mut x = Vec::with_capacity(node.width);
                    self.gather(inputs, pos, &mut x);
                    row = x;
                }
                NodeKind::Pad { src, start } => {
                    let x = self.row(*src, pos);
                    row[*start..*start + x.len()].copy_from_slice(x);
                }
                NodeKind::PriorityOutput { rules } => {
                    for r in rules {
                        let c = r.condition.map_or(1.0, |c| self.row(c, pos)[0]);
                        if c == 0.0 {
                            continue;
                        }
                        match r.value {
                            RuleValue::Token(t) => row[t] += r.weight * c,
                            RuleValue::Node(n) => {
                                for (o, v) in row.iter_mut().zip(self.row(n, pos)) {
                                    *o += r.weight * c * v;
                                }
                            }
                        }
                    }
                }
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(EvalError::NonFinite {
                    node: graph.node_ref(id),
                    pos,
                });
            }
            self.rows[id].extend_from_slice(&row);
        }
        self.len += 1;
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(&mut self, id: NodeId, q: &[NodeId], k: &[NodeId], v: &[NodeId], bos: f64, pos: usize, out: &mut [f64]) {
        let mut qrow = Vec::new();
        self.gather(q, pos, &mut qrow);
        let mut cache = std::mem::take(&mut self.caches[id]);
        cache.key_width = qrow.len();
        self.gather(k, pos, &mut cache.keys);
        self.gather(v, pos, &mut cache.values);
        let kw = cache.key_width;
        let scores: Vec<f64> = (0..=pos)
            .map(|j| {
                let key = &cache.keys[j * kw..(j + 1) * kw];
                let s: f64 = qrow.iter().zip(key).map(|(a, b)| a * b).sum();
                if j == 0 {
                    s + bos
                } else {
                    s
                }
            })
            .collect();
        saturated_mean(&scores, &cache.values, out.len(), out, f64::INFINITY);
        self.caches[id] = cache;
    }
}

impl NextTokenLogits for Evaluator<'_> {
    type Error = EvalError;

    fn push_token(&mut self, token: usize) -> Result<(), EvalError> {
        self.push(token)
    }

    fn logits(&self) -> Vec<f64> {
        self.root_row(self.len - 1).to_vec()
    }
}

/// Evaluates the root on a whole token sequence.
pub fn abstract_eval(program: &Program, tokens: &[usize]) -> Result<AbstractValue, EvalError> {
    let mut ev = Evaluator::new(program);
    for &t in tokens {
        ev.push(t)?;
    }
    Ok(ev.value(program.root()))
}

/// Argmax token after each prefix of `tokens`.
pub fn next_tokens(program: &Program, tokens: &[usize]) -> Result<Vec<usize>, EvalError> {
    let v = abstract_eval(program, tokens)?;
    Ok(v.rows()
        .into_iter()
        .map(|r| argmax(r.as_slice().expect("contiguous")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{Graph, PriorityRule};
    use crate::vocab::Vocabulary;
    use ndarray::array;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["[BOS]", "x", "y", "z"].iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn eval(g: Graph, root: NodeId, tokens: &[usize]) -> Result<AbstractValue, EvalError> {
        abstract_eval(&Program::new(g, root).unwrap(), tokens)
    }

    #[test]
    fn base_inputs() {
        let mut g = Graph::new(vocab());
        let i = g.indices();
        assert_eq!(
            eval(g.clone(), i, &[0, 1, 1, 2]).unwrap(),
            array![[0.0], [1.0], [2.0], [3.0]]
        );
        let b = g.is_bos();
        assert_eq!(eval(g.clone(), b, &[0, 3, 3]).unwrap(), array![[1.0], [0.0], [0.0]]);
        let t = g.tokens();
        let v = eval(g, t, &[0, 2, 1]).unwrap();
        assert_eq!(
            v,
            array![[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 0.0]]
        );
    }

    #[test]
    fn mean_unique_tie_and_bos() {
        let mut g = Graph::new(vocab());
        let ones = g.ones();
        let t = g.tokens();
        let k = g.constant(&[0.0]).unwrap();
        let col = g.column(t, 2).unwrap();
        let i = g.indices();
        let filtered = g.mul(i, col).unwrap();
        // Position 2 holds the only "y": unique argmax at position 3.
        let m = g.mean(&[ones], &[filtered], &[t], 1.0).unwrap();
        let v = eval(g.clone(), m, &[0, 1, 2, 3]).unwrap();
        assert_eq!(v.row(3).to_vec(), vec![0.0, 0.0, 1.0, 0.0]);
        // Before any "y" the virtual BOS score wins.
        assert_eq!(v.row(1).to_vec(), vec![1.0, 0.0, 0.0, 0.0]);
        // All scores equal: plain average.
        let flat = g.mean(&[ones], &[k], &[t], 0.0).unwrap();
        let v = eval(g, flat, &[0, 1, 1, 2]).unwrap();
        assert_eq!(v.row(3).to_vec(), vec![0.25, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn logic_and_compare() {
        let mut g = Graph::new(vocab());
        let a = g.constant(&[1.0, 0.0, 1.0]).unwrap();
        let b = g.constant(&[1.0, 1.0, 0.0]).unwrap();
        let and = g.and(a, b).unwrap();
        let or = g.or(a, b).unwrap();
        let ge = g.compare(CompareOp::Ge, a, b).unwrap();
        let root = g.concat(&[and, or, ge]).unwrap();
        let v = eval(g, root, &[0]).unwrap();
        assert_eq!(v.row(0).to_vec(), vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0]);

        let mut g = Graph::new(vocab());
        let i = g.indices();
        let one = g.constant(&[1.0]).unwrap();
        let bad = g.and(i, one).unwrap();
        g.named(bad, "bad");
        let err = eval(g, bad, &[0, 1, 2]).unwrap_err();
        assert!(matches!(err, EvalError::NonBoolean { pos: 2, .. }), "{err}");
        assert!(err.to_string().contains("(bad)"));
    }

    #[test]
    fn index_select_and_forward_reference() {
        let mut g = Graph::new(vocab());
        let t = g.tokens();
        let i = g.indices();
        let half = g.scale(i, 0.5).unwrap();
        let sel = g.index_select(t, half).unwrap();
        // Index 0.5 at position 1 averages positions 0 and 1.
        let v = eval(g.clone(), sel, &[0, 1, 2]).unwrap();
        assert_eq!(v.row(1).to_vec(), vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(v.row(2).to_vec(), vec![0.0, 1.0, 0.0, 0.0]);
        let fwd = g.affine(i, 1.0, 1.0).unwrap();
        let bad = g.index_select(t, fwd).unwrap();
        assert!(matches!(
            eval(g.clone(), bad, &[0, 1]),
            Err(EvalError::IndexOutOfRange { pos: 0, .. })
        ));
        let clamped = g.index_select_clamped(t, fwd).unwrap();
        let v = eval(g.clone(), clamped, &[0, 1, 2]).unwrap();
        assert_eq!(v.column(2).to_vec(), vec![0.0, 0.0, 1.0]);
        let zeros = g.constant(&[0.0]).unwrap();
        let first = g.index_select(t, zeros).unwrap();
        let v = eval(g, first, &[0, 0, 1]).unwrap();
        assert_eq!(v.column(0).to_vec(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn priority_output_argmax() {
        let mut g = Graph::new(vocab());
        let on = g.constant(&[1.0]).unwrap();
        let off = g.constant(&[0.0]).unwrap();
        let t = g.tokens();
        let rules = vec![
            PriorityRule {
                condition: Some(off),
                value: RuleValue::Token(3),
                weight: 16.0,
            },
            PriorityRule {
                condition: Some(on),
                value: RuleValue::Token(2),
                weight: 4.0,
            },
            PriorityRule {
                condition: None,
                value: RuleValue::Node(t),
                weight: 1.0,
            },
        ];
        let out = g.priority_output(4, rules).unwrap();
        let v = eval(g, out, &[0, 1]).unwrap();
        assert_eq!(v.row(1).to_vec(), vec![0.0, 1.0, 4.0, 0.0]);
        assert_eq!(argmax(v.row(1).as_slice().unwrap()), 2);
    }
}
