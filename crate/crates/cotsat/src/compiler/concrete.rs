use ndarray::Array2;

use super::reduce::{BaseId, BaseOp, ReducedGraph};
use crate::decode::NextTokenLogits;
use crate::dsl::eval::saturated_mean;
use crate::dsl::{AbstractValue, EvalError, NodeRef};

/// Evaluates a reduced graph with idealized (saturated) attention, one
/// token at a time.
#[derive(Debug, Clone)]
pub struct ConcreteEvaluator<'r> {
    graph: &'r ReducedGraph,
    order: Vec<BaseId>,
    rows: Vec<Vec<f64>>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl<'r> ConcreteEvaluator<'r> {
    pub fn new(graph: &'r ReducedGraph) -> Self {
        let live = graph.live();
        let n = graph.len();
        Self {
            graph,
            order: (0..n).filter(|&i| live[i]).collect(),
            rows: vec![Vec::new(); n],
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn row(&self, id: BaseId, pos: usize) -> &[f64] {
        let w = self.graph.node(id).width;
        &self.rows[id][pos * w..(pos + 1) * w]
    }

    pub fn value(&self, id: BaseId) -> AbstractValue {
        let w = self.graph.node(id).width;
        Array2::from_shape_vec((self.len, w), self.rows[id].clone()).expect("row-major storage")
    }

    fn node_ref(&self, id: BaseId) -> NodeRef {
        self.graph.node(id).origin.clone().unwrap_or(NodeRef { id, name: None })
    }

    pub fn push(&mut self, token: usize) -> Result<(), EvalError> {
        let pos = self.len;
        if token >= self.graph.vocab().len() {
            return Err(EvalError::UnknownToken { pos, id: token });
        }
        for oi in 0..self.order.len() {
            let id = self.order[oi];
            let node = self.graph.node(id);
            let mut row = vec![0.0; node.width];
            match &node.op {
                BaseOp::Token { embedding } => row.copy_from_slice(embedding.row(token).as_slice().expect("row")),
                BaseOp::Position => row[0] = pos as f64,
                BaseOp::Linear { terms } => {
                    for (t, m) in terms {
                        for (r, &x) in self.row(*t, pos).iter().enumerate() {
                            if x != 0.0 {
                                for (o, w) in row.iter_mut().zip(m.row(r)) {
                                    *o += x * w;
                                }
                            }
                        }
                    }
                }
                BaseOp::GatedMlp { input, params } => row = params.eval(self.row(*input, pos)),
                BaseOp::Attention { q, k, v, margin } => {
                    let q_row = self.row(*q, pos).to_vec();
                    let kw = q_row.len();
                    let mut keys = std::mem::take(&mut self.keys[id]);
                    let mut values = std::mem::take(&mut self.values[id]);
                    keys.extend_from_slice(self.row(*k, pos));
                    values.extend_from_slice(self.row(*v, pos));
                    let scores: Vec<f64> = (0..=pos)
                        .map(|j| q_row.iter().zip(&keys[j * kw..(j + 1) * kw]).map(|(a, b)| a * b).sum())
                        .collect();
                    let slack = margin.map_or(f64::INFINITY, |m| m / 4.0);
                    saturated_mean(&scores, &values, node.width, &mut row, slack);
                    self.keys[id] = keys;
                    self.values[id] = values;
                }
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(EvalError::NonFinite {
                    node: self.node_ref(id),
                    pos,
                });
            }
            self.rows[id].extend_from_slice(&row);
        }
        self.len += 1;
        Ok(())
    }
}

impl NextTokenLogits for ConcreteEvaluator<'_> {
    type Error = EvalError;

    fn push_token(&mut self, token: usize) -> Result<(), EvalError> {
        self.push(token)
    }

    fn logits(&self) -> Vec<f64> {
        self.row(self.graph.root(), self.len - 1).to_vec()
    }
}

/// Root value of the reduced graph on `tokens`.
pub fn concrete_eval(graph: &ReducedGraph, tokens: &[usize]) -> Result<AbstractValue, EvalError> {
    let mut ev = ConcreteEvaluator::new(graph);
    for &t in tokens {
        ev.push(t)?;
    }
    Ok(ev.value(graph.root()))
}
