use std::ops::Range;

use super::reduce::{BaseId, BaseOp, ReducedGraph};
use super::CompileError;

/// Layer and residual-lane assignment for a reduced graph.
///
/// Stages interleave sublayers: stage 0 holds the inputs, odd stages are
/// attention sublayers and even stages MLP sublayers, so block `ℓ` runs
/// stage `2ℓ - 1` then stage `2ℓ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    /// Stage at which each live node is available; linear nodes inherit
    /// the latest stage among their terms.
    pub stage: Vec<Option<usize>>,
    /// Block index (1-based) of each attention and MLP node.
    pub layer: Vec<Option<usize>>,
    /// Residual lanes of each live materialized node.
    pub lanes: Vec<Option<Range<usize>>>,
    /// Attention nodes per block, in head order.
    pub heads: Vec<Vec<BaseId>>,
    /// MLP nodes per block with the offset of their hidden units.
    pub mlps: Vec<Vec<(BaseId, usize)>>,
    pub position_lane: Option<usize>,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_emb: usize,
    pub d_head: usize,
    pub d_mlp: usize,
}

impl LayerPlan {
    /// Checks that every attention or MLP node runs strictly after the
    /// sublayers that produce its inputs.
    pub fn respects_dependencies(&self, graph: &ReducedGraph) -> bool {
        (0..graph.len()).all(|id| match (&graph.node(id).op, self.stage[id]) {
            (BaseOp::GatedMlp { .. } | BaseOp::Attention { .. }, Some(s)) => graph
                .dependencies(id)
                .iter()
                .all(|&d| self.stage[d].is_some_and(|sd| sd < s)),
            _ => true,
        })
    }
}

fn next_with_parity(after: usize, odd: bool) -> usize {
    let s = after + 1;
    if (s % 2 == 1) == odd {
        s
    } else {
        s + 1
    }
}

/// Greedy earliest-feasible assignment of attention and MLP nodes to
/// blocks, and lane allocation in node-id order.
pub fn plan_layers(graph: &ReducedGraph) -> Result<LayerPlan, CompileError> {
    let n = graph.len();
    let live = graph.live();
    let mut stage: Vec<Option<usize>> = vec![None; n];
    let mut layer = vec![None; n];
    for id in 0..n {
        if !live[id] {
            continue;
        }
        let deps = graph.dependencies(id);
        let latest = deps.iter().map(|&d| stage[d].expect("dependencies precede")).max();
        let s = match &graph.node(id).op {
            BaseOp::Token { .. } | BaseOp::Position => 0,
            BaseOp::Linear { .. } => latest.unwrap_or(0),
            BaseOp::Attention { .. } => next_with_parity(latest.unwrap_or(0), true),
            BaseOp::GatedMlp { .. } => next_with_parity(latest.unwrap_or(0), false),
        };
        stage[id] = Some(s);
        match &graph.node(id).op {
            BaseOp::Attention { .. } => layer[id] = Some(s.div_ceil(2)),
            BaseOp::GatedMlp { .. } => layer[id] = Some(s / 2),
            _ => {}
        }
    }

    let n_layers = layer.iter().flatten().copied().max().unwrap_or(0);
    let mut heads = vec![Vec::new(); n_layers];
    let mut mlps: Vec<Vec<(BaseId, usize)>> = vec![Vec::new(); n_layers];
    let mut lanes = vec![None; n];
    let mut next_lane = 0usize;
    let mut d_head = 0;
    let mut mlp_width = vec![0usize; n_layers];
    let mut position_lane = None;
    for id in 0..n {
        let node = graph.node(id);
        if !live[id] || !node.op.is_materialized() {
            continue;
        }
        let end = next_lane.checked_add(node.width).ok_or(CompileError::LaneOverflow)?;
        lanes[id] = Some(next_lane..end);
        match &node.op {
            BaseOp::Position => position_lane = Some(next_lane),
            BaseOp::Attention { q, .. } => {
                heads[layer[id].expect("assigned") - 1].push(id);
                d_head = d_head.max(graph.node(*q).width).max(node.width);
            }
            BaseOp::GatedMlp { params, .. } => {
                let l = layer[id].expect("assigned") - 1;
                mlps[l].push((id, mlp_width[l]));
                mlp_width[l] = mlp_width[l]
                    .checked_add(params.hidden_width())
                    .ok_or(CompileError::LaneOverflow)?;
            }
            _ => {}
        }
        next_lane = end;
    }

    Ok(LayerPlan {
        stage,
        layer,
        lanes,
        n_heads: heads.iter().map(Vec::len).max().unwrap_or(0),
        heads,
        mlps,
        position_lane,
        n_layers,
        d_emb: next_lane,
        d_head,
        d_mlp: mlp_width.into_iter().max().unwrap_or(0),
    })
}
