use ndarray::{s, Array2};

use super::plan::LayerPlan;
use super::primitives::attention_scale;
use super::reduce::{BaseId, BaseOp, ReducedGraph};
use super::{CompileError, CompilerConfig, MAX_POSITIONAL_LOGIT};
use crate::dsl::NodeRef;
use crate::engine::{Dims, HeadEntry, LaneEntry, ModelWeights};

fn node_ref(graph: &ReducedGraph, id: BaseId) -> NodeRef {
    graph.node(id).origin.clone().unwrap_or(NodeRef { id, name: None })
}

/// Adds `closure(id) · scale` into `target[.., cols]`, reading each term's
/// residual lanes.
fn write_closure(
    graph: &ReducedGraph,
    plan: &LayerPlan,
    id: BaseId,
    target: &mut Array2<f64>,
    col_start: usize,
    scale: f64,
    extra: Option<&Array2<f64>>,
) {
    for (t, m) in graph.closure(id) {
        let lanes = plan.lanes[t].clone().expect("live materialized term");
        let m = match extra {
            Some(e) => m.dot(e),
            None => m,
        };
        let mut view = target.slice_mut(s![lanes, col_start..col_start + m.ncols()]);
        view.scaled_add(scale, &m);
    }
}

/// Writes weights for a planned reduced graph.
///
/// Each materialized node writes only its own lanes: token inputs through
/// the embedding, attention nodes through `W_O`, MLP nodes through `W_2`.
/// Queries carry the logit scale `beta / margin` times `√d_head` to cancel
/// the head normalization.
pub fn emit(graph: &ReducedGraph, plan: &LayerPlan, cfg: &CompilerConfig) -> Result<ModelWeights, CompileError> {
    cfg.validate()?;
    let dims = Dims {
        d_emb: plan.d_emb,
        d_head: plan.d_head,
        d_mlp: plan.d_mlp,
        n_layers: plan.n_layers,
        n_heads: plan.n_heads,
        vocab_size: graph.vocab().len(),
        context_len: cfg.context_len,
    };
    let mut w = ModelWeights::zeros(graph.vocab().clone(), *cfg, dims);
    w.position_lane = plan.position_lane;
    let sqrt_d = (plan.d_head as f64).sqrt();
    let ctx = cfg.context_len as f64;

    for id in 0..graph.len() {
        let Some(lanes) = plan.lanes[id].clone() else {
            continue;
        };
        let node = graph.node(id);
        w.lane_map.push(LaneEntry {
            node: id,
            kind: node.op.label().to_string(),
            name: node.origin.as_ref().and_then(|o| o.name.clone()),
            start: lanes.start,
            end: lanes.end,
            layer: plan.layer[id],
        });
        match &node.op {
            BaseOp::Token { embedding } => {
                w.token_embedding.slice_mut(s![.., lanes]).assign(embedding);
            }
            BaseOp::Position | BaseOp::Linear { .. } => {}
            BaseOp::Attention { q, k, v, margin } => {
                let margin = match margin {
                    Some(m) if *m > 0.0 && m.is_finite() => *m,
                    _ => return Err(CompileError::Margin(node_ref(graph, id))),
                };
                let alpha = attention_scale(cfg.beta, margin);
                if alpha.is_nan() || alpha * ctx * ctx > MAX_POSITIONAL_LOGIT {
                    return Err(CompileError::ContextTooLong {
                        node: node_ref(graph, id),
                        alpha,
                        context_len: cfg.context_len,
                    });
                }
                let l = plan.layer[id].expect("attention has a layer") - 1;
                let h = plan.heads[l].iter().position(|&x| x == id).expect("head listed");
                let layer = &mut w.layers[l];
                let head = &mut layer.heads[h];
                write_closure(graph, plan, *q, &mut head.w_q, 0, alpha * sqrt_d, None);
                write_closure(graph, plan, *k, &mut head.w_k, 0, 1.0, None);
                write_closure(graph, plan, *v, &mut head.w_v, 0, 1.0, None);
                for (c, lane) in lanes.enumerate() {
                    layer.w_o[[h * plan.d_head + c, lane]] = 1.0;
                }
                w.head_table.push(HeadEntry {
                    layer: l + 1,
                    head: h,
                    node: id,
                    name: node.origin.as_ref().and_then(|o| o.name.clone()),
                    scale: alpha,
                });
            }
            BaseOp::GatedMlp { input, params } => {
                let l = plan.layer[id].expect("mlp has a layer") - 1;
                let off = plan.mlps[l].iter().find(|(x, _)| *x == id).expect("mlp listed").1;
                let hw = params.hidden_width();
                let d_mlp = plan.d_mlp;
                let mlp = &mut w.layers[l].mlp;
                write_closure(graph, plan, *input, &mut mlp.w_1, off, 1.0, Some(&params.w_lin));
                write_closure(
                    graph,
                    plan,
                    *input,
                    &mut mlp.w_1,
                    d_mlp + off,
                    1.0,
                    Some(&params.w_gate),
                );
                mlp.b_1.slice_mut(s![off..off + hw]).assign(&params.b_lin);
                mlp.b_1
                    .slice_mut(s![d_mlp + off..d_mlp + off + hw])
                    .assign(&params.b_gate);
                mlp.w_2
                    .slice_mut(s![off..off + hw, lanes.clone()])
                    .assign(&params.w_out);
                mlp.b_2.slice_mut(s![lanes]).assign(&params.b_out);
            }
        }
    }
    write_closure(graph, plan, graph.root(), &mut w.w_out, 0, 1.0, None);

    let width = cfg.float_width;
    let round = |m: &mut Array2<f64>| m.mapv_inplace(|x| width.round(x));
    round(&mut w.token_embedding);
    round(&mut w.w_out);
    w.b_out.mapv_inplace(|x| width.round(x));
    for layer in &mut w.layers {
        for head in &mut layer.heads {
            round(&mut head.w_q);
            round(&mut head.w_k);
            round(&mut head.w_v);
        }
        round(&mut layer.w_o);
        round(&mut layer.mlp.w_1);
        round(&mut layer.mlp.w_2);
        layer.mlp.b_1.mapv_inplace(|x| width.round(x));
        layer.mlp.b_2.mapv_inplace(|x| width.round(x));
    }
    if !w.all_finite() {
        return Err(CompileError::NonFinite(node_ref(graph, graph.root())));
    }
    Ok(w)
}
