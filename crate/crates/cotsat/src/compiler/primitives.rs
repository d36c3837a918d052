//! Weight constructions for single MLPs and attention heads.

use ndarray::{s, Array1, Array2};

use super::{CompileError, CompilerConfig};
use crate::dsl::{GatedMlpParams, Graph, NodeId, NodeKind};

/// Gated MLP computing `relu(x·W1 + b1)·W2 + b2` exactly: the linear branch
/// is the constant 1 (zero weights, unit bias) and the gate carries the
/// ReLU layer.
pub fn build_reglu_for_relu(w1: Array2<f64>, b1: Array1<f64>, w2: Array2<f64>, b2: Array1<f64>) -> GatedMlpParams {
    let (n, h) = w1.dim();
    GatedMlpParams {
        w_lin: Array2::zeros((n, h)),
        b_lin: Array1::ones(h),
        w_gate: w1,
        b_gate: b1,
        w_out: w2,
        b_out: b2,
    }
}

/// Gated MLP mapping `[x1; x2]` (both width `w`) to `x1 ⊙ x2` exactly as
/// `x1·relu(x2) - x1·relu(-x2)`.
pub fn build_reglu_for_mul(w: usize) -> GatedMlpParams {
    let mut w_lin = Array2::zeros((2 * w, 2 * w));
    let mut w_gate = Array2::zeros((2 * w, 2 * w));
    let mut w_out = Array2::zeros((2 * w, w));
    for l in 0..w {
        w_lin[[l, l]] = 1.0;
        w_lin[[l, w + l]] = 1.0;
        w_gate[[w + l, l]] = 1.0;
        w_gate[[w + l, w + l]] = -1.0;
        w_out[[l, l]] = 1.0;
        w_out[[w + l, l]] = -1.0;
    }
    GatedMlpParams {
        w_lin,
        b_lin: Array1::zeros(2 * w),
        w_gate,
        b_gate: Array1::zeros(2 * w),
        w_out,
        b_out: Array1::zeros(w),
    }
}

/// Requirements under which softmax attention tracks saturated attention.
///
/// Scores within `rho` of each other count as tied, distinct scores differ
/// by at least `delta`, inputs are bounded by `m_bound` in magnitude and the
/// output must be within `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionApproxParams {
    pub rho: f64,
    pub delta: f64,
    pub m_bound: f64,
    pub epsilon: f64,
}

impl AttentionApproxParams {
    /// Exact-score setting: no tie slack.
    pub fn exact(delta: f64, m_bound: f64, epsilon: f64) -> Self {
        Self {
            rho: 0.0,
            delta,
            m_bound,
            epsilon,
        }
    }

    /// Tie slack admissible for a copy head.
    pub fn copy_rho_bound(&self) -> f64 {
        self.delta * self.delta / (8.0 * self.m_bound)
    }

    /// Tie slack admissible for a mean head over `n` positions.
    pub fn mean_rho_bound(&self, n: usize) -> f64 {
        let log = (4.0 * self.m_bound * n as f64 / self.epsilon).ln().max(1.0);
        self.delta * self.epsilon / (16.0 * self.m_bound * log)
    }

    pub fn check_copy(&self) -> bool {
        self.valid() && self.rho <= self.copy_rho_bound()
    }

    pub fn check_mean(&self, n: usize) -> bool {
        self.valid() && self.rho <= self.mean_rho_bound(n)
    }

    fn valid(&self) -> bool {
        self.delta > 0.0 && self.m_bound > 0.0 && self.epsilon > 0.0 && self.rho >= 0.0
    }

    /// Worst-case output error of a head with logit scale `alpha` over `n`
    /// positions: each losing position carries weight at most
    /// `exp(-alpha·delta)` and moves the output by at most `2·m_bound`.
    pub fn error_bound(&self, alpha: f64, n: usize) -> f64 {
        let leak = (n as f64) * (-alpha * (self.delta - 2.0 * self.rho)).exp();
        2.0 * self.m_bound * leak
    }

    /// Smallest logit scale whose [`error_bound`](Self::error_bound) is at
    /// most `epsilon`.
    pub fn required_alpha(&self, n: usize) -> f64 {
        (2.0 * self.m_bound * n as f64 / self.epsilon).ln().max(0.0) / (self.delta - 2.0 * self.rho)
    }
}

/// Logit scale for an attention node with score margin `margin`: the
/// softmax sees a gap of `beta` between the winners and the next score.
pub fn attention_scale(beta: f64, margin: f64) -> f64 {
    beta / margin
}

/// One causal softmax head over rows laid out as `[q | k | v | 1 | is_bos]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanHead {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    /// Multiplier applied to `q·k` before the softmax.
    pub scale: f64,
}

impl MeanHead {
    /// Output at every position of `rows`.
    pub fn apply(&self, rows: &Array2<f64>) -> Array2<f64> {
        let q = rows.dot(&self.w_q);
        let k = rows.dot(&self.w_k);
        let v = rows.dot(&self.w_v);
        let n = rows.nrows();
        let mut out = Array2::zeros((n, v.ncols()));
        for i in 0..n {
            let logits: Vec<f64> = (0..=i).map(|j| self.scale * q.row(i).dot(&k.row(j))).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = w.iter().sum();
            for (j, wj) in w.iter().enumerate() {
                out.row_mut(i).scaled_add(wj / z, &v.row(j));
            }
        }
        out
    }
}

/// Builds the softmax head for the `Mean` node `node` of `graph`.
///
/// The BOS weight becomes one extra query/key lane pair: the constant 1 on
/// the query side against `bos_weight · is_bos` on the key side. The logit
/// scale is `beta / margin`; the node's margin must be at least
/// `approx.delta` and the resulting error bound at most `approx.epsilon`
/// over `cfg.context_len` positions.
pub fn build_attention_for_mean(
    graph: &Graph,
    node: NodeId,
    cfg: &CompilerConfig,
    approx: &AttentionApproxParams,
) -> Result<MeanHead, CompileError> {
    let name = graph.node_ref(node);
    let NodeKind::Mean {
        q,
        k: _,
        v,
        bos_weight,
        margin,
    } = &graph.node(node).kind
    else {
        return Err(CompileError::NotMean(name));
    };
    let margin = match margin {
        Some(m) if *m > 0.0 && m.is_finite() => *m,
        _ => return Err(CompileError::Margin(name)),
    };
    let n = cfg.context_len;
    if approx.delta > margin || !approx.check_mean(n) {
        return Err(CompileError::Margin(name));
    }
    let alpha = attention_scale(cfg.beta, margin);
    if approx.error_bound(alpha, n) > approx.epsilon {
        return Err(CompileError::Margin(name));
    }

    let width = |ids: &[NodeId]| ids.iter().map(|&i| graph.width(i)).sum::<usize>();
    let (wq, wv) = (width(q), width(v));
    let d_in = 2 * wq + wv + 2;
    let d = wq + 1;
    let mut w_q = Array2::zeros((d_in, d));
    let mut w_k = Array2::zeros((d_in, d));
    let mut w_v = Array2::zeros((d_in, wv));
    w_q.slice_mut(s![..wq, ..wq]).assign(&Array2::eye(wq));
    w_k.slice_mut(s![wq..2 * wq, ..wq]).assign(&Array2::eye(wq));
    w_v.slice_mut(s![2 * wq..2 * wq + wv, ..]).assign(&Array2::eye(wv));
    let ones_row = 2 * wq + wv;
    w_q[[ones_row, wq]] = 1.0;
    w_k[[ones_row + 1, wq]] = *bos_weight;
    Ok(MeanHead {
        w_q,
        w_k,
        w_v,
        scale: alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_layout_has_constant_linear_branch() {
        let p = build_reglu_for_relu(Array2::eye(2), Array1::zeros(2), Array2::eye(2), Array1::zeros(2));
        assert!(p.w_lin.iter().all(|&x| x == 0.0));
        assert!(p.b_lin.iter().all(|&x| x == 1.0));
        assert_eq!(p.eval(&[-1.0, 2.0]), vec![0.0, 2.0]);
    }

    #[test]
    fn mul_examples() {
        let p = build_reglu_for_mul(2);
        assert_eq!(p.eval(&[2.0, -3.0, -1.0, 4.0]), vec![-2.0, -12.0]);
        assert_eq!(p.eval(&[5.0, -7.0, 0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(p.eval(&[1.0, 1.0, -2.5, 3.25]), vec![-2.5, 3.25]);
    }

    #[test]
    fn approx_bounds() {
        let a = AttentionApproxParams::exact(0.5, 1.0, 1e-3);
        assert!(a.check_copy() && a.check_mean(400));
        assert!(a.error_bound(40.0, 400) < 1e-3);
        assert!(a.error_bound(a.required_alpha(400), 400) <= 1e-3 * (1.0 + 1e-12));
        let loose = AttentionApproxParams { rho: 0.1, ..a };
        assert!(!loose.check_copy());
    }
}
