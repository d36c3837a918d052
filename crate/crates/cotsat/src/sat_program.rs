//! The DPLL solver as a DSL program.
//!
//! The program reads `[BOS] <clauses> [SEP] <trace so far>` and its output
//! row at the last position scores the next trace token. Everything is
//! organised around separators (`0`, `[SEP]`, `[BT]`): the literals between
//! two separators form a clause or an assignment, summed into a `2p`-lane
//! encoding by one attention head. Three heads over the clause ends then
//! decide satisfaction, conflict and unit propagation, and a prioritized
//! output combines them with the backtracking bookkeeping.

use ndarray::Array2;
use thiserror::Error;

use crate::dsl::{CompareOp, Graph, GraphError, NodeId, PriorityRule, Program, RuleValue};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SatProgramError {
    #[error("need at least one variable and one clause, got p={num_vars}, c={num_clauses}")]
    Size { num_vars: usize, num_clauses: usize },
    #[error("nonsep_penalty {penalty} must exceed the variable count {num_vars}")]
    Penalty { penalty: f64, num_vars: usize },
    #[error("mean_exactness must be positive, got {0}")]
    Exactness(f64),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SatProgramParams {
    pub num_vars: usize,
    /// Largest clause count the program is built for.
    pub num_clauses: usize,
    pub context_len: usize,
    /// Attention exactness passed through to the compiler.
    pub mean_exactness: f64,
    /// Score penalty for positions that are not clause ends.
    pub nonsep_penalty: f64,
}

impl SatProgramParams {
    /// Defaults: exactness 20 and penalty 20 (raised to `p + 1` when needed).
    pub fn new(num_vars: usize, num_clauses: usize, context_len: usize) -> Self {
        Self {
            num_vars,
            num_clauses,
            context_len,
            mean_exactness: 20.0,
            nonsep_penalty: 20f64.max(num_vars as f64 + 1.0),
        }
    }

    pub fn validate(&self) -> Result<(), SatProgramError> {
        if self.num_vars == 0 || self.num_clauses == 0 {
            return Err(SatProgramError::Size {
                num_vars: self.num_vars,
                num_clauses: self.num_clauses,
            });
        }
        if self.nonsep_penalty.is_nan() || self.nonsep_penalty <= self.num_vars as f64 {
            return Err(SatProgramError::Penalty {
                penalty: self.nonsep_penalty,
                num_vars: self.num_vars,
            });
        }
        if self.mean_exactness.is_nan() || self.mean_exactness <= 0.0 {
            return Err(SatProgramError::Exactness(self.mean_exactness));
        }
        Ok(())
    }

    /// Weight of the lowest-lane tie-break rule: small enough that `2p`
    /// steps of it stay below the `1/c` resolution of the heuristic counts.
    pub fn tie_break_weight(&self) -> f64 {
        1.0 / (4.0 * self.num_vars as f64 * self.num_clauses as f64)
    }
}

/// Position bookkeeping shared by the heads.
#[derive(Debug, Clone, Copy)]
pub struct SeparatorBookkeeping {
    /// Nearest separator at or before the position (0 when none).
    pub p_i_sep_p: NodeId,
    /// Type of that separator.
    pub b_0: NodeId,
    pub b_sep: NodeId,
    pub b_bt: NodeId,
    /// Nearest `D` at or before the position.
    pub p_i_d: NodeId,
    /// Nearest separator strictly before the position (-1 at position 0).
    pub p_i_sep: NodeId,
    /// Whether the previous token is `D`.
    pub b_decision: NodeId,
    /// Offset from the nearest separator.
    pub d_i_sep: NodeId,
    /// Start of the previous state.
    pub p_i_sep_min: NodeId,
    /// The matching position in the previous state.
    pub p_i_min: NodeId,
    /// Last `D` of the previous state.
    pub p_i_d_min: NodeId,
    pub b_d_min: NodeId,
    pub b_copy_p: NodeId,
    pub b_no_decision: NodeId,
    pub b_bt_finish: NodeId,
}

/// Named nodes of a built program, for inspection and tests.
#[derive(Debug, Clone, Copy)]
pub struct SatNodes {
    pub book: SeparatorBookkeeping,
    pub r_i: NodeId,
    pub b_sat: NodeId,
    pub b_cont: NodeId,
    pub e_up: NodeId,
    pub heuristic: NodeId,
    pub b_unsat: NodeId,
    pub b_backtrack: NodeId,
    pub b_copy: NodeId,
    pub b_bt_token: NodeId,
    pub e_bt: NodeId,
    pub e_copy: NodeId,
    pub out: NodeId,
}

#[derive(Debug, Clone)]
pub struct SatProgram {
    pub program: Program,
    pub params: SatProgramParams,
    pub nodes: SatNodes,
}

/// The per-variable lane map `(x_v, ¬x_v) ↦ true_vec | false_vec | none_vec`
/// according to whether `x_v` is true, false or unassigned in the encoding.
pub fn literal_transform(
    g: &mut Graph,
    enc: NodeId,
    num_vars: usize,
    true_vec: (f64, f64),
    false_vec: (f64, f64),
    none_vec: (f64, f64),
) -> Result<NodeId, GraphError> {
    let p = num_vars;
    let ones = g.ones();
    let mut m = Array2::zeros((2 * p + 1, 2 * p));
    for v in 0..p {
        let (pos, neg) = (v, p + v);
        m[[pos, pos]] = true_vec.0 - none_vec.0;
        m[[neg, pos]] = false_vec.0 - none_vec.0;
        m[[pos, neg]] = true_vec.1 - none_vec.1;
        m[[neg, neg]] = false_vec.1 - none_vec.1;
        m[[2 * p, pos]] = none_vec.0;
        m[[2 * p, neg]] = none_vec.1;
    }
    g.linear(&[enc, ones], m)
}

/// Attention to the nearest token among `targets`, returning its position
/// followed by the one-hot of which target it is.
fn nearest_token(g: &mut Graph, targets: &[usize], with_kind: bool) -> Result<NodeId, GraphError> {
    let tok = g.tokens();
    let ones = g.ones();
    let indices = g.indices();
    let cols: Vec<NodeId> = targets.iter().map(|&t| g.column(tok, t)).collect::<Result<_, _>>()?;
    let target_tokens = if cols.len() == 1 { cols[0] } else { g.concat(&cols)? };
    let in_targets = g.sum_lanes(target_tokens)?;
    let filtered = g.mul(indices, in_targets)?;
    let v: Vec<NodeId> = if with_kind {
        vec![indices, target_tokens]
    } else {
        vec![indices]
    };
    g.mean(&[ones], &[filtered], &v, 1.0)
}

/// Separator and decision positions, and the replay cursor into the
/// previous state.
pub fn separator_bookkeeping(g: &mut Graph, num_vars: usize) -> Result<SeparatorBookkeeping, GraphError> {
    let vocab = g.vocab().clone();
    let id = |t: &str| vocab.require(t);
    let (t0, tsep, tbt, td) = (id("0")?, id("[SEP]")?, id("[BT]")?, id("D")?);
    let tok = g.tokens();
    let indices = g.indices();
    let is_bos = g.is_bos();

    let nearest_sep = nearest_token(g, &[t0, tsep, tbt], true)?;
    g.named(nearest_sep, "nearest_sep");
    let p_i_sep_p = g.column(nearest_sep, 0)?;
    let b_0 = g.column(nearest_sep, 1)?;
    let b_sep = g.column(nearest_sep, 2)?;
    let b_bt = g.column(nearest_sep, 3)?;
    g.named(p_i_sep_p, "p_i_sep_p");
    g.named(b_0, "b_0");
    g.named(b_sep, "b_SEP");
    g.named(b_bt, "b_BackTrack");

    let p_i_d = nearest_token(g, &[td], false)?;
    g.named(p_i_d, "p_i_D");

    let tok_d = g.column(tok, td)?;
    let both = g.concat(&[p_i_sep_p, tok_d])?;
    let prev_index = g.affine(indices, 1.0, -1.0)?;
    let prev_pos = g.index_select_clamped(both, prev_index)?;
    g.named(prev_pos, "prev_pos");
    let prev_sep = g.column(prev_pos, 0)?;
    let p_i_sep = g.sub(prev_sep, is_bos)?;
    g.named(p_i_sep, "p_i_sep");
    let b_decision = g.column(prev_pos, 1)?;
    g.named(b_decision, "b_decision");

    let d_i_sep = g.sub(indices, p_i_sep_p)?;
    g.named(d_i_sep, "d_i_sep");

    let p_i_sep_min = g.index_select(p_i_sep, p_i_sep_p)?;
    g.named(p_i_sep_min, "p_i_sep_min");
    let sep_shift = g.scale(b_sep, num_vars as f64)?;
    let offset = g.add(p_i_sep_min, d_i_sep)?;
    let p_i_min = g.add(offset, sep_shift)?;
    g.named(p_i_min, "p_i_min");

    let p_i_d_min = g.index_select(p_i_d, p_i_sep_p)?;
    g.named(p_i_d_min, "p_i_D_min");
    let p_i_min_next = g.affine(p_i_min, 1.0, 1.0)?;
    let b_d_min = g.compare(CompareOp::Eq, p_i_d_min, p_i_min_next)?;
    g.named(b_d_min, "b_D_min");

    let sep_before = g.affine(p_i_sep_p, 1.0, -1.0)?;
    let b_copy_p = g.compare(CompareOp::Lt, p_i_min, sep_before)?;
    g.named(b_copy_p, "b_copy_p");

    let b_no_decision = g.compare(CompareOp::Le, p_i_d, p_i_sep)?;
    g.named(b_no_decision, "b_no_decision");

    let replayed = g.compare(CompareOp::Le, p_i_d_min, p_i_min)?;
    let b_bt_finish = g.and(replayed, b_bt)?;
    g.named(b_bt_finish, "b_BT_finish");

    Ok(SeparatorBookkeeping {
        p_i_sep_p,
        b_0,
        b_sep,
        b_bt,
        p_i_d,
        p_i_sep,
        b_decision,
        d_i_sep,
        p_i_sep_min,
        p_i_min,
        p_i_d_min,
        b_d_min,
        b_copy_p,
        b_no_decision,
        b_bt_finish,
    })
}

/// Sum of the literal one-hots since the previous separator: the encoding
/// of the current clause or assignment.
pub fn current_encoding(g: &mut Graph, book: &SeparatorBookkeeping, num_vars: usize) -> Result<NodeId, GraphError> {
    let tok = g.tokens();
    let ones = g.ones();
    let indices = g.indices();
    let p_i_sep = book.p_i_sep;
    let p_i_sep_2 = g.mul(p_i_sep, p_i_sep)?;
    g.named(p_i_sep_2, "p_i_sep_2");
    let e_vars = g.slice(tok, 0, 2 * num_vars)?;
    g.named(e_vars, "e_vars");
    let neg_ones = g.scale(ones, -1.0)?;
    let two_sep = g.scale(p_i_sep, 2.0)?;
    let neg_sep_2 = g.scale(p_i_sep_2, -1.0)?;
    let r_i_pre = g.mean(
        &[p_i_sep_2, p_i_sep, ones],
        &[neg_ones, two_sep, neg_sep_2],
        &[e_vars],
        0.0,
    )?;
    g.named(r_i_pre, "r_i_pre");
    let count = g.sub(indices, p_i_sep)?;
    let r_i = g.mul(r_i_pre, count)?;
    Ok(g.named(r_i, "r_i"))
}

/// `-nonsep_penalty` at every position except clause ends.
fn clause_end_key(g: &mut Graph, penalty: f64) -> Result<NodeId, GraphError> {
    let tok = g.tokens();
    let t0 = g.token_id("0")?;
    let is_zero = g.column(tok, t0)?;
    let not_zero = g.not(is_zero)?;
    g.scale(not_zero, -penalty)
}

/// 1 when the assignment satisfies every clause.
///
/// Clause ends score `-E(C)·E(A)`; the BOS row scores `-1/2`. Any clause
/// sharing no literal with the assignment reaches 0 and outvotes BOS.
pub fn sat_check_head(g: &mut Graph, r_i: NodeId, penalty: f64) -> Result<NodeId, GraphError> {
    let ones = g.ones();
    let is_bos = g.is_bos();
    let neg_r = g.scale(r_i, -1.0)?;
    let key = clause_end_key(g, penalty)?;
    let m = g.mean(&[r_i, ones], &[neg_r, key], &[is_bos], penalty - 0.5)?;
    let zero = g.constant(&[0.0])?;
    let b_sat = g.compare(CompareOp::Gt, m, zero)?;
    Ok(g.named(b_sat, "b_sat"))
}

/// Lanes of literals that are not false under the assignment.
fn not_false(g: &mut Graph, r_i: NodeId, num_vars: usize) -> Result<NodeId, GraphError> {
    literal_transform(g, r_i, num_vars, (1.0, 0.0), (0.0, 1.0), (1.0, 1.0))
}

/// 1 when some clause has every literal false.
pub fn conflict_head(g: &mut Graph, r_i: NodeId, num_vars: usize, penalty: f64) -> Result<NodeId, GraphError> {
    let ones = g.ones();
    let is_bos = g.is_bos();
    let q = not_false(g, r_i, num_vars)?;
    let neg_r = g.scale(r_i, -1.0)?;
    let key = clause_end_key(g, penalty)?;
    let not_bos = g.not(is_bos)?;
    let m = g.mean(&[q, ones], &[neg_r, key], &[not_bos], penalty - 0.5)?;
    let zero = g.constant(&[0.0])?;
    let b_cont = g.compare(CompareOp::Gt, m, zero)?;
    Ok(g.named(b_cont, "b_cont"))
}

/// Indicator over lanes of the literals deducible by unit propagation.
///
/// Clauses with exactly one non-false literal score -1 and beat the BOS row
/// at -3/2; their scaled average is at least 1 on every literal they
/// contain, and the two-ReLU clamp keeps only unassigned ones.
pub fn unit_prop_head(
    g: &mut Graph,
    r_i: NodeId,
    num_vars: usize,
    num_clauses: usize,
    penalty: f64,
) -> Result<NodeId, GraphError> {
    let ones = g.ones();
    let q = not_false(g, r_i, num_vars)?;
    let neg_r = g.scale(r_i, -1.0)?;
    let key = clause_end_key(g, penalty)?;
    let v = g.scale(r_i, num_clauses as f64)?;
    let o_up = g.mean(&[q, ones], &[neg_r, key], &[v], penalty - 1.5)?;
    g.named(o_up, "o_up");
    let assigned = literal_transform(g, r_i, num_vars, (1.0, 1.0), (1.0, 1.0), (0.0, 0.0))?;
    let a = g.sub(o_up, assigned)?;
    let upper = g.relu(a)?;
    let b = g.affine(o_up, 1.0, -1.0)?;
    let excess = g.relu(b)?;
    let e_up = g.sub(upper, excess)?;
    Ok(g.named(e_up, "e_up"))
}

/// Literal occurrence counts, averaged over the highest-scoring clauses
/// (-10 per true literal, +1 per false literal).
pub fn heuristic_head(g: &mut Graph, r_i: NodeId, num_vars: usize, penalty: f64) -> Result<NodeId, GraphError> {
    let ones = g.ones();
    let q = literal_transform(g, r_i, num_vars, (-10.0, 1.0), (1.0, -10.0), (0.0, 0.0))?;
    let key = clause_end_key(g, penalty)?;
    let h = g.self_attention(&[q, ones], &[r_i, key], &[r_i])?;
    Ok(g.named(h, "heuristic_o"))
}

pub fn build_sat_program(params: SatProgramParams) -> Result<SatProgram, SatProgramError> {
    params.validate()?;
    let p = params.num_vars;
    let penalty = params.nonsep_penalty;
    let vocab = Vocabulary::sat(p);
    let v_len = vocab.len();
    let mut g = Graph::new(vocab);
    let id = |g: &Graph, t: &str| g.token_id(t);
    let (t_sat, t_unsat, t_bt, t_d, t_lit1) = (
        id(&g, "SAT")?,
        id(&g, "UNSAT")?,
        id(&g, "[BT]")?,
        id(&g, "D")?,
        id(&g, "1")?,
    );
    let tok = g.tokens();

    let book = separator_bookkeeping(&mut g, p)?;
    let r_i = current_encoding(&mut g, &book, p)?;
    let b_sat = sat_check_head(&mut g, r_i, penalty)?;
    let b_cont = conflict_head(&mut g, r_i, p, penalty)?;
    let e_up = unit_prop_head(&mut g, r_i, p, params.num_clauses, penalty)?;
    let heuristic = heuristic_head(&mut g, r_i, p, penalty)?;

    let e_vars = g.find("e_vars").expect("named in current_encoding");
    let after_d = g.affine(book.p_i_d_min, 1.0, 1.0)?;
    let last_decision = g.index_select_clamped(e_vars, after_d)?;
    let e_bt = literal_transform(&mut g, last_decision, p, (0.0, 1.0), (1.0, 0.0), (0.0, 0.0))?;
    g.named(e_bt, "e_BT");

    let copy_index = g.affine(book.p_i_min, 1.0, 1.0)?;
    g.named(copy_index, "p_i_min_index");
    let e_copy = g.index_select_clamped(tok, copy_index)?;
    g.named(e_copy, "e_copy");

    let b_unsat = g.and(book.b_no_decision, b_cont)?;
    g.named(b_unsat, "b_unsat");
    let b_backtrack = g.and(book.b_d_min, book.b_bt)?;
    g.named(b_backtrack, "b_backtrack");
    let not_finished = g.not(book.b_bt_finish)?;
    let b_copy = g.and(book.b_copy_p, not_finished)?;
    g.named(b_copy, "b_copy");
    let tok_bt = g.column(tok, t_bt)?;
    let not_bt = g.not(tok_bt)?;
    let b_bt_token = g.and(b_cont, not_bt)?;
    g.named(b_bt_token, "b_BT_token");
    let tok_d = g.column(tok, t_d)?;
    let b_not_d = g.not(tok_d)?;
    g.named(b_not_d, "b_not_D");
    let e_unassigned = literal_transform(&mut g, r_i, p, (0.0, 0.0), (0.0, 0.0), (1.0, 1.0))?;
    g.named(e_unassigned, "e_unassigned");

    let e_bt_out = g.pad(e_bt, v_len, t_lit1)?;
    let e_up_out = g.pad(e_up, v_len, t_lit1)?;
    let decision_score = g.add(e_unassigned, heuristic)?;
    let decision_out = g.pad(decision_score, v_len, t_lit1)?;
    let mut ramp = vec![0.0; v_len];
    for (lane, r) in ramp.iter_mut().enumerate().skip(t_lit1).take(2 * p) {
        *r = -((lane - t_lit1) as f64);
    }
    let tie_break = g.constant(&ramp)?;
    g.named(tie_break, "tie_break");

    let rule = |condition: Option<NodeId>, value: RuleValue, weight: f64| PriorityRule {
        condition,
        value,
        weight,
    };
    let rules = vec![
        rule(Some(b_sat), RuleValue::Token(t_sat), 16.0),
        rule(Some(b_unsat), RuleValue::Token(t_unsat), 15.0),
        rule(Some(b_bt_token), RuleValue::Token(t_bt), 14.0),
        rule(Some(b_backtrack), RuleValue::Node(e_bt_out), 12.0),
        rule(Some(b_copy), RuleValue::Node(e_copy), 6.0),
        rule(None, RuleValue::Node(e_up_out), 4.0),
        rule(Some(b_not_d), RuleValue::Token(t_d), 3.0),
        rule(None, RuleValue::Node(decision_out), 1.0),
        rule(None, RuleValue::Node(tie_break), params.tie_break_weight()),
    ];
    let out = g.priority_output(v_len, rules)?;
    g.named(out, "out");

    let nodes = SatNodes {
        book,
        r_i,
        b_sat,
        b_cont,
        e_up,
        heuristic,
        b_unsat,
        b_backtrack,
        b_copy,
        b_bt_token,
        e_bt,
        e_copy,
        out,
    };
    Ok(SatProgram {
        program: Program::new(g, out)?,
        params,
        nodes,
    })
}
