use super::heuristic::Heuristic;
use super::{trail_assignment, DpllState, TrailEntry, Verdict};
use crate::cnf_io::encode_to_tokens;
use crate::formula::CnfFormula;
use crate::vocab::CotToken;

/// What a generated token does in the trace grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    /// The `D` marker announcing a decision.
    DecisionMarker,
    Decision,
    Propagation,
    Backtrack,
    /// A token re-emitted from the previous attempt after `[BT]`.
    Replay,
    /// The negated decision that closes a replay.
    Flip,
    Terminal,
    /// A token that does not fit the grammar at all.
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Halting {
    Halted(Verdict),
    BudgetExhausted,
}

/// A prompt together with the tokens generated after it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub prompt: Vec<CotToken>,
    pub generated: Vec<CotToken>,
    pub roles: Vec<TokenRole>,
    pub halting: Halting,
}

impl TraceRecord {
    /// Annotates `generated` from its structure alone.
    pub fn from_tokens(prompt: Vec<CotToken>, generated: Vec<CotToken>) -> Self {
        let roles = annotate(&generated);
        let halting = match generated.last() {
            Some(CotToken::Sat) => Halting::Halted(Verdict::Sat),
            Some(CotToken::Unsat) => Halting::Halted(Verdict::Unsat),
            _ => Halting::BudgetExhausted,
        };
        Self {
            prompt,
            generated,
            roles,
            halting,
        }
    }

    pub fn verdict(&self) -> Option<Verdict> {
        match self.halting {
            Halting::Halted(v) => Some(v),
            Halting::BudgetExhausted => None,
        }
    }

    pub fn cot_len(&self) -> usize {
        self.generated.len()
    }

    pub fn full_tokens(&self) -> Vec<CotToken> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.generated);
        t
    }
}

fn annotate(generated: &[CotToken]) -> Vec<TokenRole> {
    let mut roles = Vec::with_capacity(generated.len());
    let mut segment: Vec<CotToken> = Vec::new();
    let mut replay: Option<usize> = None;
    for &tok in generated {
        let role = match (tok, replay) {
            (CotToken::D | CotToken::Lit(_), Some(0)) => {
                replay = None;
                if matches!(tok, CotToken::Lit(_)) {
                    TokenRole::Flip
                } else {
                    TokenRole::Invalid
                }
            }
            (CotToken::D | CotToken::Lit(_), Some(n)) => {
                replay = Some(n - 1);
                TokenRole::Replay
            }
            (CotToken::D, None) => TokenRole::DecisionMarker,
            (CotToken::Lit(_), None) => {
                if segment.last() == Some(&CotToken::D) {
                    TokenRole::Decision
                } else {
                    TokenRole::Propagation
                }
            }
            (CotToken::Bt, _) => {
                replay = segment.iter().rposition(|&t| t == CotToken::D);
                segment.clear();
                roles.push(TokenRole::Backtrack);
                continue;
            }
            (CotToken::Sat | CotToken::Unsat, _) => TokenRole::Terminal,
            _ => TokenRole::Invalid,
        };
        segment.push(tok);
        roles.push(role);
    }
    roles
}

/// A solver run with the chain-of-thought-visible state after each token.
#[derive(Debug, Clone)]
pub struct SolveRun {
    pub verdict: Verdict,
    pub trace: TraceRecord,
    /// `states[i]` is the state a reader of the tokens sees after
    /// `generated[i]`: the trail rebuilt since the last `[BT]`.
    pub states: Vec<DpllState>,
    /// Abstract transitions applied (decisions, propagations, backtracks and
    /// the final Success/Fail).
    pub transitions: usize,
}

/// Runs DPLL with `h` and returns the verdict and emitted trace.
pub fn solve_with_trace(f: &CnfFormula, h: &dyn Heuristic) -> (Verdict, TraceRecord) {
    let run = solve_with_states(f, h);
    (run.verdict, run.trace)
}

/// Runs DPLL with `h`, recording every visible state.
///
/// The token grammar: decisions are `D l`, propagations a bare `l`, a
/// conflict with decisions emits `[BT]` followed by the trail up to the last
/// decision (with its `D` markers) and the negated decision, and the run ends
/// with `SAT` or `UNSAT`.
pub fn solve_with_states(f: &CnfFormula, h: &dyn Heuristic) -> SolveRun {
    let p = f.num_vars();
    let mut trail: Vec<TrailEntry> = Vec::new();
    let mut generated = Vec::new();
    let mut roles = Vec::new();
    let mut states = Vec::new();
    let mut visible: Vec<TrailEntry> = Vec::new();
    let mut transitions = 0usize;

    let mut emit = |tok: CotToken, role: TokenRole, visible: &[TrailEntry], terminal: Option<DpllState>| {
        generated.push(tok);
        roles.push(role);
        states.push(terminal.unwrap_or_else(|| DpllState::Search(visible.to_vec())));
    };

    let verdict = loop {
        let a = trail_assignment(&trail, p);
        transitions += 1;
        if a.satisfies(f) {
            emit(CotToken::Sat, TokenRole::Terminal, &visible, Some(DpllState::Sat));
            break Verdict::Sat;
        }
        if a.conflict_clause(f).is_some() {
            let Some(k) = trail.iter().rposition(|e| e.decision) else {
                emit(CotToken::Unsat, TokenRole::Terminal, &visible, Some(DpllState::Unsat));
                break Verdict::Unsat;
            };
            visible.clear();
            emit(CotToken::Bt, TokenRole::Backtrack, &visible, None);
            for e in &trail[..k] {
                if e.decision {
                    emit(CotToken::D, TokenRole::Replay, &visible, None);
                }
                visible.push(*e);
                emit(CotToken::Lit(e.lit.value()), TokenRole::Replay, &visible, None);
            }
            let flipped = TrailEntry::implied(trail[k].lit.negated());
            trail.truncate(k);
            trail.push(flipped);
            visible.push(flipped);
            emit(CotToken::Lit(flipped.lit.value()), TokenRole::Flip, &visible, None);
            continue;
        }
        let candidates = a.deducible(f);
        let entry = if candidates.is_empty() {
            let l = h.decide(f, &a);
            emit(CotToken::D, TokenRole::DecisionMarker, &visible, None);
            TrailEntry::decision(l)
        } else {
            TrailEntry::implied(h.propagate(f, &a, &candidates))
        };
        trail.push(entry);
        visible.push(entry);
        let role = if entry.decision {
            TokenRole::Decision
        } else {
            TokenRole::Propagation
        };
        emit(CotToken::Lit(entry.lit.value()), role, &visible, None);
    };

    let trace = TraceRecord {
        prompt: encode_to_tokens(f),
        generated,
        roles,
        halting: Halting::Halted(verdict),
    };
    SolveRun {
        verdict,
        trace,
        states,
        transitions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpll::heuristic::{LowestId, ModelMirror};
    use crate::vocab::token_string;

    #[test]
    fn empty_formula_is_sat_immediately() {
        let f = CnfFormula::new(3, vec![]).unwrap();
        let (v, t) = solve_with_trace(&f, &LowestId);
        assert_eq!(v, Verdict::Sat);
        assert_eq!(token_string(&t.generated), "SAT");
    }

    #[test]
    fn contradiction_trace() {
        let f = CnfFormula::from_ints(1, &[&[1], &[-1]]).unwrap();
        let (v, t) = solve_with_trace(&f, &LowestId);
        assert_eq!(v, Verdict::Unsat);
        assert_eq!(token_string(&t.generated), "1 UNSAT");
    }

    #[test]
    fn backtrack_replays_prefix() {
        // Deciding 1 then 2 forces a conflict on (-1 -2 3) and (-1 -2 -3).
        let f = CnfFormula::from_ints(3, &[&[-1, -2, 3], &[-1, -2, -3], &[1, 2, 3]]).unwrap();
        let (v, t) = solve_with_trace(&f, &LowestId);
        assert_eq!(v, Verdict::Sat);
        assert_eq!(token_string(&t.generated), "D 1 D 2 3 [BT] D 1 -2 SAT");
        assert_eq!(
            t.roles,
            vec![
                TokenRole::DecisionMarker,
                TokenRole::Decision,
                TokenRole::DecisionMarker,
                TokenRole::Decision,
                TokenRole::Propagation,
                TokenRole::Backtrack,
                TokenRole::Replay,
                TokenRole::Replay,
                TokenRole::Flip,
                TokenRole::Terminal,
            ]
        );
        let again = TraceRecord::from_tokens(t.prompt.clone(), t.generated.clone());
        assert_eq!(again, t);
    }

    #[test]
    fn single_clause_is_quick() {
        let f = CnfFormula::from_ints(3, &[&[1, 2, 3]]).unwrap();
        for h in [&LowestId as &dyn Heuristic, &ModelMirror] {
            let (v, t) = solve_with_trace(&f, h);
            assert_eq!(v, Verdict::Sat);
            assert!(t.cot_len() <= 2 * 3 + 2);
        }
    }
}
