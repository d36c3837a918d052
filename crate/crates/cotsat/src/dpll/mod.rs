//! Abstract DPLL: the reference transition system, a solver that emits the
//! chain-of-thought grammar, the trace-to-state translation and a full-trace
//! validator.
//!
//! States are `M ∥ F` where `M` is a trail of annotated literals. The
//! transition rules are UnitPropagate, Decide, BackTrack (negate the last
//! decision, a special case of Backjump), Fail and Success.

mod brute;
mod heuristic;
mod solver;
mod translate;
mod validate;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formula::{CnfFormula, Literal, PartialAssignment};

pub use brute::{brute_force_model, brute_force_sat, BruteForceError, MAX_BRUTE_FORCE_VARS};
pub use heuristic::{Heuristic, LowestId, ModelMirror};
pub use solver::{solve_with_states, solve_with_trace, Halting, SolveRun, TokenRole, TraceRecord};
pub use translate::{cot_to_state, TranslateError};
pub use validate::{validate_full_trace, Validation, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Sat,
    Unsat,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Sat => "SAT",
            Verdict::Unsat => "UNSAT",
        })
    }
}

/// One annotated literal of the trail `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrailEntry {
    pub lit: Literal,
    pub decision: bool,
}

impl TrailEntry {
    pub fn decision(lit: Literal) -> Self {
        Self { lit, decision: true }
    }

    pub fn implied(lit: Literal) -> Self {
        Self { lit, decision: false }
    }
}

impl fmt::Display for TrailEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.decision {
            write!(f, "{}^d", self.lit)
        } else {
            write!(f, "{}", self.lit)
        }
    }
}

/// A DPLL state. The formula travels alongside rather than inside the state.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum DpllState {
    Sat,
    Unsat,
    Search(Vec<TrailEntry>),
}

impl DpllState {
    pub fn initial() -> Self {
        DpllState::Search(Vec::new())
    }

    pub fn trail(&self) -> Option<&[TrailEntry]> {
        match self {
            DpllState::Search(t) => Some(t),
            _ => None,
        }
    }
}

/// Assignment view of a trail.
pub fn trail_assignment(trail: &[TrailEntry], num_vars: usize) -> PartialAssignment {
    PartialAssignment::from_literals(num_vars, trail.iter().map(|e| e.lit))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    UnitPropagate(Literal),
    Decide(Literal),
    BackTrack,
    Fail,
    Success,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StepError {
    #[error("state is terminal")]
    Terminal,
    #[error("literal {0} is outside the formula's variables")]
    OutOfRange(Literal),
    #[error("variable of {0} is already assigned")]
    Assigned(Literal),
    #[error("neither {0} nor its negation occurs in the formula")]
    NotInFormula(Literal),
    #[error("no clause has {0} as its only non-false literal")]
    NotUnit(Literal),
    #[error("no clause is falsified by the trail")]
    NoConflict,
    #[error("the trail has no decision literal to backtrack")]
    NoDecision,
    #[error("the trail still contains decision literals")]
    DecisionsRemain,
    #[error("clause {0} is not satisfied by the trail")]
    Unsatisfied(usize),
}

/// Applies one transition rule, checking its side conditions.
pub fn step(f: &CnfFormula, state: &DpllState, rule: Rule) -> Result<DpllState, StepError> {
    let trail = state.trail().ok_or(StepError::Terminal)?;
    let p = f.num_vars();
    let a = trail_assignment(trail, p);
    let check_open = |l: Literal| {
        if l.var() > p {
            Err(StepError::OutOfRange(l))
        } else if a.is_assigned(l.var()) {
            Err(StepError::Assigned(l))
        } else {
            Ok(())
        }
    };
    match rule {
        Rule::UnitPropagate(l) => {
            check_open(l)?;
            let justified = f
                .clauses()
                .iter()
                .any(|c| c.contains(&l) && c.iter().all(|&m| m == l || a.lit_value(m) == Some(false)));
            if !justified {
                return Err(StepError::NotUnit(l));
            }
            let mut next = trail.to_vec();
            next.push(TrailEntry::implied(l));
            Ok(DpllState::Search(next))
        }
        Rule::Decide(l) => {
            check_open(l)?;
            if !f.mentions_var(l.var()) {
                return Err(StepError::NotInFormula(l));
            }
            let mut next = trail.to_vec();
            next.push(TrailEntry::decision(l));
            Ok(DpllState::Search(next))
        }
        Rule::BackTrack => {
            a.conflict_clause(f).ok_or(StepError::NoConflict)?;
            let k = trail.iter().rposition(|e| e.decision).ok_or(StepError::NoDecision)?;
            let mut next = trail[..k].to_vec();
            next.push(TrailEntry::implied(trail[k].lit.negated()));
            Ok(DpllState::Search(next))
        }
        Rule::Fail => {
            a.conflict_clause(f).ok_or(StepError::NoConflict)?;
            if trail.iter().any(|e| e.decision) {
                return Err(StepError::DecisionsRemain);
            }
            Ok(DpllState::Unsat)
        }
        Rule::Success => match f.clauses().iter().position(|c| !a.satisfies_clause(c)) {
            Some(ci) => Err(StepError::Unsatisfied(ci)),
            None => Ok(DpllState::Sat),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lit(l: i32) -> Literal {
        Literal::new(l)
    }

    #[test]
    fn forced_unsat() {
        let f = CnfFormula::from_ints(1, &[&[1], &[-1]]).unwrap();
        let s = step(&f, &DpllState::initial(), Rule::UnitPropagate(lit(1))).unwrap();
        assert_eq!(s, DpllState::Search(vec![TrailEntry::implied(lit(1))]));
        assert_eq!(step(&f, &s, Rule::Fail), Ok(DpllState::Unsat));
        assert_eq!(step(&f, &s, Rule::BackTrack), Err(StepError::NoDecision));
    }

    #[test]
    fn side_conditions() {
        let f = CnfFormula::from_ints(3, &[&[1, 2], &[-1, 2]]).unwrap();
        let s0 = DpllState::initial();
        assert_eq!(
            step(&f, &s0, Rule::UnitPropagate(lit(2))),
            Err(StepError::NotUnit(lit(2)))
        );
        assert_eq!(
            step(&f, &s0, Rule::Decide(lit(3))),
            Err(StepError::NotInFormula(lit(3)))
        );
        assert_eq!(step(&f, &s0, Rule::Decide(lit(4))), Err(StepError::OutOfRange(lit(4))));
        assert_eq!(step(&f, &s0, Rule::Fail), Err(StepError::NoConflict));
        let s1 = step(&f, &s0, Rule::Decide(lit(-2))).unwrap();
        assert_eq!(step(&f, &s1, Rule::Decide(lit(2))), Err(StepError::Assigned(lit(2))));
        let s2 = step(&f, &s1, Rule::UnitPropagate(lit(1))).unwrap();
        assert_eq!(step(&f, &s2, Rule::Success), Err(StepError::Unsatisfied(1)));
        let s3 = step(&f, &s2, Rule::BackTrack).unwrap();
        assert_eq!(s3, DpllState::Search(vec![TrailEntry::implied(lit(2))]));
        assert_eq!(step(&f, &s3, Rule::Success), Ok(DpllState::Sat));
        assert_eq!(step(&f, &DpllState::Sat, Rule::Success), Err(StepError::Terminal));
    }
}
