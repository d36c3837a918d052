use thiserror::Error;

use super::{DpllState, TrailEntry};
use crate::cnf_io::{max_var_in_tokens, parse_dimacs_tokens, CnfError};
use crate::formula::{CnfFormula, Literal};
use crate::vocab::CotToken;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TranslateError {
    #[error("expected exactly one [SEP], found {0}")]
    SepCount(usize),
    #[error("malformed DIMACS part: {0}")]
    Dimacs(#[from] CnfError),
    #[error("token {token} at position {pos} cannot appear in a trace")]
    StrayToken { pos: usize, token: CotToken },
    #[error("D at position {pos} follows another D")]
    DoubleDecision { pos: usize },
    #[error("literal {lit} at position {pos} reassigns variable {}", lit.var())]
    Reassigned { pos: usize, lit: Literal },
}

/// Reads the DPLL state shown by a prompt plus partial chain of thought.
///
/// The trail is the part after the last `[BT]`; literals preceded by `D` are
/// decisions. A sequence ending in `SAT` or `UNSAT` is terminal. A trailing
/// `D` with no literal yet leaves the trail unchanged.
pub fn cot_to_state(tokens: &[CotToken]) -> Result<(CnfFormula, DpllState), TranslateError> {
    let seps: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == CotToken::Sep)
        .map(|(i, _)| i)
        .collect();
    if seps.len() != 1 {
        return Err(TranslateError::SepCount(seps.len()));
    }
    let sep = seps[0];
    let p = max_var_in_tokens(tokens);
    let formula = parse_dimacs_tokens(&tokens[..sep], p)?;

    match tokens.last() {
        Some(CotToken::Sat) => return Ok((formula, DpllState::Sat)),
        Some(CotToken::Unsat) => return Ok((formula, DpllState::Unsat)),
        _ => {}
    }

    let trace = &tokens[sep + 1..];
    let start = trace.iter().rposition(|&t| t == CotToken::Bt).map_or(0, |k| k + 1);
    let mut trail: Vec<TrailEntry> = Vec::new();
    let mut is_decision = false;
    for (offset, &tok) in trace[start..].iter().enumerate() {
        let pos = sep + 1 + start + offset;
        match tok {
            CotToken::D if is_decision => return Err(TranslateError::DoubleDecision { pos }),
            CotToken::D => is_decision = true,
            CotToken::Lit(l) => {
                let lit = Literal::new(l);
                if trail.iter().any(|e| e.lit.var() == lit.var()) {
                    return Err(TranslateError::Reassigned { pos, lit });
                }
                trail.push(TrailEntry {
                    lit,
                    decision: is_decision,
                });
                is_decision = false;
            }
            token => return Err(TranslateError::StrayToken { pos, token }),
        }
    }
    Ok((formula, DpllState::Search(trail)))
}
