use std::fmt;

use super::{step, DpllState, Rule, TrailEntry};
use crate::cnf_io::{max_var_in_tokens, parse_prompt, CnfError};
use crate::formula::{CnfFormula, Literal};
use crate::vocab::CotToken;

/// The first generated token that breaks the DPLL rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Index into the generated tokens. Equal to their length when the trace
    /// stops without a verdict.
    pub index: usize,
    pub token: Option<CotToken>,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.token {
            Some(t) => write!(f, "token {} ({t}): {}", self.index, self.reason),
            None => write!(f, "token {}: {}", self.index, self.reason),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Validation {
    pub valid: bool,
    pub first_violation: Option<Violation>,
}

struct Replay {
    expected: Vec<CotToken>,
    next: usize,
    trail: Vec<TrailEntry>,
}

/// Replays `generated` against the formula in `prompt`.
///
/// Every `D l` must be a legal Decide, every bare literal a legal
/// UnitPropagate, `[BT]` needs a conflict and a decision to flip and must be
/// followed by an exact replay of the trail before that decision and then the
/// flipped literal, `SAT` needs the trail to satisfy every clause and `UNSAT`
/// needs a conflict with no decisions. A trace that stops without a verdict
/// is reported at index `generated.len()`.
pub fn validate_full_trace(prompt: &[CotToken], generated: &[CotToken]) -> Result<Validation, CnfError> {
    let p = max_var_in_tokens(prompt);
    let f = parse_prompt(prompt, p)?;
    let first_violation = first_violation(&f, generated);
    Ok(Validation {
        valid: first_violation.is_none(),
        first_violation,
    })
}

fn first_violation(f: &CnfFormula, generated: &[CotToken]) -> Option<Violation> {
    let p = f.num_vars();
    let mut state = DpllState::initial();
    let mut pending_d = false;
    let mut replay: Option<Replay> = None;
    let fail = |index: usize, reason: String| {
        Some(Violation {
            index,
            token: generated.get(index).copied(),
            reason,
        })
    };

    for (i, &tok) in generated.iter().enumerate() {
        if !matches!(state, DpllState::Search(_)) {
            return fail(i, "token after the verdict".into());
        }
        if let Some(r) = replay.as_mut() {
            let want = r.expected[r.next];
            if tok != want {
                return fail(i, format!("replay after [BT] expected {want}"));
            }
            r.next += 1;
            if r.next == r.expected.len() {
                state = DpllState::Search(replay.take().expect("active replay").trail);
            }
            continue;
        }
        let rule = match tok {
            CotToken::D if pending_d => return fail(i, "D follows D".into()),
            CotToken::D => {
                pending_d = true;
                continue;
            }
            CotToken::Lit(l) => {
                let lit = Literal::new(l);
                if lit.var() > p {
                    return fail(i, format!("variable {} is out of range", lit.var()));
                }
                if std::mem::take(&mut pending_d) {
                    Rule::Decide(lit)
                } else {
                    Rule::UnitPropagate(lit)
                }
            }
            _ if pending_d => return fail(i, "D must be followed by a literal".into()),
            CotToken::Bt => Rule::BackTrack,
            CotToken::Sat => Rule::Success,
            CotToken::Unsat => Rule::Fail,
            CotToken::Zero | CotToken::Sep | CotToken::Bos => return fail(i, "token cannot appear in a trace".into()),
        };
        let before = state.trail().expect("search state").to_vec();
        match step(f, &state, rule) {
            Err(e) => return fail(i, e.to_string()),
            Ok(next) => {
                if rule == Rule::BackTrack {
                    let k = before.iter().rposition(|e| e.decision).expect("checked by step");
                    let mut expected = Vec::new();
                    for e in &before[..k] {
                        if e.decision {
                            expected.push(CotToken::D);
                        }
                        expected.push(CotToken::Lit(e.lit.value()));
                    }
                    expected.push(CotToken::Lit(before[k].lit.negated().value()));
                    let DpllState::Search(trail) = next else {
                        unreachable!("backtrack yields a search state")
                    };
                    replay = Some(Replay {
                        expected,
                        next: 0,
                        trail,
                    });
                    state = DpllState::Search(Vec::new());
                } else {
                    state = next;
                }
            }
        }
    }
    if matches!(state, DpllState::Search(_)) {
        return fail(generated.len(), "trace ends without SAT or UNSAT".into());
    }
    None
}
