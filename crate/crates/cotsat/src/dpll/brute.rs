use thiserror::Error;

use super::Verdict;
use crate::formula::{CnfFormula, Literal};

/// Largest variable count accepted by the exhaustive oracle.
pub const MAX_BRUTE_FORCE_VARS: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("brute force supports at most {MAX_BRUTE_FORCE_VARS} variables, got {0}")]
pub struct BruteForceError(pub usize);

/// Exhaustive satisfiability check over all `2^p` assignments.
pub fn brute_force_sat(f: &CnfFormula) -> Result<Verdict, BruteForceError> {
    Ok(match brute_force_model(f)? {
        Some(_) => Verdict::Sat,
        None => Verdict::Unsat,
    })
}

/// The lexicographically first satisfying assignment (bit `v-1` set means
/// `x_v` true), if any.
pub fn brute_force_model(f: &CnfFormula) -> Result<Option<Vec<Literal>>, BruteForceError> {
    let p = f.num_vars();
    if p > MAX_BRUTE_FORCE_VARS {
        return Err(BruteForceError(p));
    }
    let masks: Vec<(u32, u32)> = f
        .clauses()
        .iter()
        .map(|c| {
            c.iter().fold((0u32, 0u32), |(pos, neg), l| {
                let bit = 1u32 << (l.var() - 1);
                if l.is_positive() {
                    (pos | bit, neg)
                } else {
                    (pos, neg | bit)
                }
            })
        })
        .collect();
    for x in 0u32..(1u32 << p) {
        if masks.iter().all(|&(pos, neg)| x & pos != 0 || !x & neg != 0) {
            let model = (1..=p)
                .map(|v| {
                    let v = v as i32;
                    Literal::new(if x >> (v - 1) & 1 == 1 { v } else { -v })
                })
                .collect();
            return Ok(Some(model));
        }
    }
    Ok(None)
}
