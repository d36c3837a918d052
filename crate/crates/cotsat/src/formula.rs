//! Literals, 3-CNF formulas, partial assignments and their `2p`-lane
//! encodings.
//!
//! Lane `v - 1` holds the positive literal `x_v` and lane `p + v - 1` holds
//! `¬x_v`, which is also the token-id order of the SAT vocabulary.

use std::fmt;

use thiserror::Error;

/// A signed, 1-based literal. The sign is the polarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Literal(i32);

impl Literal {
    /// Panics on zero; use [`Literal::try_new`] for untrusted input.
    pub fn new(l: i32) -> Self {
        Self::try_new(l).expect("literal must be nonzero")
    }

    pub fn try_new(l: i32) -> Option<Self> {
        (l != 0 && l != i32::MIN).then_some(Self(l))
    }

    pub fn value(self) -> i32 {
        self.0
    }

    /// 1-based variable id.
    pub fn var(self) -> usize {
        self.0.unsigned_abs() as usize
    }

    pub fn is_positive(self) -> bool {
        self.0 > 0
    }

    pub fn negated(self) -> Self {
        Self(-self.0)
    }

    pub fn lane(self, num_vars: usize) -> usize {
        if self.is_positive() {
            self.var() - 1
        } else {
            num_vars + self.var() - 1
        }
    }

    pub fn from_lane(lane: usize, num_vars: usize) -> Self {
        assert!(lane < 2 * num_vars, "lane {lane} out of range");
        if lane < num_vars {
            Self(lane as i32 + 1)
        } else {
            Self(-((lane - num_vars) as i32 + 1))
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormulaError {
    #[error("clause {clause}: literal {literal} is outside variables 1..={num_vars}")]
    LiteralOutOfRange {
        clause: usize,
        literal: i32,
        num_vars: usize,
    },
    #[error("clause {clause} is empty")]
    EmptyClause { clause: usize },
    #[error("clause {clause} has {len} literals; at most 3 are allowed")]
    ClauseTooLong { clause: usize, len: usize },
    #[error("clause {clause} repeats variable {var}")]
    DuplicateVariable { clause: usize, var: usize },
    #[error("clause {clause} contains both {var} and -{var}")]
    Tautology { clause: usize, var: usize },
}

/// A CNF formula whose clauses have one to three distinct variables.
///
/// Clause and literal order are preserved because prompts are order
/// sensitive.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CnfFormula {
    num_vars: usize,
    clauses: Vec<Vec<Literal>>,
}

impl CnfFormula {
    pub fn new(num_vars: usize, clauses: Vec<Vec<Literal>>) -> Result<Self, FormulaError> {
        for (ci, clause) in clauses.iter().enumerate() {
            check_clause(ci, clause, num_vars)?;
        }
        Ok(Self { num_vars, clauses })
    }

    /// Builds a formula from signed integers, e.g. `&[&[1, -2, 3], &[-1]]`.
    pub fn from_ints(num_vars: usize, clauses: &[&[i32]]) -> Result<Self, FormulaError> {
        let mut out = Vec::with_capacity(clauses.len());
        for (ci, c) in clauses.iter().enumerate() {
            let mut lits = Vec::with_capacity(c.len());
            for &l in c.iter() {
                let lit = Literal::try_new(l).ok_or(FormulaError::LiteralOutOfRange {
                    clause: ci,
                    literal: l,
                    num_vars,
                })?;
                lits.push(lit);
            }
            out.push(lits);
        }
        Self::new(num_vars, out)
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_clauses(&self) -> usize {
        self.clauses.len()
    }

    pub fn clauses(&self) -> &[Vec<Literal>] {
        &self.clauses
    }

    /// Whether `var` appears (in either polarity) in some clause.
    pub fn mentions_var(&self, var: usize) -> bool {
        self.clauses.iter().flatten().any(|l| l.var() == var)
    }

    /// Largest variable id used by any clause (0 for the empty formula).
    pub fn max_var(&self) -> usize {
        self.clauses.iter().flatten().map(|l| l.var()).max().unwrap_or(0)
    }

    /// Replaces the literal at `(clause, slot)`, revalidating the clause.
    pub fn with_literal(&self, clause: usize, slot: usize, lit: Literal) -> Result<Self, FormulaError> {
        let mut clauses = self.clauses.clone();
        clauses[clause][slot] = lit;
        check_clause(clause, &clauses[clause], self.num_vars)?;
        Ok(Self {
            num_vars: self.num_vars,
            clauses,
        })
    }

    /// The `2p`-lane indicator encoding of one clause.
    pub fn clause_encoding(&self, clause: usize) -> Vec<u8> {
        encode_literals(self.clauses[clause].iter().copied(), self.num_vars)
    }
}

fn check_clause(ci: usize, clause: &[Literal], num_vars: usize) -> Result<(), FormulaError> {
    if clause.is_empty() {
        return Err(FormulaError::EmptyClause { clause: ci });
    }
    if clause.len() > 3 {
        return Err(FormulaError::ClauseTooLong {
            clause: ci,
            len: clause.len(),
        });
    }
    for (k, l) in clause.iter().enumerate() {
        if l.var() > num_vars {
            return Err(FormulaError::LiteralOutOfRange {
                clause: ci,
                literal: l.value(),
                num_vars,
            });
        }
        for m in &clause[..k] {
            if m.var() == l.var() {
                return Err(if *m == *l {
                    FormulaError::DuplicateVariable {
                        clause: ci,
                        var: l.var(),
                    }
                } else {
                    FormulaError::Tautology {
                        clause: ci,
                        var: l.var(),
                    }
                });
            }
        }
    }
    Ok(())
}

/// Indicator encoding of a set of literals over `2 * num_vars` lanes.
pub fn encode_literals(lits: impl IntoIterator<Item = Literal>, num_vars: usize) -> Vec<u8> {
    let mut e = vec![0u8; 2 * num_vars];
    for l in lits {
        e[l.lane(num_vars)] = 1;
    }
    e
}

/// Per-variable truth values; `None` means unassigned.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PartialAssignment {
    values: Vec<Option<bool>>,
}

impl PartialAssignment {
    pub fn empty(num_vars: usize) -> Self {
        Self {
            values: vec![None; num_vars],
        }
    }

    /// Later literals overwrite earlier ones on the same variable.
    pub fn from_literals(num_vars: usize, lits: impl IntoIterator<Item = Literal>) -> Self {
        let mut a = Self::empty(num_vars);
        for l in lits {
            a.assign(l);
        }
        a
    }

    pub fn num_vars(&self) -> usize {
        self.values.len()
    }

    pub fn assign(&mut self, lit: Literal) {
        self.values[lit.var() - 1] = Some(lit.is_positive());
    }

    pub fn unassign(&mut self, var: usize) {
        self.values[var - 1] = None;
    }

    pub fn var_value(&self, var: usize) -> Option<bool> {
        self.values.get(var - 1).copied().flatten()
    }

    /// `Some(true)` if the literal is true, `Some(false)` if false.
    pub fn lit_value(&self, lit: Literal) -> Option<bool> {
        self.var_value(lit.var()).map(|v| v == lit.is_positive())
    }

    pub fn is_assigned(&self, var: usize) -> bool {
        self.var_value(var).is_some()
    }

    pub fn satisfies_clause(&self, clause: &[Literal]) -> bool {
        clause.iter().any(|&l| self.lit_value(l) == Some(true))
    }

    pub fn falsifies_clause(&self, clause: &[Literal]) -> bool {
        clause.iter().all(|&l| self.lit_value(l) == Some(false))
    }

    pub fn satisfies(&self, f: &CnfFormula) -> bool {
        f.clauses().iter().all(|c| self.satisfies_clause(c))
    }

    /// Index of the first clause all of whose literals are false.
    pub fn conflict_clause(&self, f: &CnfFormula) -> Option<usize> {
        f.clauses().iter().position(|c| self.falsifies_clause(c))
    }

    /// Literals forced by a clause whose other literals are all false,
    /// sorted by lane and deduplicated.
    pub fn deducible(&self, f: &CnfFormula) -> Vec<Literal> {
        let mut out = Vec::new();
        for c in f.clauses() {
            if self.satisfies_clause(c) {
                continue;
            }
            let mut open = c.iter().filter(|&&l| self.lit_value(l).is_none());
            if let (Some(&l), None) = (open.next(), open.next()) {
                out.push(l);
            }
        }
        let p = self.num_vars();
        out.sort_by_key(|l| l.lane(p));
        out.dedup();
        out
    }

    pub fn literals(&self) -> Vec<Literal> {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|b| Literal::new(if b { i as i32 + 1 } else { -(i as i32 + 1) })))
            .collect()
    }

    pub fn encoding(&self) -> Vec<u8> {
        encode_literals(self.literals(), self.num_vars())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lanes_follow_token_order() {
        assert_eq!(Literal::new(1).lane(4), 0);
        assert_eq!(Literal::new(4).lane(4), 3);
        assert_eq!(Literal::new(-1).lane(4), 4);
        assert_eq!(Literal::new(-4).lane(4), 7);
        for lane in 0..8 {
            assert_eq!(Literal::from_lane(lane, 4).lane(4), lane);
        }
    }

    #[test]
    fn validation_errors() {
        assert_eq!(
            CnfFormula::from_ints(2, &[&[1, 3]]),
            Err(FormulaError::LiteralOutOfRange {
                clause: 0,
                literal: 3,
                num_vars: 2
            })
        );
        assert_eq!(
            CnfFormula::from_ints(3, &[&[1, -1]]),
            Err(FormulaError::Tautology { clause: 0, var: 1 })
        );
        assert_eq!(
            CnfFormula::from_ints(3, &[&[2], &[2, 2]]),
            Err(FormulaError::DuplicateVariable { clause: 1, var: 2 })
        );
        assert!(matches!(
            CnfFormula::from_ints(4, &[&[1, 2, 3, 4]]),
            Err(FormulaError::ClauseTooLong { clause: 0, len: 4 })
        ));
        assert!(matches!(
            CnfFormula::from_ints(4, &[&[]]),
            Err(FormulaError::EmptyClause { clause: 0 })
        ));
    }

    #[test]
    fn encodings_and_evaluation() {
        let f = CnfFormula::from_ints(2, &[&[1, -2]]).unwrap();
        assert_eq!(f.clause_encoding(0), vec![1, 0, 0, 1]);
        let a = PartialAssignment::from_literals(2, [Literal::new(1)]);
        assert!(a.satisfies(&f));
        assert_eq!(a.encoding(), vec![1, 0, 0, 0]);
        let b = PartialAssignment::from_literals(2, [Literal::new(-1), Literal::new(2)]);
        assert_eq!(b.conflict_clause(&f), Some(0));
    }

    #[test]
    fn deducible_literals() {
        let f = CnfFormula::from_ints(3, &[&[-1, -2, 3], &[-1, 2], &[1, 2, 3]]).unwrap();
        let a = PartialAssignment::from_literals(3, [Literal::new(1)]);
        assert_eq!(a.deducible(&f), vec![Literal::new(2)]);
        let a = PartialAssignment::from_literals(3, [Literal::new(1), Literal::new(2)]);
        assert_eq!(a.deducible(&f), vec![Literal::new(3)]);
    }
}
