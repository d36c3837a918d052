//! DIMACS text and token-stream conversion.
//!
//! Token prompts look like `[BOS] 1 -2 3 0 -1 2 0 [SEP]`: every clause is
//! terminated by `0`, including the last one, and there is no `p cnf`
//! header. The text parser accepts the usual DIMACS header and comment lines
//! and drops them.

use thiserror::Error;

use crate::formula::{CnfFormula, FormulaError, Literal};
use crate::vocab::CotToken;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CnfError {
    #[error("prompt must start with [BOS]")]
    MissingBos,
    #[error("prompt must end with [SEP]")]
    MissingSep,
    #[error("unexpected token {token} at position {pos}")]
    UnexpectedToken { pos: usize, token: String },
    #[error("clause ending at position {pos} is not terminated by 0")]
    MissingTerminator { pos: usize },
    #[error("literal {literal} at position {pos} is outside variables 1..={num_vars}")]
    LiteralOutOfRange { pos: usize, literal: i32, num_vars: usize },
    #[error("invalid clause ending at position {pos}: {source}")]
    BadClause {
        pos: usize,
        #[source]
        source: FormulaError,
    },
    #[error("malformed header {0:?}")]
    BadHeader(String),
}

/// `[BOS]`, the clause literals each followed by `0`, then `[SEP]`.
pub fn encode_to_tokens(f: &CnfFormula) -> Vec<CotToken> {
    let mut out = Vec::with_capacity(2 + f.num_clauses() * 4);
    out.push(CotToken::Bos);
    for c in f.clauses() {
        out.extend(c.iter().map(|l| CotToken::Lit(l.value())));
        out.push(CotToken::Zero);
    }
    out.push(CotToken::Sep);
    out
}

/// Parses `[BOS] <clauses>` (no `[SEP]`), the DIMACS part of a prompt.
///
/// Token positions in errors are indices into `tokens`.
pub fn parse_dimacs_tokens(tokens: &[CotToken], num_vars: usize) -> Result<CnfFormula, CnfError> {
    if tokens.first() != Some(&CotToken::Bos) {
        return Err(CnfError::MissingBos);
    }
    let mut clauses = Vec::new();
    let mut current: Vec<Literal> = Vec::new();
    for (pos, &tok) in tokens.iter().enumerate().skip(1) {
        match tok {
            CotToken::Lit(l) => {
                let lit = Literal::new(l);
                if lit.var() > num_vars {
                    return Err(CnfError::LiteralOutOfRange {
                        pos,
                        literal: l,
                        num_vars,
                    });
                }
                current.push(lit);
            }
            CotToken::Zero => {
                let clause = std::mem::take(&mut current);
                check_one(&clause, clauses.len(), num_vars, pos)?;
                clauses.push(clause);
            }
            other => {
                return Err(CnfError::UnexpectedToken {
                    pos,
                    token: other.to_string(),
                })
            }
        }
    }
    if !current.is_empty() {
        return Err(CnfError::MissingTerminator { pos: tokens.len() - 1 });
    }
    CnfFormula::new(num_vars, clauses).map_err(|source| CnfError::BadClause {
        pos: tokens.len() - 1,
        source,
    })
}

fn check_one(clause: &[Literal], index: usize, num_vars: usize, pos: usize) -> Result<(), CnfError> {
    CnfFormula::new(num_vars, vec![clause.to_vec()])
        .map(|_| ())
        .map_err(|source| CnfError::BadClause {
            pos,
            source: relabel(source, index),
        })
}

fn relabel(e: FormulaError, clause: usize) -> FormulaError {
    match e {
        FormulaError::LiteralOutOfRange { literal, num_vars, .. } => FormulaError::LiteralOutOfRange {
            clause,
            literal,
            num_vars,
        },
        FormulaError::EmptyClause { .. } => FormulaError::EmptyClause { clause },
        FormulaError::ClauseTooLong { len, .. } => FormulaError::ClauseTooLong { clause, len },
        FormulaError::DuplicateVariable { var, .. } => FormulaError::DuplicateVariable { clause, var },
        FormulaError::Tautology { var, .. } => FormulaError::Tautology { clause, var },
    }
}

/// Parses a complete prompt `[BOS] ... [SEP]`.
pub fn parse_prompt(tokens: &[CotToken], num_vars: usize) -> Result<CnfFormula, CnfError> {
    match tokens.split_last() {
        Some((CotToken::Sep, body)) => parse_dimacs_tokens(body, num_vars),
        _ => Err(CnfError::MissingSep),
    }
}

/// Largest variable mentioned by literal tokens (0 if none).
pub fn max_var_in_tokens(tokens: &[CotToken]) -> usize {
    tokens
        .iter()
        .filter_map(|t| match t {
            CotToken::Lit(l) => Some(l.unsigned_abs() as usize),
            _ => None,
        })
        .max()
        .unwrap_or(0)
}

/// Parses DIMACS text. `num_vars` overrides the header; without either, the
/// largest variable id is used.
pub fn parse_text(s: &str, num_vars: Option<usize>) -> Result<CnfFormula, CnfError> {
    let mut header_vars = None;
    let mut ints: Vec<i64> = Vec::new();
    for line in s.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('c') || trimmed.starts_with('%') {
            continue;
        }
        if trimmed.starts_with('p') {
            let fields: Vec<&str> = trimmed.split_whitespace().collect();
            match fields.as_slice() {
                ["p", "cnf", v, _c] => {
                    header_vars = Some(
                        v.parse::<usize>()
                            .map_err(|_| CnfError::BadHeader(trimmed.to_string()))?,
                    )
                }
                _ => return Err(CnfError::BadHeader(trimmed.to_string())),
            }
            continue;
        }
        for word in trimmed.split_whitespace() {
            let v = word.parse::<i64>().map_err(|_| CnfError::UnexpectedToken {
                pos: ints.len(),
                token: word.to_string(),
            })?;
            ints.push(v);
        }
    }
    let mut tokens = Vec::with_capacity(ints.len() + 1);
    tokens.push(CotToken::Bos);
    for (i, &v) in ints.iter().enumerate() {
        if v == 0 {
            tokens.push(CotToken::Zero);
        } else {
            let l = i32::try_from(v).map_err(|_| CnfError::UnexpectedToken {
                pos: i,
                token: v.to_string(),
            })?;
            tokens.push(CotToken::Lit(l));
        }
    }
    let p = num_vars.or(header_vars).unwrap_or_else(|| max_var_in_tokens(&tokens));
    // Token positions are one past the integer index because of [BOS].
    parse_dimacs_tokens(&tokens, p).map_err(shift_pos)
}

fn shift_pos(e: CnfError) -> CnfError {
    let back = |pos: usize| pos.saturating_sub(1);
    match e {
        CnfError::UnexpectedToken { pos, token } => CnfError::UnexpectedToken { pos: back(pos), token },
        CnfError::MissingTerminator { pos } => CnfError::MissingTerminator { pos: back(pos) },
        CnfError::LiteralOutOfRange { pos, literal, num_vars } => CnfError::LiteralOutOfRange {
            pos: back(pos),
            literal,
            num_vars,
        },
        CnfError::BadClause { pos, source } => CnfError::BadClause { pos: back(pos), source },
        other => other,
    }
}

/// DIMACS text with a `p cnf` header and one clause per line.
pub fn emit_text(f: &CnfFormula) -> String {
    let mut s = format!("p cnf {} {}\n", f.num_vars(), f.num_clauses());
    for c in f.clauses() {
        for l in c {
            s.push_str(&l.to_string());
            s.push(' ');
        }
        s.push_str("0\n");
    }
    s
}

/// Clause literals on one line, `0`-terminated, without a header.
pub fn emit_inline(f: &CnfFormula) -> String {
    let mut parts = Vec::new();
    for c in f.clauses() {
        parts.extend(c.iter().map(|l| l.to_string()));
        parts.push("0".to_string());
    }
    parts.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{parse_token_string, token_string};

    #[test]
    fn empty_formula_prompt() {
        let f = CnfFormula::new(3, vec![]).unwrap();
        assert_eq!(token_string(&encode_to_tokens(&f)), "[BOS] [SEP]");
        assert_eq!(parse_prompt(&encode_to_tokens(&f), 3).unwrap(), f);
    }

    #[test]
    fn located_errors() {
        let t = parse_token_string("[BOS] 1 2 0 -3 D 0").unwrap();
        assert_eq!(
            parse_dimacs_tokens(&t, 3),
            Err(CnfError::UnexpectedToken {
                pos: 5,
                token: "D".into()
            })
        );
        let t = parse_token_string("[BOS] 1 2 0 -3").unwrap();
        assert_eq!(parse_dimacs_tokens(&t, 3), Err(CnfError::MissingTerminator { pos: 4 }));
        let t = parse_token_string("[BOS] 1 5 0").unwrap();
        assert!(matches!(
            parse_dimacs_tokens(&t, 3),
            Err(CnfError::LiteralOutOfRange { pos: 2, literal: 5, .. })
        ));
        let t = parse_token_string("[BOS] 1 2 0 1 2 3 -4 0").unwrap();
        assert!(matches!(
            parse_dimacs_tokens(&t, 4),
            Err(CnfError::BadClause {
                pos: 8,
                source: FormulaError::ClauseTooLong { clause: 1, len: 4 }
            })
        ));
        let t = parse_token_string("[BOS] 1 -1 0").unwrap();
        assert!(matches!(
            parse_dimacs_tokens(&t, 2),
            Err(CnfError::BadClause {
                source: FormulaError::Tautology { clause: 0, var: 1 },
                ..
            })
        ));
        assert_eq!(parse_dimacs_tokens(&t[1..], 2), Err(CnfError::MissingBos));
    }

    #[test]
    fn text_header_and_comments() {
        let f = parse_text("c hello\np cnf 5 2\n1 -2 0\n3 0\n", None).unwrap();
        assert_eq!(f.num_vars(), 5);
        assert_eq!(f.num_clauses(), 2);
        assert_eq!(parse_text(&emit_text(&f), None).unwrap(), f);
        assert_eq!(emit_inline(&f), "1 -2 0 3 0");
        assert!(matches!(
            parse_text("p cnf x 1\n1 0", None),
            Err(CnfError::BadHeader(_))
        ));
        assert!(matches!(
            parse_text("1 2 0 3", None),
            Err(CnfError::MissingTerminator { pos: 3 })
        ));
    }
}
