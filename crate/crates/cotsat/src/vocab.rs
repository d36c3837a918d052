//! Token vocabularies.
//!
//! The DSL and the compiler work with arbitrary ordered vocabularies, while
//! everything SAT-specific uses [`Vocabulary::sat`]: the `2p` literal tokens
//! followed by `0`, `[SEP]`, `[BT]`, `[BOS]`, `D`, `SAT` and `UNSAT`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VocabError {
    #[error("vocabulary is empty")]
    Empty,
    #[error("duplicate token {0:?} in vocabulary")]
    Duplicate(String),
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("token id {0} is out of range for a vocabulary of size {1}")]
    IdOutOfRange(usize, usize),
    #[error("cannot parse {0:?} as a chain-of-thought token")]
    BadToken(String),
}

/// Ordered token list with a reverse index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self, VocabError> {
        if tokens.is_empty() {
            return Err(VocabError::Empty);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(VocabError::Duplicate(t.clone()));
            }
        }
        Ok(Self { tokens, index })
    }

    /// The SAT vocabulary for `num_vars` variables.
    pub fn sat(num_vars: usize) -> Self {
        let mut tokens: Vec<String> = (1..=num_vars).map(|v| v.to_string()).collect();
        tokens.extend((1..=num_vars).map(|v| format!("-{v}")));
        for special in ["0", "[SEP]", "[BT]", "[BOS]", "D", "SAT", "UNSAT"] {
            tokens.push(special.to_string());
        }
        Self::new(tokens).expect("SAT vocabulary tokens are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn require(&self, token: &str) -> Result<usize, VocabError> {
        self.id(token)
            .ok_or_else(|| VocabError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Result<&str, VocabError> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(VocabError::IdOutOfRange(id, self.tokens.len()))
    }

    /// Number of variables if this is a SAT vocabulary, recognised by its
    /// size and the position of the `0` token.
    pub fn sat_num_vars(&self) -> Option<usize> {
        let n = self.len().checked_sub(7)?;
        if n % 2 != 0 {
            return None;
        }
        let p = n / 2;
        (*self == Self::sat(p)).then_some(p)
    }

    pub fn encode(&self, tokens: &[CotToken]) -> Result<Vec<usize>, VocabError> {
        tokens.iter().map(|t| self.require(&t.to_string())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<CotToken>, VocabError> {
        ids.iter().map(|&id| self.token(id)?.parse::<CotToken>()).collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = VocabError;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// A token of the SAT prompt/trace language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CotToken {
    /// A signed, 1-based literal; never zero.
    Lit(i32),
    /// Clause terminator `0`.
    Zero,
    Sep,
    Bt,
    Bos,
    D,
    Sat,
    Unsat,
}

impl CotToken {
    pub fn is_terminal(self) -> bool {
        matches!(self, CotToken::Sat | CotToken::Unsat)
    }
}

impl fmt::Display for CotToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CotToken::Lit(l) => write!(f, "{l}"),
            CotToken::Zero => f.write_str("0"),
            CotToken::Sep => f.write_str("[SEP]"),
            CotToken::Bt => f.write_str("[BT]"),
            CotToken::Bos => f.write_str("[BOS]"),
            CotToken::D => f.write_str("D"),
            CotToken::Sat => f.write_str("SAT"),
            CotToken::Unsat => f.write_str("UNSAT"),
        }
    }
}

impl FromStr for CotToken {
    type Err = VocabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "0" => CotToken::Zero,
            "[SEP]" => CotToken::Sep,
            "[BT]" => CotToken::Bt,
            "[BOS]" => CotToken::Bos,
            "D" => CotToken::D,
            "SAT" => CotToken::Sat,
            "UNSAT" => CotToken::Unsat,
            other => match other.parse::<i32>() {
                Ok(l) if l != 0 && l != i32::MIN => CotToken::Lit(l),
                _ => return Err(VocabError::BadToken(other.to_string())),
            },
        })
    }
}

/// Parses a whitespace-separated token string such as `"[BOS] 1 -2 0 [SEP]"`.
pub fn parse_token_string(s: &str) -> Result<Vec<CotToken>, VocabError> {
    s.split_whitespace().map(str::parse).collect()
}

/// Joins tokens with single spaces.
pub fn token_string(tokens: &[CotToken]) -> String {
    let parts: Vec<String> = tokens.iter().map(ToString::to_string).collect();
    parts.join(" ")
}
