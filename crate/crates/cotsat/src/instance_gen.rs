//! Random 3-SAT instances near the satisfiability threshold.
//!
//! Three distributions: uniform random clauses, skewed clauses with biased
//! polarities and power-law variable frequencies, and marginal pairs that
//! differ in a single literal but have opposite labels. Every instance is
//! labelled by the brute-force oracle.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::distributions::{Distribution as _, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnf_io::{emit_text, parse_text, CnfError};
use crate::dpll::{brute_force_sat, Verdict};
use crate::formula::{CnfFormula, Literal};

/// Single-literal proposals tried per base formula in a marginal search.
pub const MARGINAL_PROPOSALS: usize = 2000;
/// Base formulas drawn per marginal pair before giving up.
pub const MARGINAL_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Marginal,
    Random,
    Skewed,
}

impl Distribution {
    pub const ALL: [Distribution; 3] = [Distribution::Marginal, Distribution::Random, Distribution::Skewed];

    pub fn name(self) -> &'static str {
        match self {
            Distribution::Marginal => "marginal",
            Distribution::Random => "random",
            Distribution::Skewed => "skewed",
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Distribution {
    type Err = GenError;

    fn from_str(s: &str) -> Result<Self, GenError> {
        Distribution::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| GenError::Spec(format!("unknown distribution {s:?}")))
    }
}

/// Prior for skewed formulas, drawn once per formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkewConfig {
    /// Each variable leans toward a random polarity with a probability
    /// drawn uniformly from this range.
    pub polarity_bias: (f64, f64),
    /// Variables are ranked by a random permutation; rank `r` (0-based) is
    /// drawn with weight `(r + 1)^-exponent`.
    pub weight_exponent: f64,
}

impl Default for SkewConfig {
    fn default() -> Self {
        Self {
            polarity_bias: (0.6, 0.9),
            weight_exponent: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub distribution: Distribution,
    pub num_vars: usize,
    /// Clause counts are uniform in `[⌈lo·p⌉, ⌊hi·p⌋]`.
    pub ratio: (f64, f64),
    pub count: usize,
    pub seed: u64,
    pub skew: SkewConfig,
}

impl GenSpec {
    pub fn new(distribution: Distribution, num_vars: usize, count: usize, seed: u64) -> Self {
        Self {
            distribution,
            num_vars,
            ratio: (4.1, 4.4),
            count,
            seed,
            skew: SkewConfig::default(),
        }
    }

    pub fn clause_range(&self) -> (usize, usize) {
        let p = self.num_vars as f64;
        ((self.ratio.0 * p).ceil() as usize, (self.ratio.1 * p).floor() as usize)
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: String| Err(GenError::Spec(m));
        if !(4..=24).contains(&self.num_vars) {
            return bad(format!("num_vars must be in 4..=24, got {}", self.num_vars));
        }
        let (lo, hi) = self.clause_range();
        if self.ratio.0.is_nan() || self.ratio.0 <= 0.0 || lo > hi {
            return bad(format!("clause ratio range {:?} is empty", self.ratio));
        }
        if self.distribution == Distribution::Marginal && !self.count.is_multiple_of(2) {
            return bad(format!("marginal datasets come in pairs; count {} is odd", self.count));
        }
        let (b0, b1) = self.skew.polarity_bias;
        if !(0.0 <= b0 && b0 <= b1 && b1 <= 1.0) || !self.skew.weight_exponent.is_finite() {
            return bad("skew parameters out of range".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub id: usize,
    pub distribution: Distribution,
    pub formula: CnfFormula,
    pub label: Verdict,
    /// Marginal pairs share an id.
    pub pair_id: Option<usize>,
    pub seed: u64,
}

/// One JSON line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: usize,
    pub distribution: Distribution,
    pub p: usize,
    pub c: usize,
    pub dimacs_text: String,
    pub label: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generation spec: {0}")]
    Spec(String),
    #[error("marginal pair {pair}: no label-flipping literal found after {retries} base formulas")]
    MarginalExhausted { pair: usize, retries: usize },
    #[error("dataset line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("dataset line {line}: {source}")]
    Dimacs { line: usize, source: CnfError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Seed of item `index` derived from the dataset seed, independent of
/// the order in which items are generated.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r.next_u64()
}

fn clause_count(spec: &GenSpec, rng: &mut ChaCha8Rng) -> usize {
    let (lo, hi) = spec.clause_range();
    rng.gen_range(lo..=hi)
}

fn label(f: &CnfFormula) -> Verdict {
    brute_force_sat(f).expect("num_vars is validated to be brute-forceable")
}

fn random_formula(spec: &GenSpec, rng: &mut ChaCha8Rng) -> CnfFormula {
    let p = spec.num_vars;
    let c = clause_count(spec, rng);
    let clauses = (0..c)
        .map(|_| {
            rand::seq::index::sample(rng, p, 3)
                .into_iter()
                .map(|v| {
                    let lit = (v + 1) as i32;
                    Literal::new(if rng.gen_bool(0.5) { lit } else { -lit })
                })
                .collect()
        })
        .collect();
    CnfFormula::new(p, clauses).expect("three distinct in-range variables")
}

fn skewed_formula(spec: &GenSpec, rng: &mut ChaCha8Rng) -> CnfFormula {
    let p = spec.num_vars;
    let (b0, b1) = spec.skew.polarity_bias;
    // Probability that variable v appears positively.
    let positive: Vec<f64> = (0..p)
        .map(|_| {
            let bias = if b1 > b0 { rng.gen_range(b0..=b1) } else { b0 };
            if rng.gen_bool(0.5) {
                bias
            } else {
                1.0 - bias
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.shuffle(rng);
    let mut weights = vec![0.0; p];
    for (rank, &v) in order.iter().enumerate() {
        weights[v] = ((rank + 1) as f64).powf(-spec.skew.weight_exponent);
    }
    let c = clause_count(spec, rng);
    let clauses = (0..c)
        .map(|_| {
            let mut w = weights.clone();
            let mut clause = Vec::with_capacity(3);
            for _ in 0..3 {
                let v = WeightedIndex::new(&w).expect("positive weights remain").sample(rng);
                w[v] = 0.0;
                let lit = (v + 1) as i32;
                clause.push(Literal::new(if rng.gen_bool(positive[v]) { lit } else { -lit }));
            }
            clause
        })
        .collect();
    CnfFormula::new(p, clauses).expect("three distinct in-range variables")
}

/// A single-literal edit of `f` with the opposite label, if one is found
/// within [`MARGINAL_PROPOSALS`] random proposals.
fn flip_search(f: &CnfFormula, base: Verdict, rng: &mut ChaCha8Rng) -> Option<CnfFormula> {
    let p = f.num_vars();
    for _ in 0..MARGINAL_PROPOSALS {
        let ci = rng.gen_range(0..f.num_clauses());
        let clause = &f.clauses()[ci];
        let slot = rng.gen_range(0..clause.len());
        let v = rng.gen_range(1..=p) as i32;
        let lit = Literal::new(if rng.gen_bool(0.5) { v } else { -v });
        if lit == clause[slot] {
            continue;
        }
        let Ok(g) = f.with_literal(ci, slot, lit) else {
            continue;
        };
        if label(&g) != base {
            return Some(g);
        }
    }
    None
}

fn marginal_pair(spec: &GenSpec, pair: usize, seed: u64) -> Result<[Instance; 2], GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MARGINAL_RETRIES {
        let f = random_formula(spec, &mut rng);
        let base = label(&f);
        if let Some(g) = flip_search(&f, base, &mut rng) {
            let (sat, unsat) = if base == Verdict::Sat { (f, g) } else { (g, f) };
            let make = |offset: usize, formula: CnfFormula, label: Verdict| Instance {
                id: 2 * pair + offset,
                distribution: Distribution::Marginal,
                formula,
                label,
                pair_id: Some(pair),
                seed,
            };
            return Ok([make(0, sat, Verdict::Sat), make(1, unsat, Verdict::Unsat)]);
        }
    }
    Err(GenError::MarginalExhausted {
        pair,
        retries: MARGINAL_RETRIES,
    })
}

fn single(spec: &GenSpec, make: fn(&GenSpec, &mut ChaCha8Rng) -> CnfFormula) -> Result<Vec<Instance>, GenError> {
    spec.validate()?;
    Ok((0..spec.count)
        .into_par_iter()
        .map(|id| {
            let seed = derive_seed(spec.seed, id as u64);
            let formula = make(spec, &mut ChaCha8Rng::seed_from_u64(seed));
            Instance {
                id,
                distribution: spec.distribution,
                label: label(&formula),
                formula,
                pair_id: None,
                seed,
            }
        })
        .collect())
}

/// Uniform clauses over three distinct variables with uniform polarity.
pub fn gen_random(spec: &GenSpec) -> Result<Vec<Instance>, GenError> {
    single(spec, random_formula)
}

/// Clauses drawn from a per-formula skewed prior (see [`SkewConfig`]).
pub fn gen_skewed(spec: &GenSpec) -> Result<Vec<Instance>, GenError> {
    single(spec, skewed_formula)
}

/// `count / 2` (SAT, UNSAT) pairs whose prompts differ in one literal.
pub fn gen_marginal(spec: &GenSpec) -> Result<Vec<Instance>, GenError> {
    spec.validate()?;
    let pairs: Vec<[Instance; 2]> = (0..spec.count / 2)
        .into_par_iter()
        .map(|pair| marginal_pair(spec, pair, derive_seed(spec.seed, pair as u64)))
        .collect::<Result<_, _>>()?;
    Ok(pairs.into_iter().flatten().collect())
}

pub fn generate(spec: &GenSpec) -> Result<Vec<Instance>, GenError> {
    match spec.distribution {
        Distribution::Random => gen_random(spec),
        Distribution::Skewed => gen_skewed(spec),
        Distribution::Marginal => gen_marginal(spec),
    }
}

impl Instance {
    pub fn to_record(&self) -> InstanceRecord {
        InstanceRecord {
            id: self.id,
            distribution: self.distribution,
            p: self.formula.num_vars(),
            c: self.formula.num_clauses(),
            dimacs_text: emit_text(&self.formula),
            label: self.label,
            pair_id: self.pair_id,
            seed: self.seed,
        }
    }

    pub fn from_record(r: &InstanceRecord, line: usize) -> Result<Self, GenError> {
        let formula = parse_text(&r.dimacs_text, Some(r.p)).map_err(|source| GenError::Dimacs { line, source })?;
        if formula.num_clauses() != r.c {
            return Err(GenError::Record {
                line,
                message: format!("c = {} but the formula has {} clauses", r.c, formula.num_clauses()),
            });
        }
        Ok(Self {
            id: r.id,
            distribution: r.distribution,
            formula,
            label: r.label,
            pair_id: r.pair_id,
            seed: r.seed,
        })
    }
}

pub fn write_jsonl<W: Write>(instances: &[Instance], mut out: W) -> Result<(), GenError> {
    for inst in instances {
        let line = serde_json::to_string(&inst.to_record()).expect("records serialize");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Instance>, GenError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord = serde_json::from_str(&line).map_err(|e| GenError::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(Instance::from_record(&rec, i + 1)?);
    }
    Ok(out)
}
