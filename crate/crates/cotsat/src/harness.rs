//! Experiment plumbing: compiling SAT models, solving instances with them
//! and summarizing the results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnf_io::encode_to_tokens;
use crate::compiler::{compile, CompileError, CompilerConfig};
use crate::decode::DecodeHalt;
use crate::dpll::{validate_full_trace, Verdict};
use crate::engine::{greedy_decode, EngineError, Executor, ModelWeights};
use crate::formula::CnfFormula;
use crate::instance_gen::{generate, Distribution, GenError, GenSpec, Instance};
use crate::sat_program::{build_sat_program, SatProgramError, SatProgramParams};
use crate::vocab::{CotToken, Vocabulary};

const TAG_NUM_VARS: &str = "num_vars";
const TAG_NUM_CLAUSES: &str = "num_clauses";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Program(#[from] SatProgramError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error("weights were not compiled from a SAT program: missing tag {0:?}")]
    MissingTag(&'static str),
    #[error("instance {id} has p={got} but the model was compiled for p={expected}")]
    VarMismatch { id: usize, expected: usize, got: usize },
    #[error("instance {id} has {got} clauses but the model supports at most {max}")]
    TooManyClauses { id: usize, max: usize, got: usize },
    #[error("prompt of {prompt} tokens leaves no room in context {context_len}")]
    NoRoom { prompt: usize, context_len: usize },
}

/// Empirical chain-of-thought length bound `8p·2^{0.08p}`.
pub fn cot_length_bound(p: usize) -> f64 {
    8.0 * p as f64 * 2f64.powf(0.08 * p as f64)
}

/// The theoretical step cap `p·2^{p+1}`.
pub fn theoretical_cap(p: usize) -> u128 {
    (p as u128) << (p + 1).min(120)
}

/// Default decode budget: four times the empirical bound, never above the
/// theoretical cap.
pub fn default_budget(p: usize) -> usize {
    let b = (4.0 * cot_length_bound(p)).ceil() as u128;
    b.min(theoretical_cap(p)).min(usize::MAX as u128) as usize
}

/// Largest clause count of the evaluation distributions, `⌊4.4p⌋`.
pub fn max_clauses(p: usize) -> usize {
    (4.4 * p as f64).floor() as usize
}

/// Context for prompts of up to `c` clauses plus the default budget.
pub fn context_len_for(p: usize, c: usize) -> usize {
    4 * c + 2 + default_budget(p)
}

/// Compiler settings for the SAT model at `p` with exactness `beta`.
pub fn sat_compiler_config(p: usize, beta: f64) -> CompilerConfig {
    CompilerConfig {
        beta,
        nonsep_penalty: 20f64.max(p as f64 + 1.0),
        context_len: context_len_for(p, max_clauses(p)),
        ..CompilerConfig::default()
    }
}

/// A compiled SAT model ready to decode.
#[derive(Debug, Clone)]
pub struct SatModel {
    pub num_vars: usize,
    pub num_clauses: usize,
    pub exec: Executor,
}

/// The result of decoding one formula.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRun {
    pub prompt: Vec<CotToken>,
    pub generated: Vec<CotToken>,
    pub verdict: Option<Verdict>,
    pub budget: usize,
    /// Smallest top-1 minus top-2 logit gap over the decode steps.
    pub min_margin: f64,
}

impl SatModel {
    /// Builds and compiles the SAT program for `p` variables and at most
    /// `c` clauses.
    pub fn compile(p: usize, c: usize, cfg: &CompilerConfig) -> Result<Self, HarnessError> {
        let params = SatProgramParams {
            mean_exactness: cfg.beta,
            nonsep_penalty: cfg.nonsep_penalty,
            ..SatProgramParams::new(p, c, cfg.context_len)
        };
        let sp = build_sat_program(params)?;
        let mut w = compile(&sp.program, cfg)?;
        w.tags.insert(TAG_NUM_VARS.into(), p.to_string());
        w.tags.insert(TAG_NUM_CLAUSES.into(), c.to_string());
        Self::from_weights(w)
    }

    pub fn from_weights(w: ModelWeights) -> Result<Self, HarnessError> {
        let tag = |k: &'static str| -> Result<usize, HarnessError> {
            w.tags
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or(HarnessError::MissingTag(k))
        };
        let (num_vars, num_clauses) = (tag(TAG_NUM_VARS)?, tag(TAG_NUM_CLAUSES)?);
        Ok(Self {
            num_vars,
            num_clauses,
            exec: Executor::new(w),
        })
    }

    pub fn weights(&self) -> &ModelWeights {
        self.exec.weights()
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.weights().vocab
    }

    fn check(&self, id: usize, f: &CnfFormula) -> Result<(), HarnessError> {
        if f.num_vars() != self.num_vars {
            return Err(HarnessError::VarMismatch {
                id,
                expected: self.num_vars,
                got: f.num_vars(),
            });
        }
        if f.num_clauses() > self.num_clauses {
            return Err(HarnessError::TooManyClauses {
                id,
                max: self.num_clauses,
                got: f.num_clauses(),
            });
        }
        Ok(())
    }

    /// Decodes the trace for `f`. The budget is `budget` (default
    /// [`default_budget`]) clipped to the room left in the context.
    pub fn solve(&self, f: &CnfFormula, budget: Option<usize>) -> Result<ModelRun, HarnessError> {
        self.check(0, f)?;
        let prompt = encode_to_tokens(f);
        let ctx = self.weights().dims.context_len;
        let room = ctx.saturating_sub(prompt.len());
        let budget = budget.unwrap_or_else(|| default_budget(self.num_vars)).min(room);
        if budget == 0 {
            return Err(HarnessError::NoRoom {
                prompt: prompt.len(),
                context_len: ctx,
            });
        }
        let ids = self
            .vocab()
            .encode(&prompt)
            .expect("prompt tokens are in the SAT vocabulary");
        let decoded = greedy_decode(&self.exec, &ids, budget)?;
        let generated = self
            .vocab()
            .decode(&decoded.generated)
            .expect("model emits vocabulary ids");
        let verdict = match decoded.halt {
            DecodeHalt::Stopped(_) => match generated.last() {
                Some(CotToken::Sat) => Some(Verdict::Sat),
                Some(CotToken::Unsat) => Some(Verdict::Unsat),
                _ => None,
            },
            DecodeHalt::BudgetExhausted => None,
        };
        Ok(ModelRun {
            prompt,
            generated,
            verdict,
            budget,
            min_margin: decoded.margins.iter().copied().fold(f64::INFINITY, f64::min),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Correct,
    Wrong,
    NonHalting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub id: usize,
    pub distribution: Distribution,
    pub label: Verdict,
    pub predicted: Option<Verdict>,
    pub outcome: Outcome,
    pub cot_len: usize,
    pub budget: usize,
    pub trace_valid: bool,
    pub first_violation: Option<usize>,
    pub min_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub instances: usize,
    pub correct: usize,
    pub wrong: usize,
    pub non_halting: usize,
    pub accuracy: f64,
    pub trace_valid_rate: f64,
    pub cot_max: usize,
    pub cot_mean: f64,
}

impl Summary {
    fn of(results: &[&InstanceResult]) -> Self {
        let n = results.len();
        let count = |o: Outcome| results.iter().filter(|r| r.outcome == o).count();
        let rate = |k: usize| if n == 0 { 1.0 } else { k as f64 / n as f64 };
        let correct = count(Outcome::Correct);
        let total_len: usize = results.iter().map(|r| r.cot_len).sum();
        Self {
            instances: n,
            correct,
            wrong: count(Outcome::Wrong),
            non_halting: count(Outcome::NonHalting),
            accuracy: rate(correct),
            trace_valid_rate: rate(results.iter().filter(|r| r.trace_valid).count()),
            cot_max: results.iter().map(|r| r.cot_len).max().unwrap_or(0),
            cot_mean: if n == 0 { 0.0 } else { total_len as f64 / n as f64 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub p: usize,
    pub beta: f64,
    pub overall: Summary,
    pub per_distribution: BTreeMap<String, Summary>,
    /// `8p·2^{0.08p}` and how many traces exceeded it.
    pub cot_bound: f64,
    pub cot_bound_violations: usize,
    /// Whether any trace reached `p·2^{p+1}` tokens.
    pub theoretical_cap_reached: bool,
    pub wall_seconds: f64,
    pub results: Vec<InstanceResult>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "p={} beta={} cot bound {:.1}", self.p, self.beta, self.cot_bound);
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>8} {:>6} {:>6} {:>9} {:>8} {:>8}",
            "set", "n", "accuracy", "wrong", "nohalt", "valid", "cot_max", "cot_mean"
        );
        let mut row = |name: &str, m: &Summary| {
            let _ = writeln!(
                s,
                "{:<10} {:>6} {:>8.4} {:>6} {:>6} {:>9.4} {:>8} {:>8.1}",
                name, m.instances, m.accuracy, m.wrong, m.non_halting, m.trace_valid_rate, m.cot_max, m.cot_mean
            );
        };
        for (name, m) in &self.per_distribution {
            row(name, m);
        }
        row("all", &self.overall);
        let _ = writeln!(
            s,
            "bound violations {}; cap reached {}; {:.2}s",
            self.cot_bound_violations, self.theoretical_cap_reached, self.wall_seconds
        );
        s
    }
}

/// Decodes one instance and scores it against its label.
pub fn run_instance(model: &SatModel, inst: &Instance, budget: Option<usize>) -> Result<InstanceResult, HarnessError> {
    model.check(inst.id, &inst.formula)?;
    let run = model.solve(&inst.formula, budget)?;
    let validation = validate_full_trace(&run.prompt, &run.generated).expect("prompt is well formed");
    let outcome = match run.verdict {
        None => Outcome::NonHalting,
        Some(v) if v == inst.label => Outcome::Correct,
        Some(_) => Outcome::Wrong,
    };
    Ok(InstanceResult {
        id: inst.id,
        distribution: inst.distribution,
        label: inst.label,
        predicted: run.verdict,
        outcome,
        cot_len: run.generated.len(),
        budget: run.budget,
        trace_valid: validation.valid,
        first_violation: validation.first_violation.map(|v| v.index),
        min_margin: run.min_margin,
    })
}

/// Evaluates `model` on `instances` in parallel; results are ordered as
/// the input.
pub fn evaluate(model: &SatModel, instances: &[Instance], budget: Option<usize>) -> Result<EvalReport, HarnessError> {
    let start = Instant::now();
    let results: Vec<InstanceResult> = instances
        .par_iter()
        .map(|inst| run_instance(model, inst, budget))
        .collect::<Result<_, _>>()?;
    let p = model.num_vars;
    let all: Vec<&InstanceResult> = results.iter().collect();
    let mut per_distribution = BTreeMap::new();
    for d in Distribution::ALL {
        let subset: Vec<&InstanceResult> = results.iter().filter(|r| r.distribution == d).collect();
        if !subset.is_empty() {
            per_distribution.insert(d.name().to_string(), Summary::of(&subset));
        }
    }
    let bound = cot_length_bound(p);
    let cap = theoretical_cap(p);
    Ok(EvalReport {
        p,
        beta: model.weights().config.beta,
        overall: Summary::of(&all),
        per_distribution,
        cot_bound: bound,
        cot_bound_violations: results.iter().filter(|r| r.cot_len as f64 > bound).count(),
        theoretical_cap_reached: results.iter().any(|r| r.cot_len as u128 >= cap),
        wall_seconds: start.elapsed().as_secs_f64(),
        results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub p: usize,
    pub beta: f64,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub distribution: Distribution,
    pub count: usize,
    pub seed: u64,
    pub entries: Vec<SweepEntry>,
}

impl SweepReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} x{} seed {}", self.distribution, self.count, self.seed);
        let _ = writeln!(
            s,
            "{:>4} {:>8} {:>9} {:>6} {:>7}",
            "p", "beta", "accuracy", "wrong", "nohalt"
        );
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{:>4} {:>8} {:>9.4} {:>6} {:>7}",
                e.p, e.beta, e.summary.accuracy, e.summary.wrong, e.summary.non_halting
            );
        }
        s
    }
}

/// Accuracy of models compiled at each `beta` on one dataset per `p`.
pub fn sweep_beta(
    ps: &[usize],
    betas: &[f64],
    distribution: Distribution,
    count: usize,
    seed: u64,
) -> Result<SweepReport, HarnessError> {
    let mut entries = Vec::new();
    for &p in ps {
        let data = generate(&GenSpec::new(distribution, p, count, seed))?;
        for &beta in betas {
            let model = SatModel::compile(p, max_clauses(p), &sat_compiler_config(p, beta))?;
            let report = evaluate(&model, &data, None)?;
            entries.push(SweepEntry {
                p,
                beta,
                summary: report.overall,
            });
        }
    }
    Ok(SweepReport {
        distribution,
        count,
        seed,
        entries,
    })
}
