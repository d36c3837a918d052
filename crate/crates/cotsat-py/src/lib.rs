//! Python bindings. Formulas cross the boundary as `(num_vars, clauses)`
//! with clauses as lists of signed integers; traces as space-separated
//! token strings.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cotsat::cnf_io::{emit_text, encode_to_tokens, parse_text};
use cotsat::compiler::FloatWidth;
use cotsat::dpll::{brute_force_sat, solve_with_trace, validate_full_trace, LowestId, ModelMirror, Verdict};
use cotsat::engine::{load_bundle, save_bundle};
use cotsat::formula::CnfFormula;
use cotsat::harness::{context_len_for, max_clauses, sat_compiler_config, SatModel};
use cotsat::instance_gen::{generate as gen_instances, Distribution, GenSpec};
use cotsat::vocab::{parse_token_string, token_string};

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn formula(num_vars: usize, clauses: Vec<Vec<i32>>) -> PyResult<CnfFormula> {
    let refs: Vec<&[i32]> = clauses.iter().map(Vec::as_slice).collect();
    CnfFormula::from_ints(num_vars, &refs).map_err(value_error)
}

fn clause_lists(f: &CnfFormula) -> Vec<Vec<i32>> {
    f.clauses()
        .iter()
        .map(|c| c.iter().map(|l| l.value()).collect())
        .collect()
}

fn verdict_str(v: Verdict) -> &'static str {
    match v {
        Verdict::Sat => "SAT",
        Verdict::Unsat => "UNSAT",
    }
}

/// Parses DIMACS text into `(num_vars, clauses)`.
#[pyfunction]
#[pyo3(signature = (text, num_vars=None))]
fn parse_dimacs(text: &str, num_vars: Option<usize>) -> PyResult<(usize, Vec<Vec<i32>>)> {
    let f = parse_text(text, num_vars).map_err(value_error)?;
    Ok((f.num_vars(), clause_lists(&f)))
}

/// DIMACS text with a `p cnf` header.
#[pyfunction]
fn emit_dimacs(num_vars: usize, clauses: Vec<Vec<i32>>) -> PyResult<String> {
    Ok(emit_text(&formula(num_vars, clauses)?))
}

/// The model prompt: `[BOS]`, the clauses, `[SEP]`.
#[pyfunction]
fn prompt(num_vars: usize, clauses: Vec<Vec<i32>>) -> PyResult<String> {
    Ok(token_string(&encode_to_tokens(&formula(num_vars, clauses)?)))
}

/// `"SAT"` or `"UNSAT"` by exhaustive search.
#[pyfunction]
fn brute_force(num_vars: usize, clauses: Vec<Vec<i32>>) -> PyResult<&'static str> {
    let v = brute_force_sat(&formula(num_vars, clauses)?).map_err(value_error)?;
    Ok(verdict_str(v))
}

/// Reference DPLL run: `(verdict, trace)`. The default heuristic is the one
/// the compiled model follows; `"lowest"` picks the lowest literal.
#[pyfunction]
#[pyo3(signature = (num_vars, clauses, heuristic="model"))]
fn dpll(num_vars: usize, clauses: Vec<Vec<i32>>, heuristic: &str) -> PyResult<(&'static str, String)> {
    let f = formula(num_vars, clauses)?;
    let (v, trace) = match heuristic {
        "model" => solve_with_trace(&f, &ModelMirror),
        "lowest" => solve_with_trace(&f, &LowestId),
        other => return Err(value_error(format!("unknown heuristic {other:?}"))),
    };
    Ok((verdict_str(v), token_string(&trace.generated)))
}

/// `None` for a valid trace, otherwise `(index, reason)` of the first
/// violation.
#[pyfunction]
fn validate(prompt: &str, trace: &str) -> PyResult<Option<(usize, String)>> {
    let p = parse_token_string(prompt).map_err(value_error)?;
    let t = parse_token_string(trace).map_err(value_error)?;
    let v = validate_full_trace(&p, &t).map_err(value_error)?;
    Ok(v.first_violation.map(|x| (x.index, x.reason)))
}

/// Labelled instances as dictionaries with keys `id`, `distribution`,
/// `num_vars`, `clauses`, `label`, `pair_id` and `seed`.
#[pyfunction]
#[pyo3(signature = (distribution, num_vars, count, seed=0))]
fn generate<'py>(
    py: Python<'py>,
    distribution: &str,
    num_vars: usize,
    count: usize,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let d: Distribution = distribution.parse().map_err(value_error)?;
    let data = gen_instances(&GenSpec::new(d, num_vars, count, seed)).map_err(value_error)?;
    data.iter()
        .map(|inst| {
            let dict = PyDict::new(py);
            dict.set_item("id", inst.id)?;
            dict.set_item("distribution", inst.distribution.name())?;
            dict.set_item("num_vars", inst.formula.num_vars())?;
            dict.set_item("clauses", clause_lists(&inst.formula))?;
            dict.set_item("label", verdict_str(inst.label))?;
            dict.set_item("pair_id", inst.pair_id)?;
            dict.set_item("seed", inst.seed)?;
            Ok(dict)
        })
        .collect()
}

/// A compiled transformer that solves SAT with a chain of thought.
#[pyclass(name = "Model", module = "cotsat", frozen)]
struct PyModel {
    inner: SatModel,
}

#[pymethods]
impl PyModel {
    /// Compiles the SAT program for `num_vars` variables and at most
    /// `num_clauses` clauses (default ⌊4.4·num_vars⌋).
    #[staticmethod]
    #[pyo3(signature = (num_vars, num_clauses=None, beta=20.0, context_len=None, float_bits=32))]
    fn compile(
        num_vars: usize,
        num_clauses: Option<usize>,
        beta: f64,
        context_len: Option<usize>,
        float_bits: u32,
    ) -> PyResult<Self> {
        let c = num_clauses.unwrap_or_else(|| max_clauses(num_vars));
        let mut cfg = sat_compiler_config(num_vars, beta);
        cfg.context_len = context_len.unwrap_or_else(|| context_len_for(num_vars, c));
        cfg.float_width =
            FloatWidth::from_bits(float_bits).ok_or_else(|| value_error("float_bits must be 32 or 64"))?;
        let inner = SatModel::compile(num_vars, c, &cfg).map_err(value_error)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let w = load_bundle(&path).map_err(value_error)?;
        Ok(Self {
            inner: SatModel::from_weights(w).map_err(value_error)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_bundle(self.inner.weights(), &path).map_err(value_error)
    }

    #[getter]
    fn num_vars(&self) -> usize {
        self.inner.num_vars
    }

    #[getter]
    fn num_clauses(&self) -> usize {
        self.inner.num_clauses
    }

    /// Layer count, heads, widths and context length.
    #[getter]
    fn dims<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = self.inner.weights().dims;
        let dict = PyDict::new(py);
        dict.set_item("n_layers", d.n_layers)?;
        dict.set_item("n_heads", d.n_heads)?;
        dict.set_item("d_emb", d.d_emb)?;
        dict.set_item("d_head", d.d_head)?;
        dict.set_item("d_mlp", d.d_mlp)?;
        dict.set_item("vocab_size", d.vocab_size)?;
        dict.set_item("context_len", d.context_len)?;
        Ok(dict)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.weights().parameter_count()
    }

    /// Greedy chain of thought for a formula: `(trace, verdict or None)`.
    #[pyo3(signature = (num_vars, clauses, budget=None))]
    fn solve(
        &self,
        py: Python<'_>,
        num_vars: usize,
        clauses: Vec<Vec<i32>>,
        budget: Option<usize>,
    ) -> PyResult<(String, Option<&'static str>)> {
        let f = formula(num_vars, clauses)?;
        let run = py.detach(|| self.inner.solve(&f, budget)).map_err(value_error)?;
        Ok((token_string(&run.generated), run.verdict.map(verdict_str)))
    }

    /// Next-token logits after a space-separated token sequence.
    fn logits(&self, tokens: &str) -> PyResult<Vec<f64>> {
        let toks = parse_token_string(tokens).map_err(value_error)?;
        let ids = self.inner.vocab().encode(&toks).map_err(value_error)?;
        self.inner.exec.forward(&ids).map_err(value_error)
    }

    /// The vocabulary in id order.
    #[getter]
    fn vocab(&self) -> Vec<String> {
        self.inner.vocab().tokens().to_vec()
    }
}

#[pymodule]
#[pyo3(name = "cotsat")]
pub fn cotsat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(parse_dimacs, m)?)?;
    m.add_function(wrap_pyfunction!(emit_dimacs, m)?)?;
    m.add_function(wrap_pyfunction!(prompt, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force, m)?)?;
    m.add_function(wrap_pyfunction!(dpll, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
