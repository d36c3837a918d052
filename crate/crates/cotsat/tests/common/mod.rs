#![allow(dead_code)]

use cotsat::cnf_io::encode_to_tokens;
use cotsat::compiler::{compile_stages, CompilerConfig, ConcreteEvaluator};
use cotsat::decode::greedy_decode;
use cotsat::dsl::Evaluator;
use cotsat::engine::Executor;
use cotsat::formula::CnfFormula;
use cotsat::harness::{context_len_for, default_budget, max_clauses, sat_compiler_config};
use cotsat::sat_program::{build_sat_program, SatProgramParams};
use cotsat::vocab::{token_string, CotToken};

pub const EXAMPLE_PROMPT: &str = "[BOS] -2 -4 -1 0 3 4 -1 0 -1 -3 -2 0 1 -2 -4 0 -4 2 1 0 1 -2 4 0 [SEP]";

pub fn example() -> CnfFormula {
    CnfFormula::from_ints(
        4,
        &[
            &[-2, -4, -1],
            &[3, 4, -1],
            &[-1, -3, -2],
            &[1, -2, -4],
            &[-4, 2, 1],
            &[1, -2, 4],
        ],
    )
    .unwrap()
}

/// Generated tokens of the abstract program, the reduced graph evaluated
/// with real attention, and the compiled transformer.
pub struct StageTraces {
    pub abstract_eval: Vec<CotToken>,
    pub concrete_eval: Vec<CotToken>,
    pub compiled: Vec<CotToken>,
}

impl StageTraces {
    pub fn agree(&self) -> bool {
        self.abstract_eval == self.concrete_eval && self.abstract_eval == self.compiled
    }

    pub fn describe(&self) -> String {
        format!(
            "abstract: {}\nconcrete: {}\ncompiled: {}",
            token_string(&self.abstract_eval),
            token_string(&self.concrete_eval),
            token_string(&self.compiled)
        )
    }
}

/// Decodes every formula at the three stages of one SAT program sized for
/// `p` variables.
pub fn stage_traces(p: usize, formulas: &[CnfFormula]) -> Vec<StageTraces> {
    let c = max_clauses(p).max(formulas.iter().map(|f| f.num_clauses()).max().unwrap_or(0));
    let ctx = context_len_for(p, c);
    let cfg = CompilerConfig {
        context_len: ctx,
        ..sat_compiler_config(p, 20.0)
    };
    let sp = build_sat_program(SatProgramParams::new(p, c, ctx)).unwrap();
    let compiled = compile_stages(&sp.program, &cfg).unwrap();
    let exec = Executor::new(compiled.weights.clone());
    let vocab = sp.program.vocab();
    let stop = [vocab.id("SAT").unwrap(), vocab.id("UNSAT").unwrap()];
    let budget = default_budget(p);
    formulas
        .iter()
        .map(|f| {
            let prompt = vocab.encode(&encode_to_tokens(f)).unwrap();
            let steps = budget.min(ctx - prompt.len());
            let a = greedy_decode(&mut Evaluator::new(&sp.program), &prompt, &stop, steps).unwrap();
            let b = greedy_decode(&mut ConcreteEvaluator::new(&compiled.reduced), &prompt, &stop, steps).unwrap();
            let m = greedy_decode(&mut exec.session(), &prompt, &stop, steps).unwrap();
            StageTraces {
                abstract_eval: vocab.decode(&a.generated).unwrap(),
                concrete_eval: vocab.decode(&b.generated).unwrap(),
                compiled: vocab.decode(&m.generated).unwrap(),
            }
        })
        .collect()
}

/// Largest infinity-norm gap between the softmax head compiled for each
/// `Mean` node of the SAT program and hard averaging over the top-scoring
/// positions, over `inputs` random sequences per head whose scores are
/// either tied or separated by the node's margin.
pub fn mean_head_errors(p: usize, beta: f64, inputs: usize, seed: u64) -> Vec<(String, f64)> {
    use cotsat::compiler::{build_attention_for_mean, AttentionApproxParams};
    use cotsat::dsl::NodeKind;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    let c = max_clauses(p);
    let ctx = context_len_for(p, c);
    let cfg = CompilerConfig {
        context_len: ctx,
        ..sat_compiler_config(p, beta)
    };
    let sp = build_sat_program(SatProgramParams::new(p, c, ctx)).unwrap();
    let g = sp.program.graph();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for node in g.nodes() {
        let NodeKind::Mean {
            q,
            v,
            bos_weight,
            margin,
            ..
        } = &node.kind
        else {
            continue;
        };
        let margin = margin.expect("SAT program means carry a margin");
        let approx = AttentionApproxParams::exact(margin, 1.0, 1e-3);
        let head = build_attention_for_mean(g, node.id, &cfg, &approx).unwrap();
        let wq: usize = q.iter().map(|&i| g.width(i)).sum();
        let wv: usize = v.iter().map(|&i| g.width(i)).sum();
        let mut worst = 0.0f64;
        let mut accepted = 0;
        while accepted < inputs {
            let n = rng.gen_range(1..=48);
            let mut rows = Array2::<f64>::zeros((n, 2 * wq + wv + 2));
            for i in 0..n {
                for l in 0..wq {
                    rows[[i, l]] = rng.gen_range(-2..=2) as f64;
                    rows[[i, wq + l]] = margin * rng.gen_range(-3..=3) as f64;
                }
                for l in 0..wv {
                    rows[[i, 2 * wq + l]] = rng.gen_range(-1.0..=1.0);
                }
                rows[[i, 2 * wq + wv]] = 1.0;
            }
            rows[[0, 2 * wq + wv + 1]] = 1.0;
            // Hard attention from the last row.
            let last = n - 1;
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    let dot: f64 = (0..wq).map(|l| rows[[last, l]] * rows[[j, wq + l]]).sum();
                    dot + if j == 0 { *bos_weight } else { 0.0 }
                })
                .collect();
            let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let tol = 1e-9 * (1.0 + best.abs());
            let separated = scores.iter().all(|&s| best - s <= tol || best - s >= margin - tol);
            if !separated {
                continue;
            }
            accepted += 1;
            let winners: Vec<usize> = (0..n).filter(|&j| best - scores[j] <= tol).collect();
            let soft = head.apply(&rows);
            for l in 0..wv {
                let hard = winners.iter().map(|&j| rows[[j, 2 * wq + l]]).sum::<f64>() / winners.len() as f64;
                worst = worst.max((soft[[last, l]] - hard).abs());
            }
        }
        out.push((node.name.clone().unwrap_or_else(|| format!("node {}", node.id)), worst));
    }
    out
}
