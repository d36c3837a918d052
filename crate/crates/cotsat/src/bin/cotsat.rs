use std::fmt::Display;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cotsat::cnf_io::parse_text;
use cotsat::compiler::FloatWidth;
use cotsat::dpll::{brute_force_model, solve_with_trace, validate_full_trace, LowestId, ModelMirror, Verdict};
use cotsat::engine::{load_bundle, save_bundle};
use cotsat::harness::{context_len_for, evaluate, max_clauses, sat_compiler_config, sweep_beta, SatModel};
use cotsat::instance_gen::{generate, read_jsonl, write_jsonl, Distribution, GenSpec};
use cotsat::vocab::{parse_token_string, token_string, CotToken};

const THREADS_ENV: &str = "COTSAT_THREADS";

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECK: u8 = 3;

/// Compile and run the transformer DPLL solver.
#[derive(Debug, Parser)]
#[command(name = "cotsat", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compile the SAT program into a weight bundle directory.
    Compile {
        #[arg(long)]
        p: usize,
        /// Largest clause count supported; defaults to floor(4.4p).
        #[arg(long)]
        c: Option<usize>,
        #[arg(long, default_value_t = 20.0)]
        beta: f64,
        /// Defaults to room for a c-clause prompt plus the decode budget.
        #[arg(long)]
        context_len: Option<usize>,
        #[arg(long, default_value = "32")]
        float_bits: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a chain of thought for one DIMACS formula.
    Solve {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        dimacs: PathBuf,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Generate a labelled dataset as JSON lines.
    Gen {
        #[arg(long, default_value = "marginal")]
        distribution: Distribution,
        #[arg(long)]
        p: usize,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a weight bundle on a dataset.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        budget: Option<usize>,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Exit with status 3 unless every instance is correct with a valid trace.
        #[arg(long)]
        require_perfect: bool,
    },
    /// Accuracy of freshly compiled models across attention exactness values.
    SweepBeta {
        /// Comma-separated values or an inclusive range such as 4..10.
        #[arg(long, default_value = "10")]
        p: String,
        #[arg(long, value_delimiter = ',', default_value = "5,10,15,17.5,20")]
        beta: Vec<f64>,
        #[arg(long, default_value = "marginal")]
        distribution: Distribution,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Label a DIMACS formula by exhaustive search and print the reference trace.
    Oracle {
        #[arg(long)]
        dimacs: PathBuf,
        /// Use the lowest-literal heuristic instead of the one the model follows.
        #[arg(long)]
        lowest_id: bool,
    },
    /// Check a chain of thought against the DPLL rules.
    CheckTrace {
        /// Prompt tokens, or @FILE to read them from a file.
        #[arg(long)]
        prompt: String,
        /// Generated tokens, or @FILE.
        #[arg(long)]
        trace: String,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn data(e: impl Display) -> Failure {
    Failure {
        code: EXIT_DATA,
        message: e.to_string(),
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CmdResult = Result<ExitCode, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(f) = configure_threads() {
        eprintln!("error: {}", f.message);
        return ExitCode::from(f.code);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| usage(format!("{THREADS_ENV} must be a thread count, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(e.to_string()))
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Compile {
            p,
            c,
            beta,
            context_len,
            float_bits,
            out,
        } => cmd_compile(p, c, beta, context_len, float_bits, &out),
        Command::Solve {
            weights,
            dimacs,
            budget,
        } => cmd_solve(&weights, &dimacs, budget),
        Command::Gen {
            distribution,
            p,
            count,
            seed,
            out,
        } => cmd_gen(GenSpec::new(distribution, p, count, seed), out.as_deref()),
        Command::Eval {
            weights,
            dataset,
            budget,
            report,
            require_perfect,
        } => cmd_eval(&weights, &dataset, budget, report.as_deref(), require_perfect),
        Command::SweepBeta {
            p,
            beta,
            distribution,
            count,
            seed,
            report,
        } => cmd_sweep(&parse_p_list(&p)?, &beta, distribution, count, seed, report.as_deref()),
        Command::Oracle { dimacs, lowest_id } => cmd_oracle(&dimacs, lowest_id),
        Command::CheckTrace { prompt, trace } => cmd_check_trace(&prompt, &trace),
    }
}

fn parse_p_list(s: &str) -> Result<Vec<usize>, Failure> {
    let bad = || usage(format!("cannot read variable counts from {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        );
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

fn read_formula(path: &Path) -> Result<cotsat::formula::CnfFormula, Failure> {
    let text = fs::read_to_string(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    parse_text(&text, None).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn write_output(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn cmd_compile(
    p: usize,
    c: Option<usize>,
    beta: f64,
    context_len: Option<usize>,
    float_bits: u32,
    out: &Path,
) -> CmdResult {
    let c = c.unwrap_or_else(|| max_clauses(p));
    let mut cfg = sat_compiler_config(p, beta);
    cfg.context_len = context_len.unwrap_or_else(|| context_len_for(p, c));
    cfg.float_width = FloatWidth::from_bits(float_bits).ok_or_else(|| usage("float width must be 32 or 64"))?;
    let model = SatModel::compile(p, c, &cfg).map_err(data)?;
    save_bundle(model.weights(), out).map_err(data)?;
    let w = model.weights();
    println!(
        "p={p} c={c} layers={} heads={} d_emb={} d_head={} d_mlp={} context={} parameters={} nonzero={}",
        w.dims.n_layers,
        w.dims.n_heads,
        w.dims.d_emb,
        w.dims.d_head,
        w.dims.d_mlp,
        w.dims.context_len,
        w.parameter_count(),
        w.nonzero_count()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_model(weights: &Path) -> Result<SatModel, Failure> {
    let w = load_bundle(weights).map_err(data)?;
    SatModel::from_weights(w).map_err(data)
}

fn cmd_solve(weights: &Path, dimacs: &Path, budget: Option<usize>) -> CmdResult {
    let model = load_model(weights)?;
    let f = read_formula(dimacs)?;
    let run = model.solve(&f, budget).map_err(data)?;
    println!("{}", token_string(&run.generated));
    match run.verdict {
        Some(v) => println!("{v:?}"),
        None => println!("no verdict within {} tokens", run.budget),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen(spec: GenSpec, out: Option<&Path>) -> CmdResult {
    let instances = generate(&spec).map_err(data)?;
    match out {
        Some(path) => {
            let file = fs::File::create(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
            let mut w = io::BufWriter::new(file);
            write_jsonl(&instances, &mut w).map_err(data)?;
            w.flush().map_err(data)?;
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write_jsonl(&instances, &mut lock).map_err(data)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(weights: &Path, dataset: &Path, budget: Option<usize>, report: Option<&Path>, strict: bool) -> CmdResult {
    let model = load_model(weights)?;
    let file = fs::File::open(dataset).map_err(|e| data(format!("{}: {e}", dataset.display())))?;
    let instances = read_jsonl(io::BufReader::new(file)).map_err(data)?;
    let r = evaluate(&model, &instances, budget).map_err(data)?;
    print!("{}", r.to_table());
    if let Some(path) = report {
        write_output(path, &serde_json::to_string_pretty(&r).map_err(data)?)?;
    }
    let perfect = r.overall.accuracy == 1.0 && r.overall.trace_valid_rate == 1.0;
    Ok(if strict && !perfect {
        ExitCode::from(EXIT_CHECK)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_sweep(
    ps: &[usize],
    betas: &[f64],
    distribution: Distribution,
    count: usize,
    seed: u64,
    report: Option<&Path>,
) -> CmdResult {
    if betas.is_empty() {
        return Err(usage("at least one beta is required"));
    }
    let r = sweep_beta(ps, betas, distribution, count, seed).map_err(data)?;
    print!("{}", r.to_table());
    if let Some(path) = report {
        write_output(path, &serde_json::to_string_pretty(&r).map_err(data)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle(dimacs: &Path, lowest_id: bool) -> CmdResult {
    let f = read_formula(dimacs)?;
    let model = brute_force_model(&f).map_err(data)?;
    let (verdict, trace) = if lowest_id {
        solve_with_trace(&f, &LowestId)
    } else {
        solve_with_trace(&f, &ModelMirror)
    };
    let brute = if model.is_some() { Verdict::Sat } else { Verdict::Unsat };
    match model {
        Some(lits) => {
            let vals: Vec<String> = lits.iter().map(|l| l.value().to_string()).collect();
            println!("SAT {}", vals.join(" "));
        }
        None => println!("UNSAT"),
    }
    println!("{}", token_string(&trace.generated));
    if brute != verdict {
        return Err(Failure {
            code: EXIT_CHECK,
            message: format!("DPLL answered {verdict:?} but exhaustive search found {brute:?}"),
        });
    }
    Ok(ExitCode::SUCCESS)
}

fn read_tokens(arg: &str) -> Result<Vec<CotToken>, Failure> {
    let text = match arg.strip_prefix('@') {
        Some(path) => fs::read_to_string(path).map_err(|e| data(format!("{path}: {e}")))?,
        None => arg.to_string(),
    };
    parse_token_string(&text).map_err(data)
}

fn cmd_check_trace(prompt: &str, trace: &str) -> CmdResult {
    let prompt = read_tokens(prompt)?;
    let generated = read_tokens(trace)?;
    let v = validate_full_trace(&prompt, &generated).map_err(data)?;
    match v.first_violation {
        None => {
            println!("valid");
            Ok(ExitCode::SUCCESS)
        }
        Some(violation) => {
            println!("invalid at {violation}");
            Ok(ExitCode::from(EXIT_CHECK))
        }
    }
}
